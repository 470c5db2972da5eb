"""Comparison of early-stopping outcomes across evaluation subsets.

Every method (a subset of the validation set) is run through the same target
cohort; the full-set run is the oracle. Outputs are plain CSV so they can be
plotted elsewhere: pairwise epoch MAE, I-F means for scatter plots, and
five-number summaries of epochs trained.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .characteristics import ForgettingVector
from .datastore import EvalCache
from .earlystop import CohortRow, Trajectory, run_cohort
from .errors import KeyMismatch
from .subsampler import GAConfig, evolve

ORACLE = "oracle"


@dataclass(frozen=True)
class MethodOutcomes:
    name: str
    rows: Tuple[CohortRow, ...]

    def at(self, gamma: float) -> Dict[int, CohortRow]:
        return {r.user: r for r in self.rows if r.gamma == gamma}

    def gammas(self) -> List[float]:
        return sorted({r.gamma for r in self.rows})


def _mean_std(values) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def pairwise_epoch_mae(oracle: MethodOutcomes, method: MethodOutcomes, gamma: float) -> Tuple[float, float]:
    """Mean and population std of |epochs_oracle - epochs_method| over users."""
    a, b = oracle.at(gamma), method.at(gamma)
    if set(a) != set(b) or not a:
        raise KeyMismatch(f"{oracle.name} and {method.name} cover different users at gamma={gamma}")
    diffs = [abs(a[u].outcome.epochs_trained - b[u].outcome.epochs_trained) for u in sorted(a)]
    return _mean_std(diffs)


def if_summary(outcomes: MethodOutcomes, gamma: float) -> Dict[str, float]:
    rows = outcomes.at(gamma)
    if not rows:
        raise KeyMismatch(f"{outcomes.name} has no outcomes at gamma={gamma}")
    imp = _mean_std([rows[u].outcome.final_improvement for u in sorted(rows)])
    forg = _mean_std([rows[u].outcome.final_forgetting_on_full for u in sorted(rows)])
    return {"imp_mean": imp[0], "imp_std": imp[1], "forg_mean": forg[0], "forg_std": forg[1]}


def five_numbers(values) -> Tuple[float, float, float, float, float]:
    """min, Q1, median, Q3, max with linear interpolation between order statistics."""
    arr = np.asarray(values, dtype=np.float64)
    q = np.percentile(arr, [0, 25, 50, 75, 100], method="linear")
    return tuple(float(x) for x in q)


def epochs_distribution(outcomes: MethodOutcomes, gammas: Sequence[float]) -> Dict[float, tuple]:
    out = {}
    for g in gammas:
        rows = outcomes.at(g)
        if not rows:
            raise KeyMismatch(f"{outcomes.name} has no outcomes at gamma={g}")
        out[g] = five_numbers([rows[u].outcome.epochs_trained for u in sorted(rows)])
    return out


def evaluate_methods(cache: EvalCache, trajectories: Sequence[Trajectory],
                     subsets: Mapping[str, Sequence[int]], gammas: Sequence[float],
                     max_epochs: int, workers: int = 1) -> Dict[str, MethodOutcomes]:
    """Run the cohort once per subset, plus the full-set oracle first."""
    out = {ORACLE: MethodOutcomes(ORACLE, tuple(run_cohort(
        trajectories, np.arange(cache.n_samples), cache, gammas, max_epochs, workers)))}
    for name, subset in subsets.items():
        out[name] = MethodOutcomes(name, tuple(run_cohort(
            trajectories, subset, cache, gammas, max_epochs, workers)))
    return out


def mae_table(results: Mapping[str, MethodOutcomes], gammas: Sequence[float]) -> List[dict]:
    oracle = results[ORACLE]
    rows = []
    for name, res in results.items():
        if name == ORACLE:
            continue
        for g in gammas:
            mean, std = pairwise_epoch_mae(oracle, res, g)
            rows.append({"method": name, "gamma": g, "mean": mean, "std": std})
    return rows


def average_mae(table: Sequence[dict], method: str) -> float:
    """Mean over thresholds of a method's pairwise MAE."""
    return float(np.mean([r["mean"] for r in table if r["method"] == method]))


def ifplot_table(results: Mapping[str, MethodOutcomes], gammas: Sequence[float]) -> List[dict]:
    return [{"method": name, "gamma": g, **if_summary(res, g)}
            for name, res in results.items() for g in gammas]


def epochs_box_table(results: Mapping[str, MethodOutcomes], gammas: Sequence[float]) -> List[dict]:
    rows = []
    for name, res in results.items():
        for g, (lo, q1, med, q3, hi) in epochs_distribution(res, gammas).items():
            rows.append({"method": name, "gamma": g, "min": lo, "q1": q1, "median": med,
                         "q3": q3, "max": hi})
    return rows


def subset_size_sweep(cache: EvalCache, full_vector: ForgettingVector,
                      trajectories: Sequence[Trajectory], sizes: Sequence[int],
                      gamma: float, max_epochs: int, config: GAConfig,
                      workers: int = 1) -> List[dict]:
    """Optimize one subset per size and score its epoch MAE against the oracle."""
    full = np.arange(cache.n_samples)
    oracle = MethodOutcomes(ORACLE, tuple(run_cohort(trajectories, full, cache, [gamma], max_epochs)))
    rows = []
    for size in sizes:
        res = evolve(cache, full_vector, replace(config, genes=int(size)), workers=workers)
        method = MethodOutcomes(f"size{size}", tuple(run_cohort(
            trajectories, res.indices, cache, [gamma], max_epochs)))
        mean, std = pairwise_epoch_mae(oracle, method, gamma)
        rows.append({"size": int(size), "gamma": gamma, "mean": mean, "std": std,
                     "fitness": res.fitness})
    return rows


# --- CSV ---------------------------------------------------------------------

MAE_COLUMNS = ["method", "gamma", "mean", "std"]
IFPLOT_COLUMNS = ["method", "gamma", "imp_mean", "imp_std", "forg_mean", "forg_std"]
BOX_COLUMNS = ["method", "gamma", "min", "q1", "median", "q3", "max"]
SWEEP_COLUMNS = ["size", "gamma", "mean", "std", "fitness"]


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def write_table(path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for row in rows:
            out.writerow([_fmt(row[c]) for c in columns])


def read_table(path) -> List[dict]:
    """Read back a table written by :func:`write_table`; numeric cells become floats."""
    def cast(text):
        try:
            return float(text)
        except ValueError:
            return text

    with open(path, newline="", encoding="utf-8") as fh:
        return [{k: cast(v) for k, v in row.items()} for row in csv.DictReader(fh)]
