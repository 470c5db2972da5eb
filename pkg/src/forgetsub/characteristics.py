"""Improvement-forgetting characteristics of the simulated fine-tuning runs.

A forgetting vector holds one relative WER change per simulated run, all
measured on the same subset of the validation samples against the baseline
predictions on that subset. Comparing the vector of a candidate subset with
the full-set vector is what the optimizer scores.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, Mapping, Optional, Sequence

import numpy as np

from .datastore import EvalCache, RunKey
from .errors import ConfigInvalid, EmptySubset, IncompleteRun
from .metrics import improvement_score

# Runs that improve the validation set by more than 6% count as outliers.
OUTLIER_THRESHOLD = -0.06


@dataclass(frozen=True)
class ForgettingVector:
    values: np.ndarray
    subset: np.ndarray
    runs: tuple

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class IFRecord:
    run: RunKey
    improvement: float
    forgetting: float


class ForgettingEvaluator:
    """Computes forgetting vectors for many subsets of one cache.

    The selected run rows are copied once into a contiguous matrix; each call
    then only gathers the subset columns.
    """

    def __init__(self, cache: EvalCache, rows: Optional[Sequence[int]] = None,
                 eps_div: Optional[float] = None):
        if rows is None:
            rows = cache.rows_of_kind("simulated")
        rows = list(rows)
        if not rows:
            raise ConfigInvalid("cache holds no simulated runs")
        self.cache = cache
        self.rows = rows
        self.runs = tuple(cache.runs[r] for r in rows)
        self.eps_div = eps_div
        self._edits = np.ascontiguousarray(cache.run_edits[rows])

    def stats(self, subset):
        """(run edit sums, baseline edit sum, reference words) over ``subset``."""
        idx = self.cache.check_subset(subset)
        words = int(self.cache.ref_words[idx].sum())
        if words == 0:
            raise EmptySubset("subset has no reference words")
        return self._edits[:, idx].sum(axis=1), int(self.cache.baseline_edits[idx].sum()), words

    def values(self, subset) -> np.ndarray:
        run_sums, base_sum, words = self.stats(subset)
        eps = 1.0 / words if self.eps_div is None else self.eps_div
        before = base_sum / words
        after = run_sums / words
        return (after - before) / max(before, eps)

    def __call__(self, subset) -> ForgettingVector:
        idx = self.cache.check_subset(subset)
        return ForgettingVector(self.values(idx), idx, self.runs)


def forgetting_vector(cache: EvalCache, subset, rows=None,
                      eps_div: Optional[float] = None) -> ForgettingVector:
    """Forgetting score of every simulated run on ``subset``.

    ``eps_div`` defaults to one edit's worth of WER on the subset.
    """
    return ForgettingEvaluator(cache, rows, eps_div)(subset)


def full_forgetting(cache: EvalCache, rows=None, eps_div: Optional[float] = None) -> ForgettingVector:
    return forgetting_vector(cache, np.arange(cache.n_samples), rows, eps_div)


def outlier_rows(cache: EvalCache, threshold: float = OUTLIER_THRESHOLD) -> List[int]:
    rows = cache.rows_of_kind("simulated")
    full = full_forgetting(cache, rows)
    return [r for r, f in zip(rows, full.values) if f < threshold]


def target_rows(cache: EvalCache, exclude_outliers: bool = False,
                threshold: float = OUTLIER_THRESHOLD) -> List[int]:
    """Simulated rows the optimizer should match, optionally minus outliers."""
    rows = cache.rows_of_kind("simulated")
    if exclude_outliers:
        drop = set(outlier_rows(cache, threshold))
        rows = [r for r in rows if r not in drop]
    if not rows:
        raise ConfigInvalid("no simulated runs left to optimize against")
    return rows


def gather_if(val_cache: EvalCache, user_caches: Mapping[int, EvalCache]) -> List[IFRecord]:
    """One I-F record per simulated run.

    Improvement comes from the pseudo-user's own cache (its samples, before
    vs. after fine-tuning); forgetting from the full validation cache.
    """
    rows = val_cache.rows_of_kind("simulated")
    if not rows:
        raise ConfigInvalid("validation cache holds no simulated runs")
    full = full_forgetting(val_cache, rows)
    missing = {}
    records = []
    for r, forg in zip(rows, full.values):
        run = val_cache.runs[r]
        ucache = user_caches.get(run.user)
        if ucache is None or run not in ucache.runs:
            missing[str(run)] = ["<user data>"]
            continue
        everything = np.arange(ucache.n_samples)
        words = int(ucache.ref_words.sum())
        before = ucache.subset_wer(None, everything)
        after = ucache.subset_wer(run, everything)
        records.append(IFRecord(run, improvement_score(after, before, 1.0 / words), float(forg)))
    if missing:
        raise IncompleteRun(missing)
    return records


def summarize(values) -> tuple:
    """(mean, population std)."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


IF_COLUMNS = ["kind", "user", "hp", "improvement", "forgetting"]


def write_if_csv(path, records: Sequence[IFRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(IF_COLUMNS)
        for rec in records:
            out.writerow([rec.run.kind, rec.run.user, rec.run.hp,
                          repr(float(rec.improvement)), repr(float(rec.forgetting))])


def read_if_csv(path) -> List[IFRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [IFRecord(RunKey(row["kind"], int(row["user"]), int(row["hp"])),
                         float(row["improvement"]), float(row["forgetting"]))
                for row in csv.DictReader(fh)]
