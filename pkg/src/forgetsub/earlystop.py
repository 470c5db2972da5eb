"""Fine-tuning with forgetting-based early stopping, replayed over recorded
per-epoch predictions.

A trainer adapter supplies one frame per epoch: edit counts of the fine-tuned
model on every validation sample, and its WER on the user's own data. The
stopping rule only needs subset sums of those frames, so any subset of the
validation set can be evaluated against the same trajectory.

At most ``max_epochs`` epochs are trained. Training stops at the first epoch
whose forgetting score exceeds the threshold, and the weights from the epoch
before are returned (epoch 0 is the pre-trained model).
"""
from __future__ import annotations

import csv
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .datastore import EvalCache, iter_jsonl, write_jsonl
from .errors import DimensionMismatch, EmptySubset, MalformedRecord, TrajectoryTooShort
from .metrics import WerStat, improvement_score

THRESHOLD = "threshold"
MAX_EPOCHS = "max_epochs"


@dataclass(frozen=True)
class Trajectory:
    """``val_edits[w - 1]`` and ``user_wer[w - 1]`` describe the model after
    epoch ``w``; ``user_before`` is the pre-trained model on the user's data."""

    user: int
    val_edits: np.ndarray
    user_wer: tuple
    user_before: WerStat

    @property
    def epochs(self) -> int:
        return len(self.user_wer)


@dataclass(frozen=True)
class StopOutcome:
    epochs_trained: int
    final_forgetting_on_eval: float
    final_forgetting_on_full: float
    final_improvement: float
    stop_reason: str
    gammas: tuple = ()


@dataclass(frozen=True)
class CohortRow:
    user: int
    gamma: float
    outcome: StopOutcome


def _relative(edits, base: int, words: int):
    before = base / words
    return (edits / words - before) / max(before, 1.0 / words)


class _Replay:
    """Forgetting trajectory of one user on one evaluation subset."""

    def __init__(self, traj: Trajectory, idx: np.ndarray, cache: EvalCache, max_epochs: int):
        if traj.epochs < max_epochs:
            raise TrajectoryTooShort(f"user {traj.user}: {traj.epochs} epochs recorded, need {max_epochs}")
        if traj.val_edits.shape[1] != cache.n_samples:
            raise DimensionMismatch(f"user {traj.user}: frames cover {traj.val_edits.shape[1]} "
                                    f"samples, cache has {cache.n_samples}")
        words = int(cache.ref_words[idx].sum())
        if words == 0:
            raise EmptySubset("evaluation subset has no reference words")
        self.traj = traj
        self.cache = cache
        self.max_epochs = max_epochs
        sums = traj.val_edits[:max_epochs, idx].sum(axis=1)
        self.gammas = _relative(sums, int(cache.baseline_edits[idx].sum()), words)

    def stop(self, threshold: float) -> StopOutcome:
        over = np.flatnonzero(self.gammas > threshold)
        if over.size:
            epochs, reason = int(over[0]), THRESHOLD
        else:
            epochs, reason = self.max_epochs, MAX_EPOCHS
        evaluated = tuple(float(g) for g in self.gammas[:min(epochs + 1, self.max_epochs)])
        if epochs == 0:
            return StopOutcome(0, 0.0, 0.0, 0.0, reason, evaluated)
        traj, cache = self.traj, self.cache
        full = _relative(int(traj.val_edits[epochs - 1].sum()), int(cache.baseline_edits.sum()),
                         int(cache.ref_words.sum()))
        before, after = traj.user_before, traj.user_wer[epochs - 1]
        words = max(before.ref_words, 1)
        imp = improvement_score(after.edits / words, before.edits / words, 1.0 / words)
        return StopOutcome(epochs, float(self.gammas[epochs - 1]), float(full), float(imp),
                           reason, evaluated)


def fine_tune_early_stop(trajectory: Trajectory, eval_subset, cache: EvalCache,
                         threshold: float, max_epochs: int) -> StopOutcome:
    """Replay one fine-tuning run and apply the forgetting threshold.

    Forgetting at each epoch is the relative WER increase on ``eval_subset``
    over the baseline predictions on that same subset.

    Raises:
        TrajectoryTooShort: fewer than ``max_epochs`` frames.
        EmptySubset: the subset is empty or has no reference words.
    """
    idx = cache.check_subset(eval_subset)
    return _Replay(trajectory, idx, cache, max_epochs).stop(threshold)


def run_cohort(trajectories: Sequence[Trajectory], eval_subset, cache: EvalCache,
               thresholds: Iterable[float], max_epochs: int, workers: int = 1) -> List[CohortRow]:
    """Outcome for every (user, threshold), ordered by user then threshold."""
    idx = cache.check_subset(eval_subset)
    thresholds = sorted(float(t) for t in thresholds)

    def one(traj):
        replay = _Replay(traj, idx, cache, max_epochs)
        return [CohortRow(traj.user, t, replay.stop(t)) for t in thresholds]

    ordered = sorted(trajectories, key=lambda t: t.user)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(one, ordered))
    else:
        chunks = [one(t) for t in ordered]
    return [row for chunk in chunks for row in chunk]


# --- file formats ------------------------------------------------------------

def write_trajectories(path, trajectories: Sequence[Trajectory], baseline_edits) -> None:
    """One frame per line; epoch 0 carries the pre-trained model."""
    base = [int(x) for x in baseline_edits]

    def frames():
        for traj in sorted(trajectories, key=lambda t: t.user):
            yield {"user": traj.user, "epoch": 0, "val_edits": base,
                   "user_wer": {"edits": traj.user_before.edits,
                                "ref_words": traj.user_before.ref_words}}
            for w, (row, stat) in enumerate(zip(traj.val_edits, traj.user_wer), 1):
                yield {"user": traj.user, "epoch": w, "val_edits": [int(x) for x in row],
                       "user_wer": {"edits": stat.edits, "ref_words": stat.ref_words}}

    write_jsonl(path, frames())


def read_trajectories(path, n_samples: Optional[int] = None) -> List[Trajectory]:
    """Group frames by user and check epochs run contiguously from 0."""
    frames: Dict[int, Dict[int, tuple]] = defaultdict(dict)
    for line_no, obj in iter_jsonl(path):
        user, epoch = obj.get("user"), obj.get("epoch")
        edits, uw = obj.get("val_edits"), obj.get("user_wer")
        if not isinstance(user, int) or not isinstance(epoch, int) or epoch < 0:
            raise MalformedRecord(path, line_no, "need integer 'user' and non-negative 'epoch'")
        if not isinstance(edits, list) or not all(isinstance(e, int) and e >= 0 for e in edits):
            raise MalformedRecord(path, line_no, "'val_edits' must be a list of non-negative integers")
        if n_samples is not None and len(edits) != n_samples:
            raise MalformedRecord(path, line_no, f"frame covers {len(edits)} samples, expected {n_samples}")
        try:
            stat = WerStat(int(uw["edits"]), int(uw["ref_words"]))
        except (TypeError, KeyError, ValueError):
            raise MalformedRecord(path, line_no, "'user_wer' needs edits and ref_words") from None
        if epoch in frames[user]:
            raise MalformedRecord(path, line_no, f"duplicate frame for user {user} epoch {epoch}")
        frames[user][epoch] = (edits, stat, line_no)
    out = []
    for user in sorted(frames):
        by_epoch = frames[user]
        if sorted(by_epoch) != list(range(len(by_epoch))):
            raise MalformedRecord(path, 0, f"user {user}: epochs not contiguous from 0")
        widths = {len(e) for e, _, _ in by_epoch.values()}
        if len(widths) != 1:
            raise MalformedRecord(path, 0, f"user {user}: frames differ in sample count")
        epochs = range(1, len(by_epoch))
        val = np.array([by_epoch[w][0] for w in epochs], dtype=np.int64).reshape(len(epochs), widths.pop())
        out.append(Trajectory(user, val, tuple(by_epoch[w][1] for w in epochs), by_epoch[0][1]))
    return out


OUTCOME_COLUMNS = ["user", "gamma", "epochs_trained", "reason", "improvement", "forgetting_full"]


def write_outcomes_csv(path, rows: Sequence[CohortRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(OUTCOME_COLUMNS)
        for r in rows:
            o = r.outcome
            out.writerow([r.user, repr(r.gamma), o.epochs_trained, o.stop_reason,
                          repr(o.final_improvement), repr(o.final_forgetting_on_full)])


def read_outcomes_csv(path) -> List[CohortRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CohortRow(int(row["user"]), float(row["gamma"]),
                          StopOutcome(int(row["epochs_trained"]), float("nan"),
                                      float(row["forgetting_full"]), float(row["improvement"]),
                                      row["reason"]))
                for row in csv.DictReader(fh)]
