"""Ingestion of samples/predictions and the per-sample evaluation cache.

The cache stores word edit counts, not hypotheses. Every subset statistic the
optimizer needs is a sum over columns, so scoring a candidate subset costs
O(runs x subset size) and never touches text again.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import (
    CacheFormatError, DuplicateId, EmptySubset, IncompleteRun, IndexOutOfRange,
    MalformedRecord, UnknownSample,
)
from .metrics import Transcript, edit_distance, normalize

CACHE_FORMAT = "forgetsub-evalcache"
CACHE_VERSION = 1

RUN_KINDS = ("baseline", "simulated", "target")


@dataclass(frozen=True)
class Sample:
    id: str
    reference: Transcript

    @property
    def ref_words(self) -> int:
        return len(self.reference)


@dataclass(frozen=True)
class HyperParams:
    epochs: int
    learning_rate: float

    def __post_init__(self):
        if self.epochs <= 0 or self.learning_rate <= 0:
            raise ValueError(f"hyperparameters must be positive: {self}")


@dataclass(frozen=True)
class RunKey:
    """One set of predictions: the pre-trained baseline, a simulated
    fine-tune (pseudo-user, grid entry) or a target-user run."""

    kind: str
    user: Optional[int] = None
    hp: Optional[int] = None
    epoch: Optional[int] = None

    def __post_init__(self):
        if self.kind not in RUN_KINDS:
            raise ValueError(f"unknown run kind {self.kind!r}")
        if self.kind == "baseline":
            if (self.user, self.hp, self.epoch) != (None, None, None):
                raise ValueError("baseline run carries no user/hp/epoch")
        elif self.user is None:
            raise ValueError(f"{self.kind} run needs a user id")
        if self.kind == "simulated" and self.hp is None:
            raise ValueError("simulated run needs an hp id")
        if self.epoch is not None and self.epoch < 0:
            raise ValueError("epoch must be non-negative")

    def sort_key(self) -> Tuple:
        return (RUN_KINDS.index(self.kind),
                -1 if self.user is None else self.user,
                -1 if self.hp is None else self.hp,
                -1 if self.epoch is None else self.epoch)

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        for name in ("user", "hp", "epoch"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "RunKey":
        extra = set(obj) - {"kind", "user", "hp", "epoch"}
        if extra:
            raise ValueError(f"unexpected run fields {sorted(extra)}")
        for name in ("user", "hp", "epoch"):
            value = obj.get(name)
            if value is not None and (not isinstance(value, int) or isinstance(value, bool)):
                raise ValueError(f"run field {name!r} must be an integer")
        return cls(obj.get("kind"), obj.get("user"), obj.get("hp"), obj.get("epoch"))

    def __str__(self):
        parts = [self.kind]
        if self.user is not None:
            parts.append(f"u{self.user}")
        if self.hp is not None:
            parts.append(f"k{self.hp}")
        if self.epoch is not None:
            parts.append(f"e{self.epoch}")
        return "/".join(parts)


BASELINE = RunKey("baseline")

PredictionBatch = Dict[RunKey, Dict[str, Transcript]]


def iter_jsonl(path) -> Iterator[Tuple[int, dict]]:
    """Yield (line number, object) for every non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(path, line_no, f"invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise MalformedRecord(path, line_no, "record is not an object")
            yield line_no, obj


def write_jsonl(path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def _require_str(path, line_no, obj, key):
    value = obj.get(key)
    if not isinstance(value, str):
        raise MalformedRecord(path, line_no, f"field {key!r} must be a string")
    return value


def ingest_samples(path) -> List[Sample]:
    """Read ``{"id", "text"}`` records in file order, normalizing the text."""
    samples: List[Sample] = []
    seen = set()
    for line_no, obj in iter_jsonl(path):
        sid = _require_str(path, line_no, obj, "id")
        text = _require_str(path, line_no, obj, "text")
        if sid in seen:
            raise DuplicateId(f"{path}:{line_no}: duplicate sample id {sid!r}")
        seen.add(sid)
        samples.append(Sample(sid, normalize(text)))
    return samples


def ingest_predictions(path, samples: Sequence[Sample],
                       expected: Optional[Mapping[RunKey, Sequence[str]]] = None,
                       ) -> PredictionBatch:
    """Read prediction records and check every run is complete.

    By default each run must cover every sample. ``expected`` narrows that
    per run (pseudo-user runs only cover their own samples); runs not listed
    in it still need full coverage.

    Raises:
        MalformedRecord, UnknownSample, IncompleteRun
    """
    known = {s.id for s in samples}
    batch: PredictionBatch = {}
    for line_no, obj in iter_jsonl(path):
        run_obj = obj.get("run")
        if not isinstance(run_obj, dict):
            raise MalformedRecord(path, line_no, "field 'run' must be an object")
        try:
            run = RunKey.from_json(run_obj)
        except (ValueError, TypeError) as exc:
            raise MalformedRecord(path, line_no, f"bad run key: {exc}") from None
        sid = _require_str(path, line_no, obj, "sample_id")
        hyp = _require_str(path, line_no, obj, "hyp")
        if sid not in known:
            raise UnknownSample(f"{path}:{line_no}: unknown sample id {sid!r}")
        per_run = batch.setdefault(run, {})
        if sid in per_run:
            raise MalformedRecord(path, line_no, f"duplicate prediction for {sid!r} in run {run}")
        per_run[sid] = normalize(hyp)

    order = [s.id for s in samples]
    missing = {}
    for run in sorted(batch, key=RunKey.sort_key):
        want = order if expected is None or run not in expected else expected[run]
        gaps = [sid for sid in want if sid not in batch[run]]
        if gaps:
            missing[str(run)] = gaps
    for run in sorted(set(expected or ()) - set(batch), key=RunKey.sort_key):
        missing[str(run)] = list(expected[run])
    if missing:
        raise IncompleteRun(missing)
    return batch


@dataclass
class EvalCache:
    """Edit counts for every (run, sample) cell plus the baseline row.

    ``run_edits[r, i]`` is the word edit distance of run ``runs[r]`` on sample
    ``sample_ids[i]``. Arrays are int64 and treated as read-only.
    """

    sample_ids: List[str]
    ref_words: np.ndarray
    baseline_edits: np.ndarray
    runs: List[RunKey]
    run_edits: np.ndarray
    _row_of: Dict[RunKey, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self.ref_words = np.asarray(self.ref_words, dtype=np.int64)
        self.baseline_edits = np.asarray(self.baseline_edits, dtype=np.int64)
        n = len(self.sample_ids)
        self.run_edits = np.asarray(self.run_edits, dtype=np.int64).reshape(len(self.runs), n)
        if len(set(self.sample_ids)) != n:
            raise CacheFormatError("duplicate sample ids in cache")
        if self.ref_words.shape != (n,) or self.baseline_edits.shape != (n,):
            raise CacheFormatError("per-sample arrays do not match sample count")
        if len(set(self.runs)) != len(self.runs) or BASELINE in self.runs:
            raise CacheFormatError("run index must be unique and exclude the baseline")
        if (self.ref_words < 0).any() or (self.baseline_edits < 0).any() or (self.run_edits < 0).any():
            raise CacheFormatError("negative counts in cache")
        if n and self.ref_words.sum() < 1:
            raise CacheFormatError("cache needs at least one sample with reference words")
        for arr in (self.ref_words, self.baseline_edits, self.run_edits):
            arr.flags.writeable = False
        self._row_of = {run: r for r, run in enumerate(self.runs)}

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def row(self, run: RunKey) -> int:
        return self._row_of[run]

    def rows_of_kind(self, kind: str) -> List[int]:
        return [r for r, run in enumerate(self.runs) if run.kind == kind]

    def edits_for(self, run: Union[RunKey, int, None]) -> np.ndarray:
        """Per-sample edits for ``run``: a RunKey, a row number, or None/BASELINE."""
        if run is None or run == BASELINE:
            return self.baseline_edits
        if isinstance(run, RunKey):
            return self.run_edits[self._row_of[run]]
        return self.run_edits[run]

    def check_subset(self, subset) -> np.ndarray:
        return check_subset(subset, self.n_samples)

    def subset_wer(self, run, subset) -> float:
        idx = self.check_subset(subset)
        words = int(self.ref_words[idx].sum())
        if words == 0:
            raise EmptySubset("subset has no reference words")
        return int(self.edits_for(run)[idx].sum()) / words

    def to_json(self) -> dict:
        return {
            "format": CACHE_FORMAT,
            "version": CACHE_VERSION,
            "sample_ids": list(self.sample_ids),
            "ref_words": self.ref_words.tolist(),
            "baseline_edits": self.baseline_edits.tolist(),
            "runs": [run.to_json() for run in self.runs],
            "run_edits": self.run_edits.tolist(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "EvalCache":
        if obj.get("format") != CACHE_FORMAT:
            raise CacheFormatError("not an evaluation cache")
        if obj.get("version") != CACHE_VERSION:
            raise CacheFormatError(f"unsupported cache version {obj.get('version')!r}")
        try:
            runs = [RunKey.from_json(r) for r in obj["runs"]]
            return cls(list(obj["sample_ids"]), obj["ref_words"], obj["baseline_edits"],
                       runs, np.array(obj["run_edits"], dtype=np.int64).reshape(len(runs), -1)
                       if runs else np.zeros((0, len(obj["sample_ids"])), dtype=np.int64))
        except (KeyError, ValueError, TypeError) as exc:
            raise CacheFormatError(f"corrupt cache: {exc}") from None

    def save(self, path) -> None:
        text = json.dumps(self.to_json(), separators=(",", ":"))
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalCache":
        try:
            obj = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CacheFormatError(f"{path}: invalid JSON ({exc.msg})") from None
        return cls.from_json(obj)


def check_subset(subset, n_samples: int) -> np.ndarray:
    """Validate a subset of sample indices and return it as an int array.

    Raises:
        EmptySubset: no indices.
        IndexOutOfRange: an index outside [0, n_samples) or a repeated index.
    """
    idx = np.asarray(list(subset) if not isinstance(subset, np.ndarray) else subset,
                     dtype=np.int64).ravel()
    if idx.size == 0:
        raise EmptySubset("empty subset")
    if idx.min() < 0 or idx.max() >= n_samples:
        raise IndexOutOfRange(f"subset index outside [0, {n_samples})")
    if np.unique(idx).size != idx.size:
        raise IndexOutOfRange("subset indices must be unique")
    return idx


def subset_wer(cache: EvalCache, run, subset) -> float:
    """Pooled WER of ``run`` (or the baseline) over the selected samples."""
    return cache.subset_wer(run, subset)


def _row_distances(args):
    refs, hyps = args
    return [edit_distance(r, h) for r, h in zip(refs, hyps)]


def build_cache(samples: Sequence[Sample], baseline: Mapping[str, Transcript],
                runs: Mapping[RunKey, Mapping[str, Transcript]],
                workers: int = 1) -> EvalCache:
    """Score every run against the references.

    Run rows are ordered by RunKey, samples by the given sample order, so the
    result does not depend on file line order or on ``workers``.
    """
    refs = [s.reference for s in samples]
    order = [s.id for s in samples]
    run_keys = sorted((r for r in runs if r != BASELINE), key=RunKey.sort_key)
    missing = {}
    for run, preds in [(BASELINE, baseline)] + [(r, runs[r]) for r in run_keys]:
        gaps = [sid for sid in order if sid not in preds]
        if gaps:
            missing[str(run)] = gaps
    if missing:
        raise IncompleteRun(missing)

    jobs = [(refs, [baseline[sid] for sid in order])]
    jobs += [(refs, [runs[r][sid] for sid in order]) for r in run_keys]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_row_distances, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    else:
        rows = [_row_distances(job) for job in jobs]
    return EvalCache(
        sample_ids=order,
        ref_words=[len(r) for r in refs],
        baseline_edits=rows[0],
        runs=run_keys,
        run_edits=np.array(rows[1:], dtype=np.int64).reshape(len(run_keys), len(order)),
    )


def cache_from_files(samples_path, predictions_path, workers: int = 1) -> EvalCache:
    samples = ingest_samples(samples_path)
    batch = ingest_predictions(predictions_path, samples)
    if BASELINE not in batch:
        raise IncompleteRun({str(BASELINE): [s.id for s in samples]})
    baseline = batch.pop(BASELINE)
    return build_cache(samples, baseline, batch, workers=workers)


def default_workers() -> int:
    return os.cpu_count() or 1


def user_caches_from_files(samples_path, predictions_path, users, workers: int = 1) -> dict:
    """Per-user caches over each user's own samples.

    ``users`` maps user id to its sample ids; simulated runs of a user only
    need predictions on that user's samples, the baseline needs all of them.
    """
    samples = ingest_samples(samples_path)
    by_id = {s.id: s for s in samples}
    # first pass only collects run keys, so each user run can be checked against its own samples
    expected = {}
    for _, obj in iter_jsonl(predictions_path):
        run = obj.get("run")
        if isinstance(run, dict) and run.get("kind") == "simulated" and isinstance(run.get("user"), int):
            try:
                key = RunKey.from_json(run)
            except (ValueError, TypeError):
                continue
            if key.user in users:
                expected[key] = list(users[key.user])
    batch = ingest_predictions(predictions_path, samples, expected)
    if BASELINE not in batch:
        raise IncompleteRun({str(BASELINE): [s.id for s in samples]})
    out = {}
    for uid in sorted(users):
        ids = list(users[uid])
        unknown = [sid for sid in ids if sid not in by_id]
        if unknown:
            raise UnknownSample(f"user {uid}: unknown sample ids {unknown[:5]}")
        runs = {r: preds for r, preds in batch.items() if r.kind == "simulated" and r.user == uid}
        out[uid] = build_cache([by_id[s] for s in ids], batch[BASELINE], runs, workers=workers)
    return out
