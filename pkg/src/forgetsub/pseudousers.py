"""Pseudo-user datasets carved out of the simulated fine-tuning pool.

Pool samples are ranked against externally supplied speaker centroids by
cosine similarity; each centroid keeps its top-n neighbours, and several
random fixed-size sets are then drawn per centroid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .datastore import iter_jsonl, write_jsonl
from .errors import DimensionMismatch, EmptyPool, InsufficientSamples, MalformedRecord


@dataclass(frozen=True)
class PseudoUserSet:
    user_id: int
    sample_ids: Tuple[str, ...]


def read_embeddings(path) -> Tuple[List[str], np.ndarray]:
    """Load ``{"sample_id", "vec"}`` records as (ids, matrix)."""
    ids, rows = [], []
    for line_no, obj in iter_jsonl(path):
        sid = obj.get("sample_id")
        vec = obj.get("vec")
        if not isinstance(sid, str) or not isinstance(vec, list) or not vec:
            raise MalformedRecord(path, line_no, "need 'sample_id' string and non-empty 'vec' list")
        if rows and len(vec) != len(rows[0]):
            raise DimensionMismatch(f"{path}:{line_no}: dimension {len(vec)} != {len(rows[0])}")
        try:
            row = np.array(vec, dtype=np.float64)
        except (TypeError, ValueError):
            raise MalformedRecord(path, line_no, "'vec' must hold numbers") from None
        if not np.all(np.isfinite(row)) or not np.any(row):
            raise MalformedRecord(path, line_no, "vector must be finite with non-zero norm")
        ids.append(sid)
        rows.append(row)
    if len(set(ids)) != len(ids):
        raise MalformedRecord(path, 0, "duplicate sample ids")
    mat = np.vstack(rows) if rows else np.zeros((0, 0))
    return ids, mat


def write_embeddings(path, ids: Sequence[str], matrix: np.ndarray) -> None:
    write_jsonl(path, ({"sample_id": sid, "vec": [float(x) for x in row]}
                       for sid, row in zip(ids, matrix)))


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    return mat / np.linalg.norm(mat, axis=1, keepdims=True)


def assign_top_n(pool_ids: Sequence[str], pool: np.ndarray, centroids: np.ndarray,
                 n: int) -> List[List[str]]:
    """For each centroid, the ``n`` most cosine-similar pool samples.

    Ties are broken by sample id. A sample may be listed under several
    centroids.
    """
    pool = np.atleast_2d(np.asarray(pool, dtype=np.float64))
    centroids = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    if len(pool_ids) == 0 or pool.size == 0:
        raise EmptyPool("no pool embeddings")
    if pool.shape[1] != centroids.shape[1]:
        raise DimensionMismatch(f"pool dim {pool.shape[1]} != centroid dim {centroids.shape[1]}")
    if len(pool_ids) != pool.shape[0]:
        raise DimensionMismatch("id count does not match pool rows")
    if not 1 <= n <= len(pool_ids):
        raise InsufficientSamples(f"n={n} outside [1, {len(pool_ids)}]")
    sims = _unit_rows(centroids) @ _unit_rows(pool).T
    # lexsort: last key is primary
    id_rank = np.argsort(np.argsort(np.array(pool_ids, dtype=object), kind="stable"), kind="stable")
    out = []
    for row in sims:
        order = np.lexsort((id_rank, -row))
        out.append([pool_ids[i] for i in order[:n]])
    return out


def repeated_subsample(per_centroid: Sequence[Sequence[str]], sets_per_centroid: int,
                       set_size: int, seed: int) -> List[PseudoUserSet]:
    """Draw ``sets_per_centroid`` random sets of ``set_size`` ids per centroid.

    Each set is sampled without replacement; sets may overlap. Randomness for
    set j of centroid c comes from its own stream keyed on (seed, c, j).
    """
    if sets_per_centroid < 1 or set_size < 1:
        raise InsufficientSamples("need at least one set of at least one sample")
    users = []
    for c, ids in enumerate(per_centroid):
        if len(ids) < set_size:
            raise InsufficientSamples(f"centroid {c} has {len(ids)} samples, need {set_size}")
        for j in range(sets_per_centroid):
            rng = np.random.default_rng([seed, c, j])
            pick = rng.choice(len(ids), size=set_size, replace=False)
            users.append(PseudoUserSet(c * sets_per_centroid + j, tuple(ids[i] for i in pick)))
    return users


def build_pseudo_users(pool_ids, pool, centroids, top_n: int, sets_per_centroid: int,
                       set_size: int, seed: int) -> List[PseudoUserSet]:
    lists = assign_top_n(pool_ids, pool, centroids, top_n)
    return repeated_subsample(lists, sets_per_centroid, set_size, seed)


def write_pseudo_users(path, users: Sequence[PseudoUserSet]) -> None:
    write_jsonl(path, ({"user_id": u.user_id, "sample_ids": list(u.sample_ids)} for u in users))


def read_pseudo_users(path) -> List[PseudoUserSet]:
    users = []
    for line_no, obj in iter_jsonl(path):
        uid = obj.get("user_id")
        ids = obj.get("sample_ids")
        if not isinstance(uid, int) or not isinstance(ids, list) \
                or not all(isinstance(s, str) for s in ids):
            raise MalformedRecord(path, line_no, "need integer 'user_id' and list 'sample_ids'")
        if len(set(ids)) != len(ids):
            raise MalformedRecord(path, line_no, "duplicate sample ids within a set")
        users.append(PseudoUserSet(uid, tuple(ids)))
    return users
