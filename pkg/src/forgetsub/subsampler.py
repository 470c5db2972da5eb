"""Genetic search for a validation subset whose forgetting vector tracks the
full set, plus the random and all-correct reference subsets.

Genome: an ordered list of ``m`` unique sample indices. Each generation keeps
the best ``parents`` candidates, breeds ``offspring`` by half/half crossover
of neighbouring parents, repairs duplicate genes, mutates a fixed share of
genes and carries the parents over unchanged (elitist).
"""
from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .characteristics import ForgettingEvaluator, ForgettingVector
from .datastore import EvalCache
from .errors import (
    ConfigInvalid, DegenerateInput, DimensionMismatch, EmptySubset,
    InsufficientCorrectSamples,
)


class UtilityKind(str, enum.Enum):
    NEG_MSE = "neg_mse"
    NEG_MAE = "neg_mae"
    COSINE = "cosine"
    PEARSON = "pearson"
    NEG_CANBERRA = "neg_canberra"

    @classmethod
    def parse(cls, name) -> "UtilityKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        key = _ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError:
            choices = sorted({k.value for k in cls} | set(_ALIASES))
            raise ConfigInvalid(f"unknown utility {name!r}; choose from {', '.join(choices)}") from None


_ALIASES = {
    "mse": "neg_mse", "mae": "neg_mae", "cos": "cosine", "corr": "pearson",
    "canb": "neg_canberra", "canberra": "neg_canberra",
}


def utility(kind, full, sub) -> float:
    """Similarity of two forgetting vectors; larger is better for every kind.

    Raises:
        DimensionMismatch: vectors differ in length or have fewer than 2 entries.
        DegenerateInput: zero vector (cosine) or constant vector (Pearson).
    """
    kind = UtilityKind.parse(kind)
    x = np.asarray(full, dtype=np.float64)
    y = np.asarray(sub, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise DimensionMismatch(f"need equal-length vectors of length >= 2, got {x.shape} and {y.shape}")
    if kind is UtilityKind.NEG_MSE:
        return -float(np.mean((x - y) ** 2))
    if kind is UtilityKind.NEG_MAE:
        return -float(np.mean(np.abs(x - y)))
    if kind is UtilityKind.COSINE:
        den = math.sqrt(float(x @ x)) * math.sqrt(float(y @ y))
        if den == 0.0:
            raise DegenerateInput("cosine similarity of a zero vector")
        return float(x @ y) / den
    if kind is UtilityKind.PEARSON:
        xc, yc = x - x.mean(), y - y.mean()
        den = math.sqrt(float(xc @ xc)) * math.sqrt(float(yc @ yc))
        if den == 0.0:
            raise DegenerateInput("correlation with a constant vector")
        return float(xc @ yc) / den
    # Canberra: 0/0 terms contribute nothing
    den = np.abs(x) + np.abs(y)
    num = np.abs(x - y)
    nz = den > 0
    return -float(np.sum(num[nz] / den[nz]))


@dataclass
class GAConfig:
    population: int = 20
    genes: int = 100
    parents: int = 10
    offspring: int = 10
    mutation_rate: float = 0.10
    generations: int = 650
    seed: int = 0
    utility: UtilityKind = UtilityKind.NEG_CANBERRA
    guard: bool = True

    def __post_init__(self):
        self.utility = UtilityKind.parse(self.utility)

    def validate(self, n_samples: int) -> None:
        if self.parents < 1 or self.offspring < 0:
            raise ConfigInvalid("need at least one parent and non-negative offspring")
        if self.parents + self.offspring != self.population:
            raise ConfigInvalid(f"parents + offspring ({self.parents}+{self.offspring}) "
                                f"!= population ({self.population})")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ConfigInvalid("mutation_rate must lie in [0, 1]")
        if self.generations < 0:
            raise ConfigInvalid("generations must be non-negative")
        if self.genes < 1:
            raise EmptySubset("subset size must be at least 1")
        if self.genes > n_samples:
            raise ConfigInvalid(f"subset size {self.genes} exceeds {n_samples} samples")

    def to_json(self) -> dict:
        out = asdict(self)
        out["utility"] = self.utility.value
        return out


class FitnessFunction:
    """Utility of a candidate's forgetting vector against the full-set vector,
    memoized on the candidate's gene set."""

    def __init__(self, cache: EvalCache, full_vector: ForgettingVector, kind,
                 guard: bool = True, eps_div: Optional[float] = None):
        self.kind = UtilityKind.parse(kind)
        self.guard = guard
        self.full = np.asarray(full_vector.values, dtype=np.float64)
        rows = [cache.row(run) for run in full_vector.runs]
        self.evaluator = ForgettingEvaluator(cache, rows, eps_div)
        self.memo: Dict[bytes, float] = {}

    def __call__(self, candidate) -> float:
        idx = np.sort(np.asarray(candidate, dtype=np.int64))
        key = idx.tobytes()
        hit = self.memo.get(key)
        if hit is None:
            hit = self.memo[key] = self._score(idx)
        return hit

    def _score(self, idx) -> float:
        run_sums, base_sum, words = self.evaluator.stats(idx)
        if not self.guard and base_sum == 0:
            return -math.inf
        try:
            return utility(self.kind, self.full, self.evaluator.values(idx))
        except DegenerateInput:
            return -math.inf


def fitness(cache: EvalCache, full_vector: ForgettingVector, candidate, kind,
            guard: bool = True, eps_div: Optional[float] = None) -> float:
    return FitnessFunction(cache, full_vector, kind, guard, eps_div)(candidate)


@dataclass
class Candidate:
    serial: int
    genes: np.ndarray
    fitness: Optional[float] = None


@dataclass
class GAResult:
    indices: np.ndarray
    fitness: float
    history: List[float]
    config: GAConfig
    evaluations: int = 0
    extra: dict = field(default_factory=dict)


def _draw_unused(rng, n: int, taken: set) -> int:
    # rejection sampling is uniform over the unused indices
    while True:
        v = int(rng.integers(n))
        if v not in taken:
            return v


def crossover(head_parent: np.ndarray, tail_parent: np.ndarray, n: int, rng) -> np.ndarray:
    """First ceil(m/2) genes of one parent, last floor(m/2) of the other;
    duplicates are redrawn uniformly from indices not in the child."""
    m = len(head_parent)
    cut = (m + 1) // 2
    child = np.concatenate([head_parent[:cut], tail_parent[cut:]]).astype(np.int64)
    taken = set(child[:cut].tolist())
    for pos in range(cut, m):
        gene = int(child[pos])
        if gene in taken:
            gene = _draw_unused(rng, n, taken | set(child[pos:].tolist()))
            child[pos] = gene
        taken.add(gene)
    return child


def mutation_count(rate: float, m: int) -> int:
    # tolerance keeps e.g. 0.1 * 30 from rounding up to 4
    return min(m, math.ceil(rate * m - 1e-9))


def mutate(child: np.ndarray, n: int, rate: float, rng) -> np.ndarray:
    m = len(child)
    count = mutation_count(rate, m) if n > m else 0
    if count <= 0:
        return child
    out = child.copy()
    taken = set(out.tolist())
    for pos in rng.choice(m, size=count, replace=False):
        new = _draw_unused(rng, n, taken)
        taken.discard(int(out[pos]))
        taken.add(new)
        out[pos] = new
    return out


DUPLICATE_RETRIES = 10


def _key(genes) -> bytes:
    return np.sort(np.asarray(genes, dtype=np.int64)).tobytes()


def select_parents(ranked: Sequence[Candidate], k: int) -> List[Candidate]:
    """Top ``k`` candidates with distinct gene sets; repeats fill any shortfall.

    Without this, copies of one strong subset crowd out the other parents and
    the search collapses onto a single neighbourhood.
    """
    seen, first, repeats = set(), [], []
    for c in ranked:
        key = _key(c.genes)
        (repeats if key in seen else first).append(c)
        seen.add(key)
    return (first + repeats)[:k]


def evolve(cache: EvalCache, full_vector: ForgettingVector, config: GAConfig,
           eps_div: Optional[float] = None, workers: int = 1) -> GAResult:
    """Run the genetic search and return the best subset found.

    Every random draw for candidate ``s`` comes from a stream seeded with
    ``(config.seed, s)``, so results do not depend on ``workers``.
    """
    n = cache.n_samples
    config.validate(n)
    m = config.genes
    fit = FitnessFunction(cache, full_vector, config.utility, config.guard, eps_div)

    if m == n:
        only = np.arange(n, dtype=np.int64)
        f = fit(only)
        return GAResult(only, f, [f], config, evaluations=1)

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def score(cands):
        todo = [c for c in cands if c.fitness is None]
        vals = list(pool.map(fit, [c.genes for c in todo])) if pool else [fit(c.genes) for c in todo]
        for c, v in zip(todo, vals):
            c.fitness = v

    def rank(cands):
        return sorted(cands, key=lambda c: (-c.fitness, c.serial))

    serial = 0
    population = []
    for _ in range(config.population):
        rng = np.random.default_rng([config.seed, serial])
        population.append(Candidate(serial, rng.choice(n, size=m, replace=False).astype(np.int64)))
        serial += 1
    try:
        score(population)
        population = rank(population)
        best = population[0]
        history = [best.fitness]
        for _ in range(config.generations):
            parents = select_parents(population, config.parents)
            children = []
            present = {_key(c.genes) for c in parents}
            for j in range(config.offspring):
                rng = np.random.default_rng([config.seed, serial])
                a = parents[j % len(parents)]
                b = parents[(j + 1) % len(parents)]
                child = crossover(a.genes, b.genes, n, rng)
                child = mutate(child, n, config.mutation_rate, rng)
                # a copy of a current member adds nothing; mutate again (bounded)
                for _ in range(DUPLICATE_RETRIES):
                    if _key(child) not in present:
                        break
                    child = mutate(child, n, config.mutation_rate, rng)
                present.add(_key(child))
                children.append(Candidate(serial, child))
                serial += 1
            score(children)
            population = rank(parents + children)
            if population[0].fitness > best.fitness:
                best = population[0]
            history.append(best.fitness)
    finally:
        if pool:
            pool.shutdown()
    return GAResult(best.genes.copy(), best.fitness, history, config, evaluations=len(fit.memo))


def random_subset(m: int, n: int, seed: int) -> np.ndarray:
    """Uniform m-subset of range(n), without replacement."""
    if m < 1:
        raise EmptySubset("subset size must be at least 1")
    if m > n:
        raise ConfigInvalid(f"subset size {m} exceeds {n} samples")
    return np.random.default_rng(seed).choice(n, size=m, replace=False).astype(np.int64)


def all_correct_subset(cache: EvalCache, m: int, seed: int) -> np.ndarray:
    """Uniform m-subset of the samples the baseline transcribes perfectly.

    Samples with an empty reference are skipped: they carry no words to score.
    """
    if m < 1:
        raise EmptySubset("subset size must be at least 1")
    pool = np.flatnonzero((cache.baseline_edits == 0) & (cache.ref_words > 0))
    if pool.size < m:
        raise InsufficientCorrectSamples(f"only {pool.size} error-free samples, need {m}")
    return np.random.default_rng(seed).choice(pool, size=m, replace=False).astype(np.int64)


def result_record(cache: EvalCache, indices, fitness_value: float, kind, config: dict,
                  history=None) -> dict:
    """The on-disk result layout shared by optimized and baseline subsets."""
    idx = [int(i) for i in indices]
    return {
        "indices": idx,
        "sample_ids": [cache.sample_ids[i] for i in idx],
        "utility_kind": UtilityKind.parse(kind).value,
        "fitness": _json_float(fitness_value),
        "config": config,
        "history": [_json_float(h) for h in (history or [])],
    }


def _json_float(x: float):
    # JSON has no infinities; degenerate candidates are written as null
    return None if not math.isfinite(x) else float(x)
