"""Synthetic validation/fine-tuning worlds with a known error process.

No acoustic model is involved. Each validation word gets a fixed difficulty
``d ~ U(0, 1)``; a model state with error probability ``p`` for that word's
sample gets the word wrong iff ``d < p``. Fine-tuning raises ``p`` for sample
``i`` by ``severity * scale * susceptibility_i * progress``, so

* every run shares the baseline's word difficulties, which keeps forgetting
  curves monotone in epoch and lets a subset's response generalize from one
  user to another, and
* errors are realized as substitutions with tokens outside the reference
  vocabulary, while reference tokens are distinct within an utterance; under
  those two conditions the word edit distance equals the substitution count,
  so the generator is an exact oracle for the metrics layer.

A small share of words can be given a fresh per-run difficulty
(``run_noise``) so runs are not perfectly nested.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import NormalDist
from typing import Dict, List, Optional, Tuple

import numpy as np

from .datastore import BASELINE, EvalCache, HyperParams, RunKey, Sample, write_jsonl
from .earlystop import Trajectory, write_trajectories
from .errors import ConfigInvalid
from .metrics import WerStat
from .pseudousers import PseudoUserSet, build_pseudo_users, write_embeddings, write_pseudo_users

DEFAULT_GRID = (HyperParams(8, 1e-5), HyperParams(16, 1e-5), HyperParams(16, 5e-6), HyperParams(32, 5e-6))

# substream ids for np.random.default_rng([seed, stream, ...])
_S_VAL, _S_POOL, _S_USERS, _S_TARGETS, _S_EMBED, _S_NOISE, _S_TOKENS, _S_TARGET_DATA = range(8)


@dataclass
class SynthConfig:
    vocab_size: int = 5000
    utterance_length: Tuple[int, int] = (4, 20)
    num_val_samples: int = 2000
    baseline_wer_target: float = 0.0943
    # per-sample baseline error probability ~ Beta with this concentration
    baseline_concentration: float = 0.5
    num_users: int = 24
    num_centroids: int = 4
    top_n: int = 150
    set_size: int = 24
    pool_size: int = 1000
    pool_wer_target: float = 0.0855
    embedding_dim: int = 32
    embedding_noise: float = 0.6
    hp_grid: Tuple[HyperParams, ...] = DEFAULT_GRID
    max_epochs: int = 15
    susceptibility_spread: float = 0.25
    severity_mean: float = 0.004
    user_severity_spread: float = 0.95
    improvement_mean: float = 0.4
    num_targets: int = 20
    target_severity_scale: float = 2.0
    target_severity_spread: float = 0.6
    target_samples: int = 100
    target_wer: float = 0.463
    run_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.utterance_length = tuple(int(x) for x in self.utterance_length)
        self.hp_grid = tuple(h if isinstance(h, HyperParams) else HyperParams(*h) for h in self.hp_grid)

    def validate(self) -> None:
        lo, hi = self.utterance_length
        positive = dict(vocab_size=self.vocab_size, num_val_samples=self.num_val_samples,
                        num_users=self.num_users, num_centroids=self.num_centroids,
                        top_n=self.top_n, set_size=self.set_size, pool_size=self.pool_size,
                        embedding_dim=self.embedding_dim, max_epochs=self.max_epochs,
                        num_targets=self.num_targets, target_samples=self.target_samples,
                        baseline_concentration=self.baseline_concentration)
        bad = [k for k, v in positive.items() if not v > 0]
        if bad:
            raise ConfigInvalid(f"must be positive: {', '.join(bad)}")
        if not 1 <= lo <= hi <= self.vocab_size:
            raise ConfigInvalid("utterance_length must satisfy 1 <= min <= max <= vocab_size")
        for name in ("baseline_wer_target", "pool_wer_target", "target_wer"):
            if not 0 < getattr(self, name) < 1:
                raise ConfigInvalid(f"{name} must lie in (0, 1)")
        if not 0 <= self.susceptibility_spread < 0.5:
            raise ConfigInvalid("susceptibility_spread is a std of a [0, 1] variable; need < 0.5")
        if not 0 <= self.run_noise <= 1:
            raise ConfigInvalid("run_noise must lie in [0, 1]")
        if self.num_users % self.num_centroids:
            raise ConfigInvalid("num_users must be a multiple of num_centroids")
        if self.top_n > self.pool_size or self.set_size > self.top_n:
            raise ConfigInvalid("need set_size <= top_n <= pool_size")
        if not self.hp_grid:
            raise ConfigInvalid("empty hyperparameter grid")
        if self.severity_mean < 0 or self.target_severity_scale < 0:
            raise ConfigInvalid("severities must be non-negative")

    @property
    def sets_per_centroid(self) -> int:
        return self.num_users // self.num_centroids

    def to_json(self) -> dict:
        out = asdict(self)
        out["utterance_length"] = list(self.utterance_length)
        out["hp_grid"] = [[h.epochs, h.learning_rate] for h in self.hp_grid]
        return out

    @classmethod
    def from_mapping(cls, data: dict) -> "SynthConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(data) - known
        if extra:
            raise ConfigInvalid(f"unknown synth settings: {', '.join(sorted(extra))}")
        return cls(**data)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, *keys])


def _stratified_normal(rng, n: int) -> np.ndarray:
    """Normal quantiles at (k + 0.5)/n in random order: low-variance stand-in for n draws."""
    nd = NormalDist()
    z = np.array([nd.inv_cdf((k + 0.5) / n) for k in range(n)])
    return rng.permutation(z)


@dataclass
class Corpus:
    """Utterances as flat word arrays; sample ``i`` owns ``words[offsets[i]:offsets[i+1]]``."""

    ids: List[str]
    words: np.ndarray       # vocabulary index of every word
    offsets: np.ndarray
    p0: np.ndarray          # per-sample baseline error probability
    difficulty: np.ndarray  # per-word difficulty in [0, 1)

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.offsets)

    def word_sample(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.ids)), self.lengths)

    def counts(self, mask: np.ndarray) -> np.ndarray:
        """Per-sample number of True entries of a per-word mask."""
        return np.add.reduceat(mask.astype(np.int64), self.offsets[:-1]) if len(mask) else \
            np.zeros(len(self.ids), dtype=np.int64)

    def text(self, i: int) -> str:
        return " ".join(f"w{w}" for w in self.words[self.offsets[i]:self.offsets[i + 1]])

    def hypothesis(self, i: int, mask: np.ndarray, fill: np.ndarray) -> str:
        lo, hi = self.offsets[i], self.offsets[i + 1]
        return " ".join(f"x{f}" if m else f"w{w}"
                        for w, m, f in zip(self.words[lo:hi], mask[lo:hi], fill[lo:hi]))

    def samples(self) -> List[Sample]:
        return [Sample(sid, tuple(self.text(i).split())) for i, sid in enumerate(self.ids)]


def _make_corpus(rng, prefix: str, n: int, cfg: SynthConfig, wer_target: float) -> Corpus:
    lo, hi = cfg.utterance_length
    lengths = rng.integers(lo, hi + 1, n)
    words = np.concatenate([rng.choice(cfg.vocab_size, size=L, replace=False) for L in lengths])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    p0 = rng.beta(cfg.baseline_concentration,
                  cfg.baseline_concentration * (1 - wer_target) / wer_target, n)
    difficulty = rng.random(len(words))
    return Corpus([f"{prefix}{i:05d}" for i in range(n)], words, offsets, p0, difficulty)


@dataclass
class World:
    config: SynthConfig
    val: Corpus
    susceptibility: np.ndarray
    pool: Corpus
    pool_embeddings: np.ndarray
    centroids: np.ndarray
    pseudo_users: List[PseudoUserSet]
    user_severity: np.ndarray
    user_improvement: np.ndarray
    target_severity: np.ndarray
    runs: List[RunKey] = field(default_factory=list)
    _target_data: List[Tuple[WerStat, Tuple[WerStat, ...]]] = field(default_factory=list)

    # --- error process -------------------------------------------------------

    def hp_scale(self) -> np.ndarray:
        prod = np.array([h.epochs * h.learning_rate for h in self.config.hp_grid])
        return prod / prod.max()

    def _val_mask(self, p: np.ndarray, noise_key: Tuple[int, ...]) -> np.ndarray:
        cfg = self.config
        per_word = np.clip(p, 0.0, 1.0)[self.val.word_sample()]
        d = self.val.difficulty
        if cfg.run_noise > 0:
            rng = _rng(cfg.seed, _S_NOISE, *noise_key)
            fresh = rng.random(len(d)) < cfg.run_noise
            d = np.where(fresh, rng.random(len(d)), d)
        return d < per_word

    def baseline_mask(self) -> np.ndarray:
        return self.val.difficulty < self.val.p0[self.val.word_sample()]

    def run_mask(self, run: RunKey) -> np.ndarray:
        """Per-word error mask of a simulated run or a target epoch on the validation set."""
        cfg = self.config
        if run.kind == "simulated":
            shift = self.user_severity[run.user] * self.hp_scale()[run.hp]
            key = (0, run.user, run.hp)
        elif run.kind == "target":
            shift = self.target_severity[run.user] * run.epoch / cfg.max_epochs
            key = (1, run.user, run.epoch)
        else:
            return self.baseline_mask()
        return self._val_mask(self.val.p0 + shift * self.susceptibility, key)

    def pool_run_mask(self, run: RunKey) -> np.ndarray:
        """Error mask on the pool after a simulated fine-tune: the user's own
        samples lose errors, the rest is unchanged."""
        factor = np.ones(len(self.pool.ids))
        own = np.isin(self.pool.ids, self.pseudo_users[run.user].sample_ids)
        gain = np.clip(self.user_improvement[run.user] * self.hp_scale()[run.hp], 0.0, 1.0)
        factor[own] = 1.0 - gain
        return self.pool.difficulty < (self.pool.p0 * factor)[self.pool.word_sample()]

    # --- caches --------------------------------------------------------------

    def val_cache(self) -> EvalCache:
        """Evaluation cache straight from the error masks (no text round trip)."""
        rows = [self.val.counts(self.run_mask(r)) for r in self.runs]
        return EvalCache(self.val.ids, self.val.lengths, self.val.counts(self.baseline_mask()),
                         list(self.runs), np.array(rows, dtype=np.int64).reshape(len(self.runs), -1))

    def user_caches(self) -> Dict[int, EvalCache]:
        out = {}
        pos = {sid: i for i, sid in enumerate(self.pool.ids)}
        base = self.pool.counts(self.pool.difficulty < self.pool.p0[self.pool.word_sample()])
        for user in self.pseudo_users:
            idx = [pos[s] for s in user.sample_ids]
            runs = [RunKey("simulated", user=user.user_id, hp=k) for k in range(len(self.config.hp_grid))]
            edits = [self.pool.counts(self.pool_run_mask(r))[idx] for r in runs]
            out[user.user_id] = EvalCache(list(user.sample_ids), self.pool.lengths[idx], base[idx], runs, edits)
        return out

    def trajectories(self) -> List[Trajectory]:
        out = []
        for v in range(self.config.num_targets):
            val = np.array([self.val.counts(self.run_mask(RunKey("target", user=v, epoch=w)))
                            for w in range(1, self.config.max_epochs + 1)], dtype=np.int64)
            before, frames = self._target_data[v]
            out.append(Trajectory(v, val, frames, before))
        return out

    # --- text rendering ------------------------------------------------------

    def _fill(self, corpus: Corpus, key: Tuple[int, ...]) -> np.ndarray:
        return _rng(self.config.seed, _S_TOKENS, *key).integers(0, self.config.vocab_size, len(corpus.words))

    def val_prediction_records(self):
        yield from self._records(self.val, BASELINE, self.baseline_mask(), range(len(self.val.ids)), (0,))
        for r, run in enumerate(self.runs):
            yield from self._records(self.val, run, self.run_mask(run), range(len(self.val.ids)), (1, r))

    def pool_prediction_records(self):
        pool = self.pool
        yield from self._records(pool, BASELINE, pool.difficulty < pool.p0[pool.word_sample()],
                                 range(len(pool.ids)), (2,))
        pos = {sid: i for i, sid in enumerate(pool.ids)}
        for user in self.pseudo_users:
            idx = [pos[s] for s in user.sample_ids]
            for k in range(len(self.config.hp_grid)):
                run = RunKey("simulated", user=user.user_id, hp=k)
                yield from self._records(pool, run, self.pool_run_mask(run), idx, (3, user.user_id, k))

    def _records(self, corpus, run, mask, indices, key):
        fill = self._fill(corpus, key)
        run_json = run.to_json()
        for i in indices:
            yield {"run": run_json, "sample_id": corpus.ids[i], "hyp": corpus.hypothesis(i, mask, fill)}

    def write(self, out_dir) -> Dict[str, str]:
        """Emit every file the pipeline consumes; returns name -> path."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {name: out / fname for name, fname in [
            ("samples", "samples.jsonl"), ("predictions", "predictions.jsonl"),
            ("pool_samples", "pool_samples.jsonl"), ("pool_predictions", "pool_predictions.jsonl"),
            ("embeddings", "embeddings.jsonl"), ("centroids", "centroids.jsonl"),
            ("pseudo_users", "pseudo_users.jsonl"), ("trajectories", "trajectories.jsonl"),
            ("world", "world.json")]}
        write_jsonl(paths["samples"], ({"id": sid, "text": self.val.text(i)} for i, sid in enumerate(self.val.ids)))
        write_jsonl(paths["predictions"], self.val_prediction_records())
        write_jsonl(paths["pool_samples"], ({"id": sid, "text": self.pool.text(i)} for i, sid in enumerate(self.pool.ids)))
        write_jsonl(paths["pool_predictions"], self.pool_prediction_records())
        write_embeddings(paths["embeddings"], self.pool.ids, self.pool_embeddings)
        write_embeddings(paths["centroids"], [f"c{c}" for c in range(len(self.centroids))], self.centroids)
        write_pseudo_users(paths["pseudo_users"], self.pseudo_users)
        write_trajectories(paths["trajectories"], self.trajectories(), self.val.counts(self.baseline_mask()))
        meta = {"generator": "forgetsub.synthgen", "config": self.config.to_json(),
                "seed": self.config.seed, "files": {k: p.name for k, p in paths.items() if k != "world"}}
        paths["world"].write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return {k: str(p) for k, p in paths.items()}


def generate_world(config: Optional[SynthConfig] = None) -> World:
    """Build a world deterministically from ``config.seed``."""
    cfg = config or SynthConfig()
    cfg.validate()
    seed = cfg.seed

    rng = _rng(seed, _S_VAL)
    val = _make_corpus(rng, "v", cfg.num_val_samples, cfg, cfg.baseline_wer_target)
    a = (1.0 / (4 * cfg.susceptibility_spread ** 2) - 1) / 2 if cfg.susceptibility_spread > 0 else math.inf
    susceptibility = rng.beta(a, a, cfg.num_val_samples) if math.isfinite(a) else np.full(cfg.num_val_samples, 0.5)

    rng = _rng(seed, _S_POOL)
    pool = _make_corpus(rng, "f", cfg.pool_size, cfg, cfg.pool_wer_target)

    rng = _rng(seed, _S_EMBED)
    centroids = rng.normal(size=(cfg.num_centroids, cfg.embedding_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    cluster = np.arange(cfg.pool_size) % cfg.num_centroids
    noise = rng.normal(size=(cfg.pool_size, cfg.embedding_dim)) * cfg.embedding_noise / math.sqrt(cfg.embedding_dim)
    pool_emb = centroids[cluster] + noise
    users = build_pseudo_users(pool.ids, pool_emb, centroids, cfg.top_n, cfg.sets_per_centroid,
                               cfg.set_size, seed)

    rng = _rng(seed, _S_USERS)
    severity = cfg.severity_mean * (1 + cfg.user_severity_spread * _stratified_normal(rng, cfg.num_users))
    improvement = np.clip(cfg.improvement_mean * (1 + 0.3 * rng.normal(size=cfg.num_users)), 0.0, 1.0)

    rng = _rng(seed, _S_TARGETS)
    target_sev = (cfg.severity_mean * cfg.target_severity_scale
                  * np.exp(cfg.target_severity_spread * _stratified_normal(rng, cfg.num_targets)))

    world = World(cfg, val, susceptibility, pool, pool_emb, centroids, users, severity,
                  improvement, target_sev)
    world.runs = [RunKey("simulated", user=u.user_id, hp=k)
                  for u in users for k in range(len(cfg.hp_grid))]
    world._target_data = _target_user_data(cfg)
    return world


def _target_user_data(cfg: SynthConfig):
    """WER summaries of each target user's own data before and after each epoch."""
    rng = _rng(cfg.seed, _S_TARGET_DATA)
    out = []
    for _ in range(cfg.num_targets):
        words = int(rng.integers(3, 7, cfg.target_samples).sum())
        wer0 = float(np.clip(rng.normal(cfg.target_wer, 0.087), 0.05, 0.95))
        gain = float(rng.uniform(0.3, 0.8))
        tau = float(rng.uniform(2.0, 6.0))
        edits0 = round(wer0 * words)
        frames = tuple(WerStat(round(edits0 * (1 - gain * (1 - math.exp(-w / tau)))), words)
                       for w in range(1, cfg.max_epochs + 1))
        out.append((WerStat(edits0, words), frames))
    return out


def forgetting_stats(world: World) -> Tuple[float, float]:
    """Mean and std of full-set forgetting across simulated runs."""
    from .characteristics import full_forgetting, summarize
    return summarize(full_forgetting(world.val_cache()).values)
