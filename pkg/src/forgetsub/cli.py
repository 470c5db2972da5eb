"""Command line entry point: ``forgetsub <subcommand> [options]``.

Settings come from flags first, then the subcommand's table in the TOML file
given by ``--config``, then top-level keys of that file, then built-in
defaults. Every output carries the resolved settings and seed, either inline
(JSON outputs) or in a ``<file>.meta.json`` sidecar (CSV and JSONL outputs).
Worker counts are left out of that record since results do not depend on
them.

Exit codes: 0 success, 1 data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .characteristics import full_forgetting, gather_if, summarize, target_rows, write_if_csv
from .datastore import EvalCache, cache_from_files, default_workers, user_caches_from_files
from .earlystop import read_trajectories, run_cohort, write_outcomes_csv
from .errors import ConfigInvalid, ForgetsubError
from .pseudousers import build_pseudo_users, read_embeddings, read_pseudo_users, write_pseudo_users
from .report import (
    BOX_COLUMNS, IFPLOT_COLUMNS, MAE_COLUMNS, ORACLE, SWEEP_COLUMNS, epochs_box_table,
    evaluate_methods, ifplot_table, mae_table, subset_size_sweep, write_table,
)
from .subsampler import (
    GAConfig, UtilityKind, all_correct_subset, evolve, fitness, random_subset, result_record,
)
from .synthgen import SynthConfig, generate_world

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_GAMMAS = (0.01, 0.015, 0.02)
SHORT_NAMES = {UtilityKind.NEG_MSE: "mse", UtilityKind.NEG_MAE: "mae", UtilityKind.COSINE: "cos",
               UtilityKind.PEARSON: "corr", UtilityKind.NEG_CANBERRA: "canb"}
SECTIONS = ("synth", "ingest", "pseudo_users", "characterize", "optimize", "baseline",
            "simulate", "evaluate")


class UsageError(Exception):
    pass


# --- settings ----------------------------------------------------------------

def load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from None
    unknown = [k for k, v in data.items() if isinstance(v, dict) and k not in SECTIONS]
    if unknown:
        raise UsageError(f"config {path}: unknown sections {', '.join(sorted(unknown))}")
    return data


class Settings:
    """Flag > [section] > top level > default."""

    def __init__(self, args, config: dict, section: str):
        self.args = args
        self.top = {k: v for k, v in config.items() if not isinstance(v, dict)}
        self.section = config.get(section, {})
        self.used: Dict[str, object] = {}

    def get(self, name: str, default=None, record: bool = True):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.section.get(name, self.top.get(name, default))
        if record:
            self.used[name] = value
        return value


def _floats(text) -> List[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text) -> List[int]:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise UsageError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


def _names(text) -> List[str]:
    if isinstance(text, (list, tuple)):
        return [str(x) for x in text]
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _existing(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"missing required path: {what}")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _meta(command: str, settings: Settings, **extra) -> dict:
    return {"tool": "forgetsub", "version": __version__, "command": command,
            "seed": settings.used.get("seed"), "config": dict(sorted(settings.used.items())), **extra}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(path: Path, meta: dict) -> None:
    _write_json(path.with_name(path.name + ".meta.json"), meta)


def _workers(settings: Settings) -> int:
    w = settings.get("workers", None, record=False)
    w = default_workers() if w is None else int(w)
    if w < 1:
        raise UsageError("--workers must be at least 1")
    return w


def _load_cache(path) -> EvalCache:
    return EvalCache.load(_existing(path, "cache"))


# --- subcommands -------------------------------------------------------------

def cmd_synth(args, config) -> None:
    s = Settings(args, config, "synth")
    table = {k: v for k, v in config.get("synth", {}).items() if k != "out"}
    seed = s.get("seed", 0)
    table["seed"] = int(seed)
    cfg = SynthConfig.from_mapping(table)
    out = Path(s.get("out", "world", record=False))
    world = generate_world(cfg)
    world.write(out)
    print(f"wrote synthetic world (seed {cfg.seed}) to {out}")


def cmd_ingest(args, config) -> None:
    s = Settings(args, config, "ingest")
    samples = _existing(s.get("samples", None, record=False), "samples")
    preds = _existing(s.get("predictions", None, record=False), "predictions")
    out = Path(s.get("out", "cache.json", record=False))
    cache = cache_from_files(samples, preds, workers=_workers(s))
    meta = _meta("ingest", s, inputs={"samples": samples.name, "predictions": preds.name})
    out.parent.mkdir(parents=True, exist_ok=True)
    body = {**cache.to_json(), "meta": meta}
    out.write_text(json.dumps(body, separators=(",", ":"), sort_keys=True) + "\n", encoding="utf-8")
    print(f"{cache.n_samples} samples x {len(cache.runs)} runs -> {out}")


def cmd_pseudo_users(args, config) -> None:
    s = Settings(args, config, "pseudo_users")
    emb = _existing(s.get("embeddings", None, record=False), "embeddings")
    cen = _existing(s.get("centroids", None, record=False), "centroids")
    out = Path(s.get("out", "pseudo_users.jsonl", record=False))
    ids, pool = read_embeddings(emb)
    _, centroids = read_embeddings(cen)
    users = build_pseudo_users(ids, pool, centroids, int(s.get("top_n", 150)),
                               int(s.get("sets_per_centroid", 6)), int(s.get("set_size", 24)),
                               int(s.get("seed", 0)))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pseudo_users(out, users)
    _sidecar(out, _meta("pseudo-users", s, inputs={"embeddings": emb.name, "centroids": cen.name}))
    print(f"{len(users)} pseudo-users -> {out}")


def cmd_characterize(args, config) -> None:
    s = Settings(args, config, "characterize")
    cache = _load_cache(s.get("cache", None, record=False))
    out = Path(s.get("out", "if.csv", record=False))
    eps = s.get("eps_div")
    vec = full_forgetting(cache, eps_div=None if eps is None else float(eps))
    mean, std = summarize(vec.values)
    users_path = s.get("pseudo_users", None, record=False)
    if users_path is not None:
        users = {u.user_id: u.sample_ids for u in read_pseudo_users(_existing(users_path, "pseudo-users"))}
        ucaches = user_caches_from_files(_existing(s.get("pool_samples", None, record=False), "pool samples"),
                                         _existing(s.get("pool_predictions", None, record=False),
                                                   "pool predictions"),
                                         users, workers=_workers(s))
        records = gather_if(cache, ucaches)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_if_csv(out, records)
        _sidecar(out, _meta("characterize", s, forgetting_mean=mean, forgetting_std=std))
        print(f"{len(records)} I-F records -> {out}")
    print(f"forgetting over {len(vec)} runs: mean {100 * mean:.2f}% std {100 * std:.2f}%")


def _ga_config(s: Settings, genes: Optional[int] = None) -> GAConfig:
    return GAConfig(
        population=int(s.get("population", 20)), genes=int(genes if genes is not None else s.get("subset_size", 100)),
        parents=int(s.get("parents", 10)), offspring=int(s.get("offspring", 10)),
        mutation_rate=float(s.get("mutation_rate", 0.10)), generations=int(s.get("generations", 650)),
        seed=int(s.get("seed", 0)), utility=UtilityKind.parse(s.get("utility", "canb")),
        guard=bool(s.get("guard", True)))


def _target_vector(cache: EvalCache, s: Settings):
    rows = target_rows(cache, exclude_outliers=bool(s.get("exclude_outliers", False)))
    eps = s.get("eps_div")
    eps = None if eps is None else float(eps)
    return full_forgetting(cache, rows, eps), eps


def cmd_optimize(args, config) -> None:
    s = Settings(args, config, "optimize")
    cache = _load_cache(s.get("cache", None, record=False))
    ga = _ga_config(s)
    full, eps = _target_vector(cache, s)
    res = evolve(cache, full, ga, eps_div=eps, workers=_workers(s))
    out = Path(s.get("out", None, record=False) or f"subsets/{SHORT_NAMES[ga.utility]}.json")
    record = result_record(cache, res.indices, res.fitness, ga.utility, ga.to_json(), res.history)
    record["meta"] = _meta("optimize", s)
    _write_json(out, record)
    print(f"{ga.utility.value}: fitness {res.fitness:.6g} with {len(res.indices)} samples -> {out}")


def cmd_baseline(args, config) -> None:
    s = Settings(args, config, "baseline")
    cache = _load_cache(s.get("cache", None, record=False))
    kind = s.get("kind")
    if kind not in ("rand", "allc"):
        raise UsageError("--kind must be rand or allc")
    m, seed = int(s.get("subset_size", 100)), int(s.get("seed", 0))
    idx = random_subset(m, cache.n_samples, seed) if kind == "rand" else all_correct_subset(cache, m, seed)
    utility = UtilityKind.parse(s.get("utility", "canb"))
    full, eps = _target_vector(cache, s)
    value = fitness(cache, full, idx, utility, eps_div=eps)
    out = Path(s.get("out", None, record=False) or f"subsets/{kind}.json")
    record = result_record(cache, idx, value, utility, {"kind": kind, "subset_size": m, "seed": seed})
    record["meta"] = _meta("baseline", s)
    _write_json(out, record)
    print(f"{kind}: {m} samples, {utility.value} fitness {value:.6g} -> {out}")


def _read_subset(path, cache: EvalCache) -> np.ndarray:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        idx = np.asarray(obj["indices"], dtype=np.int64)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigInvalid(f"{path}: not a subset result file ({exc})") from None
    ids = obj.get("sample_ids")
    if ids is not None and [cache.sample_ids[i] for i in cache.check_subset(idx)] != list(ids):
        raise ConfigInvalid(f"{path}: sample ids do not match the cache")
    return idx


def cmd_simulate(args, config) -> None:
    s = Settings(args, config, "simulate")
    cache = _load_cache(s.get("cache", None, record=False))
    trajs = read_trajectories(_existing(s.get("trajectories", None, record=False), "trajectories"),
                              cache.n_samples)
    subset = s.get("subset", "full", record=False)
    idx = np.arange(cache.n_samples) if subset == "full" else _read_subset(_existing(subset, "subset"), cache)
    gammas = _floats(s.get("gamma", list(DEFAULT_GAMMAS)))
    rows = run_cohort(trajs, idx, cache, gammas, int(s.get("max_epochs", 15)), workers=_workers(s))
    out = Path(s.get("out", "outcomes.csv", record=False))
    out.parent.mkdir(parents=True, exist_ok=True)
    write_outcomes_csv(out, rows)
    _sidecar(out, _meta("simulate", s, subset=subset if subset == "full" else Path(subset).name))
    print(f"{len(rows)} outcomes -> {out}")


def cmd_evaluate(args, config) -> None:
    s = Settings(args, config, "evaluate")
    cache = _load_cache(s.get("cache", None, record=False))
    trajs = read_trajectories(_existing(s.get("trajectories", None, record=False), "trajectories"),
                              cache.n_samples)
    if s.get("oracle", "full") != "full":
        raise UsageError("only --oracle full is supported")
    subsets_dir = _existing(s.get("subsets", "subsets", record=False), "subsets directory")
    methods = s.get("methods")
    methods = _names(methods) if methods is not None else sorted(p.stem for p in subsets_dir.glob("*.json"))
    s.used["methods"] = methods
    if not methods or ORACLE in methods:
        raise UsageError("need at least one method, and 'oracle' is reserved")
    subsets = {m: _read_subset(_existing(subsets_dir / f"{m}.json", f"subset for {m}"), cache) for m in methods}
    gammas = _floats(s.get("gamma", list(DEFAULT_GAMMAS)))
    max_epochs = int(s.get("max_epochs", 15))
    workers = _workers(s)
    out = Path(s.get("out", "report", record=False))
    out.mkdir(parents=True, exist_ok=True)

    results = evaluate_methods(cache, trajs, subsets, gammas, max_epochs, workers)
    tables = [("mae.csv", MAE_COLUMNS, mae_table(results, gammas)),
              ("ifplot.csv", IFPLOT_COLUMNS, ifplot_table(results, gammas)),
              ("epochs_box.csv", BOX_COLUMNS, epochs_box_table(results, gammas))]
    sizes = s.get("sweep_sizes")
    if sizes is not None:
        sizes = _ints(sizes)
        s.used["sweep_sizes"] = sizes
        sweep_gamma = float(s.get("sweep_gamma", 0.015))
        cfg = _ga_config(s, genes=1)
        full = full_forgetting(cache, target_rows(cache, bool(s.get("exclude_outliers", False))))
        tables.append(("mae_vs_size.csv", SWEEP_COLUMNS, subset_size_sweep(
            cache, full, trajs, sizes, sweep_gamma, max_epochs, cfg, workers)))
    meta = _meta("evaluate", s, subsets={m: f"{m}.json" for m in methods})
    for name, cols, rows in tables:
        write_table(out / name, cols, rows)
        _sidecar(out / name, meta)
    for row in tables[0][2]:
        print(f"{row['method']:>10}  gamma={row['gamma']:<6g} MAE {row['mean']:.3f} ({row['std']:.3f})")


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forgetsub", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config", help="TOML settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int, help="parallel workers (default: available CPUs)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic world")
    p.add_argument("--out", help="output directory (default: world)")

    p = add("ingest", cmd_ingest, "score predictions into an evaluation cache")
    p.add_argument("--samples")
    p.add_argument("--predictions")
    p.add_argument("--out", help="cache file (default: cache.json)")

    p = add("pseudo-users", cmd_pseudo_users, "build pseudo-users from speaker embeddings")
    p.add_argument("--embeddings")
    p.add_argument("--centroids")
    p.add_argument("--top-n", dest="top_n", type=int)
    p.add_argument("--sets-per-centroid", dest="sets_per_centroid", type=int)
    p.add_argument("--set-size", dest="set_size", type=int)
    p.add_argument("--out")

    p = add("characterize", cmd_characterize, "forgetting summary and improvement-forgetting table")
    p.add_argument("--cache")
    p.add_argument("--pseudo-users", dest="pseudo_users")
    p.add_argument("--pool-samples", dest="pool_samples")
    p.add_argument("--pool-predictions", dest="pool_predictions")
    p.add_argument("--eps-div", dest="eps_div", type=float)
    p.add_argument("--out")

    def subset_flags(p):
        p.add_argument("--cache")
        p.add_argument("--subset-size", dest="subset_size", type=int)
        p.add_argument("--utility")
        p.add_argument("--eps-div", dest="eps_div", type=float)
        p.add_argument("--exclude-outliers", dest="exclude_outliers", action="store_const", const=True)
        p.add_argument("--out")

    def ga_flags(p):
        p.add_argument("--generations", type=int)
        p.add_argument("--population", type=int)
        p.add_argument("--parents", type=int)
        p.add_argument("--offspring", type=int)
        p.add_argument("--mutation-rate", dest="mutation_rate", type=float)
        p.add_argument("--no-guard", dest="guard", action="store_const", const=False)

    p = add("optimize", cmd_optimize, "search for a subset whose forgetting tracks the full set")
    subset_flags(p)
    ga_flags(p)

    p = add("baseline", cmd_baseline, "draw a random or all-correct baseline subset")
    subset_flags(p)
    p.add_argument("--kind", choices=["rand", "allc"])

    def stop_flags(p):
        p.add_argument("--cache")
        p.add_argument("--trajectories")
        p.add_argument("--gamma", help="forgetting thresholds, comma separated fractions")
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--out")

    p = add("simulate", cmd_simulate, "replay early-stopped fine-tuning on one evaluation subset")
    stop_flags(p)
    p.add_argument("--subset", help="subset result file, or 'full' (default)")

    p = add("evaluate", cmd_evaluate, "compare subsets against the full-set oracle")
    stop_flags(p)
    ga_flags(p)
    p.add_argument("--oracle", choices=["full"])
    p.add_argument("--methods", help="comma separated names; reads <subsets>/<name>.json")
    p.add_argument("--subsets", help="directory of subset result files (default: subsets)")
    p.add_argument("--sweep-sizes", dest="sweep_sizes", help="also run the subset-size sweep")
    p.add_argument("--sweep-gamma", dest="sweep_gamma", type=float)
    p.add_argument("--utility")
    p.add_argument("--exclude-outliers", dest="exclude_outliers", action="store_const", const=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        args.func(args, config)
    except UsageError as exc:
        parser.exit(2, f"forgetsub {args.command}: error: {exc}\n")
    except ForgetsubError as exc:
        print(f"forgetsub {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
