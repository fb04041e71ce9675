"""Experiment front end: config files, seeded runs, grid search and CSV output.

Config files are INI text. ``[experiment]`` holds the run settings and an
optional section per strategy name (``[FedProx]``, ``[FedAlign-L]`` ...)
overrides ``mu``, ``lambda``, ``alpha`` or ``sinkhorn_lambda`` for that
strategy only. Grid files have a single ``[grid]`` section mapping a config
key to a comma-separated list of values.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import itertools
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

from . import fedengine as fe
from . import fedsplit, synthetic
from .relgraph import GraphParseError, RelGraph, load_graph

log = logging.getLogger(__name__)

SETTINGS = ("FedAVG", "FedAVG-L", "FedProx", "FedProx-L", "FedAlign", "FedAlign-L")
KNOWN_STRATEGIES = SETTINGS + ("SP",)
SUMMARY_COLUMNS = ("strategy", "seed", "final_test_acc", "rounds")
TABLE_COLUMNS = ("strategy", "dataset", "mean_acc", "std_acc", "runs", "cell")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# file key -> dataclass field
_KEYS = {
    "dataset": "dataset",
    "graph_seed": "graph_seed",
    "nodes": "nodes",
    "types": "types",
    "relations": "relations",
    "density": "density",
    "classes": "classes",
    "label_fraction": "label_fraction",
    "train_fraction": "train_fraction",
    "homophily": "homophily",
    "n_clients": "n_clients",
    "types_to_keep": "types_to_keep",
    "strategies": "strategies",
    "mu": "mu",
    "lambda": "lam",
    "alpha": "lr",
    "bases": "n_bases",
    "d0": "d0",
    "hidden": "hidden",
    "local_epochs": "local_epochs",
    "global_epochs": "global_epochs",
    "seeds": "seeds",
    "output": "output",
    "aggregation": "aggregation",
    "inverse_relations": "inverse_relations",
    "sinkhorn_lambda": "sinkhorn_lambda",
}
_FIELD_TO_KEY = {v: k for k, v in _KEYS.items()}
_ALIASES = {"B": "bases", "lam": "lambda", "lr": "alpha", "N": "n_clients", "n_bases": "bases"}
_STRATEGY_KEYS = ("mu", "lambda", "alpha", "sinkhorn_lambda")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "synthetic"
    graph_seed: int = 0
    nodes: int = 600
    types: int = 5
    relations: int = 4
    density: float = 3.0
    classes: int = 4
    label_fraction: float = 0.5
    train_fraction: float = 0.8
    homophily: float = 0.8
    n_clients: int = 10
    types_to_keep: int | None = None  # None: min(6, available unlabeled types)
    strategies: tuple[str, ...] = SETTINGS
    mu: float = 10.0
    lam: float = 10.0
    lr: float = 0.1
    n_bases: int = 100
    d0: int = 16
    hidden: tuple[int, ...] = (16,)
    local_epochs: int = 5
    global_epochs: int = 20
    seeds: tuple[int, ...] = (0,)
    output: str = "runs"
    aggregation: str = "size_weighted"
    inverse_relations: bool = True
    sinkhorn_lambda: float = 10.0
    overrides: tuple[tuple[str, tuple[tuple[str, float], ...]], ...] = ()

    def validate(self) -> "ExperimentConfig":
        def bad(name, msg):
            raise ConfigError(f"{_FIELD_TO_KEY.get(name, name)}: {msg}")

        for name in ("n_clients", "n_bases", "d0", "local_epochs", "global_epochs", "nodes", "types",
                     "relations", "classes"):
            if getattr(self, name) < 1:
                bad(name, "must be a positive integer")
        if self.n_clients < 2:
            bad("n_clients", "needs at least 2 clients")
        if self.types_to_keep is not None and self.types_to_keep < 1:
            bad("types_to_keep", "must be positive")
        for name in ("mu", "lam", "sinkhorn_lambda"):
            if getattr(self, name) < 0:
                bad(name, "must be nonnegative")
        if self.sinkhorn_lambda == 0:
            bad("sinkhorn_lambda", "must be positive")
        if self.lr <= 0:
            bad("lr", "must be positive")
        if any(h < 1 for h in self.hidden):
            bad("hidden", "layer widths must be positive")
        if not self.seeds:
            bad("seeds", "at least one seed is required")
        if not self.strategies:
            bad("strategies", "at least one strategy is required")
        for s in self.strategies:
            if s not in KNOWN_STRATEGIES:
                bad("strategies", f"unknown strategy {s!r}; choose from {', '.join(KNOWN_STRATEGIES)}")
        if len(set(self.strategies)) != len(self.strategies):
            bad("strategies", "duplicate entries")
        if self.aggregation not in fe.AGGREGATIONS:
            bad("aggregation", f"must be one of {', '.join(fe.AGGREGATIONS)}")
        for s, kv in self.overrides:
            if s not in KNOWN_STRATEGIES:
                raise ConfigError(f"[{s}]: unknown strategy section")
            for k, v in kv:
                if k not in _STRATEGY_KEYS:
                    raise ConfigError(f"[{s}] {k}: only {', '.join(_STRATEGY_KEYS)} can be set per strategy")
                if v < 0 or (k in ("alpha", "sinkhorn_lambda") and v == 0):
                    raise ConfigError(f"[{s}] {k}: out of range ({v})")
        if self.dataset == "synthetic":
            try:
                self.synthetic_spec().validate()
            except ValueError as e:
                raise ConfigError(f"synthetic: {e}") from None
        return self

    def synthetic_spec(self) -> synthetic.SyntheticSpec:
        return synthetic.SyntheticSpec(
            nodes=self.nodes, types=self.types, relations=self.relations, density=self.density,
            classes=self.classes, label_fraction=self.label_fraction, train_fraction=self.train_fraction,
            homophily=self.homophily,
        )

    def model(self) -> fe.ModelConfig:
        return fe.ModelConfig(n_bases=self.n_bases, d0=self.d0, hidden=self.hidden,
                              inverse_relations=self.inverse_relations)

    def strategy(self, name: str) -> fe.StrategyConfig:
        kw = dict(mu=self.mu, lam=self.lam, lr=self.lr, sinkhorn_lambda=self.sinkhorn_lambda)
        for s, kv in self.overrides:
            if s == name:
                for k, v in kv:
                    kw[_KEYS[k]] = v
        return fe.StrategyConfig.from_name(
            name, local_epochs=self.local_epochs, global_epochs=self.global_epochs,
            n_clients=self.n_clients, aggregation=self.aggregation, **kw,
        )


def _parse_value(name: str, raw: str):
    raw = raw.strip()
    default = ExperimentConfig.__dataclass_fields__[name].default
    try:
        if name in ("strategies",):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
        if name in ("seeds", "hidden"):
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if name == "types_to_keep":
            return None if raw.lower() in ("", "auto") else int(raw)
        if name == "inverse_relations":
            if raw.lower() not in ("true", "false", "yes", "no", "on", "off", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "yes", "on", "1")
        if isinstance(default, bool):
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{_FIELD_TO_KEY[name]}: cannot parse {raw!r}") from None


def _canonical_key(key: str) -> str:
    key = _ALIASES.get(key, key)
    if key not in _KEYS:
        raise ConfigError(f"{key}: unknown config key")
    return key


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # keep key case so aliases like B survive
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    kw = {}
    if cp.has_section("experiment"):
        for key, raw in cp.items("experiment"):
            name = _KEYS[_canonical_key(key)]
            kw[name] = _parse_value(name, raw)
    overrides = []
    for section in cp.sections():
        if section == "experiment":
            continue
        kv = []
        for key, raw in cp.items(section):
            key = _ALIASES.get(key, key)
            try:
                kv.append((key, float(raw)))
            except ValueError:
                raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None
        overrides.append((section, tuple(sorted(kv))))
    kw["overrides"] = tuple(sorted(overrides))
    return ExperimentConfig(**kw).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text)


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize every effective setting; ``parse_config`` reads it back unchanged."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp["experiment"] = {_FIELD_TO_KEY[f.name]: _format_value(getattr(cfg, f.name))
                        for f in fields(cfg) if f.name != "overrides"}
    for s, kv in cfg.overrides:
        cp[s] = {k: repr(v) for k, v in kv}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def describe(cfg: ExperimentConfig) -> str:
    """One-line echo of the headline hyperparameters."""
    return (f"B={cfg.n_bases} α={cfg.lr:g} μ={cfg.mu:g} λ={cfg.lam:g} "
            f"E_local={cfg.local_epochs} E_global={cfg.global_epochs} N={cfg.n_clients}")


# --- running ---------------------------------------------------------------


@dataclass
class RunSummary:
    rows: list[tuple[str, int, float]] = field(default_factory=list)  # (strategy, seed, final acc)
    dataset: str = "synthetic"
    wall_ms: dict = field(default_factory=dict)

    def accuracies(self, strategy: str) -> list[float]:
        return [a for s, _, a in self.rows if s == strategy]

    def stat(self, strategy: str) -> fedsplit.SummaryStat:
        return fedsplit.mean_std(self.accuracies(strategy))

    @property
    def strategies(self) -> list[str]:
        return list(dict.fromkeys(s for s, _, _ in self.rows))

    def table(self) -> list[list[str]]:
        """Comparison grid: one row per strategy, percent mean ± std per dataset."""
        out = []
        for s in self.strategies:
            st = self.stat(s)
            out.append([s, self.dataset, f"{st.mean:.10g}", f"{st.std:.10g}", str(len(self.accuracies(s))),
                        f"{100 * st.mean:.2f}% ± {100 * st.std:.2f}"])
        return out


def load_dataset(cfg: ExperimentConfig) -> RelGraph:
    if cfg.dataset == "synthetic":
        return synthetic.generate(cfg.synthetic_spec(), seed=cfg.graph_seed)
    try:
        return load_graph(cfg.dataset)
    except (OSError, GraphParseError) as e:
        raise DataError(f"dataset {cfg.dataset}: {e}") from None


def resolve_types_to_keep(cfg: ExperimentConfig, g: RelGraph) -> int:
    available = len(fedsplit.unlabeled_types(g))
    if available == 0:
        raise DataError("dataset has no unlabeled node types to sample")
    return min(6, available) if cfg.types_to_keep is None else cfg.types_to_keep


def make_split(cfg: ExperimentConfig, g: RelGraph, seed: int) -> fedsplit.FederatedDataset:
    try:
        return fedsplit.federated_split(g, cfg.n_clients, resolve_types_to_keep(cfg, g), seed=seed)
    except ValueError as e:
        raise DataError(f"split: {e}") from None


def thread_cap() -> int:
    raw = os.environ.get("FEDALIGN_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"FEDALIGN_THREADS: expected an integer, got {raw!r}") from None


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def run_experiment(cfg: ExperimentConfig, threads: int | None = None, track_ot: bool = True) -> RunSummary:
    """Every (strategy, seed) pair: split, train for E_global rounds, log.

    Writes ``rounds/<strategy>_seed<s>.csv``, ``summary.csv``, ``table.csv``
    and ``config.ini`` under ``cfg.output``. Wall times go to
    ``timing.json`` so the CSV files depend only on config and seeds.
    """
    cfg.validate()
    g = load_dataset(cfg)
    out = Path(cfg.output)
    (out / "rounds").mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg), encoding="utf-8")
    splits = {seed: make_split(cfg, g, seed) for seed in cfg.seeds}
    model = cfg.model()
    jobs = [(s, seed) for s in cfg.strategies for seed in cfg.seeds]

    def job(item):
        name, seed = item
        t0 = time.perf_counter()
        records = fe.run_federation(splits[seed], cfg.strategy(name), model, seed=seed, track_ot=track_ot)
        fe.write_round_log(out / "rounds" / f"{name}_seed{seed}.csv", fe.round_log_rows(records, name, seed))
        return records, (time.perf_counter() - t0) * 1000.0

    n = min(threads or thread_cap(), len(jobs))
    if n > 1:
        with ThreadPoolExecutor(n) as ex:
            results = list(ex.map(job, jobs))
    else:
        results = [job(j) for j in jobs]

    summary = RunSummary(dataset="synthetic" if cfg.dataset == "synthetic" else Path(cfg.dataset).name)
    for (name, seed), (records, ms) in zip(jobs, results):
        summary.rows.append((name, seed, records[-1].test_acc))
        summary.wall_ms[f"{name}/seed{seed}"] = ms
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS,
               [[s, str(seed), f"{a:.10g}", str(cfg.global_epochs)] for s, seed, a in summary.rows])
    _write_csv(out / "table.csv", TABLE_COLUMNS, summary.table())
    timing = {"wall_ms": summary.wall_ms, "global_epochs": cfg.global_epochs, "local_epochs": cfg.local_epochs,
              "sinkhorn_max_iters": 1000, "threads": n}
    (out / "timing.json").write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return summary


# --- grid search -----------------------------------------------------------


def parse_grid(text: str) -> dict[str, list]:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed grid: {e}") from None
    if not cp.has_section("grid"):
        raise ConfigError("grid: missing [grid] section")
    grid = {}
    for key, raw in cp.items("grid"):
        key = _canonical_key(key)
        name = _KEYS[key]
        if name in ("strategies", "seeds", "output", "dataset"):
            raise ConfigError(f"{key}: cannot be searched over")
        values = [_parse_value(name, v) for v in raw.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"{key}: empty value list")
        grid[key] = values
    if not grid:
        raise ConfigError("grid: empty grid")
    return grid


@dataclass(frozen=True)
class GridResult:
    strategy: str
    point: dict
    mean_acc: float
    index: int
    mu: float = 0.0
    lam: float = 0.0

    def rank(self):
        return (-self.mean_acc, self.mu, self.lam, self.index)


def grid_search(cfg: ExperimentConfig, grid: dict[str, Sequence], threads: int | None = None
                ) -> dict[str, GridResult]:
    """Run every grid point and keep the best mean accuracy per strategy.

    Ties go to the lower mu, then the lower lambda, then the earlier point.
    Each point writes its own run directory ``grid_XXX``; all points are
    listed in ``grid.csv``.
    """
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ConfigError("grid: empty grid")
    keys = [_canonical_key(k) for k in grid]
    points = [dict(zip(keys, combo)) for combo in itertools.product(*(list(v) for v in grid.values()))]
    out = Path(cfg.output)
    rows = []
    best: dict[str, GridResult] = {}
    for i, point in enumerate(points):
        sub = replace(cfg, output=str(out / f"grid_{i:03d}"), **{_KEYS[k]: v for k, v in point.items()}).validate()
        summary = run_experiment(sub, threads)
        for s in sub.strategies:
            st = summary.stat(s)
            strat = sub.strategy(s)
            rows.append([str(i), s, *(_format_value(point[k]) for k in keys), f"{st.mean:.10g}", f"{st.std:.10g}"])
            cand = GridResult(s, point, st.mean, i, strat.mu, strat.lam)
            if s not in best or cand.rank() < best[s].rank():
                best[s] = cand
    _write_csv(out / "grid.csv", ["point", "strategy", *keys, "mean_acc", "std_acc"], rows)
    _write_csv(out / "grid_best.csv", ["strategy", *keys, "mean_acc"],
               [[s, *(_format_value(r.point[k]) for k in keys), f"{r.mean_acc:.10g}"] for s, r in best.items()])
    return best


# --- command line ----------------------------------------------------------


def _split_stats_table(entities, edges) -> str:
    lines = ["client\tentities\tedges"]
    for k, (n, e) in enumerate(zip(entities, edges)):
        lines.append(f"{k}\t{n}\t{e}")
    lines.append(f"mean±std\t{fedsplit.mean_std(entities)}\t{fedsplit.mean_std(edges)}")
    return "\n".join(lines)


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg = replace(cfg, output=args.output)
    print(describe(cfg))
    summary = run_experiment(cfg)
    for s in summary.strategies:
        print(f"{s}\t{summary.stat(s)}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = load_config(args.config)
    if args.output:
        cfg = replace(cfg, output=args.output)
    try:
        grid = parse_grid(Path(args.grid).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read grid {args.grid}: {e}") from None
    print(describe(cfg))
    for s, r in grid_search(cfg, grid).items():
        point = " ".join(f"{k}={_format_value(v)}" for k, v in r.point.items())
        print(f"{s}\t{point}\tmean_acc={r.mean_acc:.4f}")
    return EXIT_OK


def cmd_config(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    print(describe(cfg))
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


def cmd_split(args) -> int:
    try:
        g = load_graph(args.dataset)
    except (OSError, GraphParseError) as e:
        raise DataError(f"dataset {args.dataset}: {e}") from None
    ttk = args.types_to_keep or min(6, len(fedsplit.unlabeled_types(g)))
    try:
        fd = fedsplit.federated_split(g, args.clients, ttk, seed=args.seed)
    except ValueError as e:
        raise DataError(f"split: {e}") from None
    fedsplit.export_split(fd, args.out)
    print(fedsplit.shard_stats(fd).table())
    return EXIT_OK


def cmd_stats(args) -> int:
    root = Path(args.split_dir)
    dirs = sorted(p for p in root.glob("client_*") if p.is_dir())
    if not dirs:
        raise DataError(f"{root}: no client_* directories")
    ent, edg = [], []
    for d in dirs:
        try:
            g = load_graph(d, allow_empty=True)
        except (OSError, GraphParseError) as e:
            raise DataError(f"{d}: {e}") from None
        ent.append(g.num_nodes)
        edg.append(len(g.edges))
    print(_split_stats_table(ent, edg))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedalign", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)
    r = sub.add_parser("run", help="run every strategy and seed in a config")
    r.add_argument("config")
    r.add_argument("--output", help="override the output directory")
    r.set_defaults(func=cmd_run)
    gp = sub.add_parser("grid", help="grid search over config keys")
    gp.add_argument("config")
    gp.add_argument("grid")
    gp.add_argument("--output", help="override the output directory")
    gp.set_defaults(func=cmd_grid)
    c = sub.add_parser("config", help="print the effective config")
    c.add_argument("config", nargs="?")
    c.set_defaults(func=cmd_config)
    s = sub.add_parser("split", help="split a graph directory into client shards")
    s.add_argument("dataset")
    s.add_argument("--clients", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--types-to-keep", type=int, default=None)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)
    st = sub.add_parser("stats", help="entity and edge counts of an exported split")
    st.add_argument("split_dir")
    st.set_defaults(func=cmd_stats)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except fe.NumericFailure as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
