"""Command-line experiment runner.

Subcommands: ``simulate``, ``train``, ``ablation``, ``verify``, ``deadlock``.
Exit codes: 0 success, 1 a check failed (or training diverged), 2 bad input.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path

from . import analysis, net, seir, trainer
from .exceptions import ConfigError, ConflictGateError, NumericalError
from .seir import SeirParams
from .trainer import TRACE_COLUMNS, TrainConfig, TrainTrace

log = logging.getLogger("conflict_gate")

SEED_ENV = "CONFLICT_GATE_SEED"
EXIT_OK, EXIT_CHECK, EXIT_INPUT = 0, 1, 2


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    seir: SeirParams = field(default_factory=SeirParams)
    n_points: int = 20
    noise_sigma: float = 0.05
    data_seed: int = 0
    dt: float = 0.1
    strategies: tuple[str, ...] = ("fixed", "lra", "cggs")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    train: dict = field(default_factory=dict)
    # per-strategy TrainConfig overrides, e.g. {"fixed": {"lambda_phy": 1.0}}
    overrides: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def __post_init__(self):
        if not self.strategies:
            raise ConfigError("spec needs at least one strategy")
        if not self.seeds:
            raise ConfigError("spec needs at least one seed")
        for s in self.strategies:
            if s not in trainer.STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; choose from {', '.join(trainer.STRATEGIES)}")
        # build every config once so bad options fail before any run starts
        for s in self.strategies:
            self.config(s, self.seeds[0])

    def config(self, strategy: str, seed: int, theory: bool = False) -> TrainConfig:
        doc = {**self.train, **self.overrides.get(strategy, {}), "strategy": strategy, "seed": seed}
        cfg = trainer.config_from_dict(doc)
        return cfg.theory() if theory else cfg

    @property
    def t_horizon(self) -> float:
        return float(self.train.get("t_horizon", 100.0))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["seir"] = asdict(self.seir)
        out["dataset"] = {"n_points": out.pop("n_points"), "noise_sigma": out.pop("noise_sigma"),
                          "seed": out.pop("data_seed")}
        out["strategies"], out["seeds"] = list(self.strategies), list(self.seeds)
        return out


_SPEC_KEYS = {"name", "seir", "dataset", "dt", "strategies", "seeds", "train", "overrides", "output_dir"}


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec {path} is not valid JSON: {exc}") from exc
    return spec_from_dict(doc)


def spec_from_dict(doc: dict) -> ExperimentSpec:
    if not isinstance(doc, dict):
        raise ConfigError("spec must be a JSON object")
    unknown = set(doc) - _SPEC_KEYS
    if unknown:
        raise ConfigError(f"unknown spec keys: {', '.join(sorted(unknown))}")
    data = dict(doc.get("dataset", {}))
    bad = set(data) - {"n_points", "noise_sigma", "seed"}
    if bad:
        raise ConfigError(f"unknown dataset keys: {', '.join(sorted(bad))}")
    try:
        return ExperimentSpec(
            name=str(doc.get("name", "experiment")),
            seir=SeirParams(**doc.get("seir", {})),
            n_points=int(data.get("n_points", 20)),
            noise_sigma=float(data.get("noise_sigma", 0.05)),
            data_seed=int(data.get("seed", 0)),
            dt=float(doc.get("dt", 0.1)),
            strategies=tuple(doc.get("strategies", ("fixed", "lra", "cggs"))),
            seeds=tuple(int(s) for s in doc.get("seeds", (0, 1, 2, 3, 4))),
            train=dict(doc.get("train", {})),
            overrides=dict(doc.get("overrides", {})),
            output_dir=str(doc.get("output_dir", "runs")),
        )
    except TypeError as exc:
        raise ConfigError(f"malformed spec: {exc}") from exc


def truth_and_dataset(spec: ExperimentSpec) -> tuple[seir.Trajectory, seir.Dataset]:
    truth = seir.rk4_simulate(spec.seir, t_end=spec.t_horizon, dt=spec.dt)
    return truth, seir.generate_dataset(truth, spec.n_points, spec.noise_sigma, spec.data_seed)


def config_to_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["layer_sizes"] = list(cfg.layer_sizes)
    return out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def run_cell(spec_doc: dict, strategy: str, seed: int, out_dir: str, theory: bool = False,
             learning_rate: float | None = None) -> dict:
    """Train one strategy/seed cell and write its artifacts; returns the metrics."""
    spec = spec_from_dict(spec_doc)
    cfg = spec.config(strategy, seed, theory)
    truth, dataset = truth_and_dataset(spec)
    inputs = trainer.make_inputs(cfg, spec.seir, dataset)
    params = net.init(cfg.layer_sizes, cfg.seed, cfg.time_scale)
    extra = {}
    if learning_rate is not None:
        cfg = replace(cfg, learning_rate=learning_rate)
    elif theory:
        eta, l_hat = analysis.theory_learning_rate(params, inputs, cfg.kappa, seed=seed)
        cfg = replace(cfg, learning_rate=eta)
        extra["l_hat"] = l_hat
    log.info("training %s seed=%d steps=%d lr=%.3g", strategy, seed, cfg.steps, cfg.learning_rate)
    trace = trainer.run(cfg, inputs, params)

    cell = Path(out_dir) / strategy / str(seed)
    cell.mkdir(parents=True, exist_ok=True)
    trace.to_csv(cell / "trace.csv")
    net.save_params(trace.params, cell / "params.json")
    _write_json(cell / "config.json", config_to_dict(cfg))
    metrics = analysis.experiment_metrics(trace, trace.params, truth).to_dict()
    metrics.update(strategy=strategy, seed=seed, learning_rate=cfg.learning_rate, **extra)
    if trace.rates is not None:
        metrics["rates"] = trace.rates
    if cfg.is_theory_mode and strategy == "cggs":
        metrics["verdict"] = analysis.verify_trace(trace, analysis.compute_m_kappa(cfg.kappa)).to_dict()
    _write_json(cell / "metrics.json", metrics)
    return metrics


def _seeds(spec: ExperimentSpec, cli_seed: int | None) -> tuple[int, ...]:
    if cli_seed is not None:
        return (cli_seed,)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return (int(env),)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from exc
    return spec.seeds


def run_cells(spec: ExperimentSpec, strategies, seeds, out_dir: str, theory: bool = False,
              learning_rate: float | None = None, jobs: int | None = None) -> list[dict]:
    cells = [(s, k) for s in strategies for k in seeds]
    args = [(spec.to_dict(), s, k, out_dir, theory, learning_rate) for s, k in cells]
    jobs = min(jobs or os.cpu_count() or 1, len(cells))
    if jobs <= 1:
        return [run_cell(*a) for a in args]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(run_cell, *a) for a in args]
        return [f.result() for f in futures]


def compare(results: list[dict], strategies) -> dict:
    """Per-seed metrics plus pairwise win counts for every strategy pair."""
    per_seed: dict[str, dict] = {}
    for m in results:
        per_seed.setdefault(str(m["seed"]), {})[m["strategy"]] = {
            k: m[k] for k in ("final_l_data", "peak_value_error", "peak_time_error", "phase_medians")
        }
    wins = {}
    for a, b in combinations(strategies, 2):
        rows = [v for v in per_seed.values() if a in v and b in v]
        wins[f"{a}_vs_{b}"] = {
            "seeds": len(rows),
            f"{a}_final_l_data_le": sum(r[a]["final_l_data"] <= r[b]["final_l_data"] for r in rows),
            f"{b}_final_l_data_le": sum(r[b]["final_l_data"] <= r[a]["final_l_data"] for r in rows),
            f"{a}_peak_error_lt": sum(r[a]["peak_value_error"] < r[b]["peak_value_error"] for r in rows),
            f"{b}_peak_error_lt": sum(r[b]["peak_value_error"] < r[a]["peak_value_error"] for r in rows),
        }
    return {"strategies": list(strategies), "seeds": sorted(per_seed, key=int),
            "per_seed": per_seed, "wins": wins}


def write_combined_csv(out_dir: Path, strategies, seeds, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("strategy", "seed") + TRACE_COLUMNS)
        for s in strategies:
            for k in seeds:
                with open(out_dir / s / str(k) / "trace.csv", newline="") as src:
                    rows = list(csv.reader(src))[1:]
                w.writerows([s, str(k), *row] for row in rows)


# command handlers -----------------------------------------------------------

def _spec(args) -> ExperimentSpec:
    return load_spec(args.spec) if args.spec else ExperimentSpec()


def _out(args, spec: ExperimentSpec) -> Path:
    return Path(args.out or spec.output_dir)


def cmd_simulate(args) -> int:
    spec = _spec(args)
    if args.seed is not None or os.environ.get(SEED_ENV) is not None:
        spec = replace(spec, data_seed=_seeds(spec, args.seed)[0])
    out = _out(args, spec)
    out.mkdir(parents=True, exist_ok=True)
    truth, dataset = truth_and_dataset(spec)
    seir.save_trajectory(truth, out / "truth.csv")
    seir.save_dataset(dataset, out / "dataset.csv")
    print(json.dumps({"truth": str(out / "truth.csv"), "dataset": str(out / "dataset.csv"),
                      "rows": len(dataset), "peak_i": float(truth.i.max())}))
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _spec(args)
    strategies = (args.strategy,) if args.strategy else spec.strategies
    if args.strategy and args.strategy not in trainer.STRATEGIES:
        raise ConfigError(f"unknown strategy {args.strategy!r}; choose from {', '.join(trainer.STRATEGIES)}")
    results = run_cells(spec, strategies, _seeds(spec, args.seed), str(_out(args, spec)),
                        args.theory_mode, args.learning_rate, args.jobs)
    print(json.dumps(results, sort_keys=True))
    verdicts = [m["verdict"]["passed"] for m in results if "verdict" in m]
    return EXIT_OK if all(verdicts) else EXIT_CHECK


def cmd_ablation(args) -> int:
    spec = _spec(args)
    strategies = spec.strategies if not args.strategy else tuple(args.strategy.split(","))
    if len(strategies) < 2:
        raise ConfigError("ablation needs at least two strategies")
    seeds = _seeds(spec, args.seed)
    out = _out(args, spec)
    results = run_cells(replace(spec, strategies=strategies), strategies, seeds, str(out),
                        args.theory_mode, args.learning_rate, args.jobs)
    comparison = compare(results, strategies)
    _write_json(out / "comparison.json", comparison)
    write_combined_csv(out, strategies, seeds, out / "ablation.csv")
    print(json.dumps(comparison["wins"], sort_keys=True))
    return EXIT_OK


def cmd_verify(args) -> int:
    trace = TrainTrace.from_csv(args.trace)
    cfg_path = Path(args.trace).with_name("config.json")
    if cfg_path.exists():
        try:
            trace.config = trainer.config_from_dict(json.loads(cfg_path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad {cfg_path}: {exc}") from exc
    kappa = args.kappa if args.kappa is not None else (trace.config.kappa if trace.config else 5.0)
    verdict = analysis.verify_trace(trace, analysis.compute_m_kappa(kappa), args.mode, args.learning_rate)
    print(json.dumps(verdict.to_dict(), sort_keys=True))
    return EXIT_OK if verdict.passed else EXIT_CHECK


def cmd_deadlock(args) -> int:
    report = analysis.deadlock_demo(args.c, args.kappa, args.dim, args.seed)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK if report.passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conflict-gate", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, train=False):
        p.add_argument("--spec", help="experiment spec (JSON)")
        p.add_argument("--seed", type=int, help=f"single seed; overrides the spec and ${SEED_ENV}")
        p.add_argument("--out", help="output directory (default: the spec's output_dir)")
        if train:
            p.add_argument("--strategy", help="strategy name (ablation: comma-separated list)")
            p.add_argument("--theory-mode", action="store_true", help="alpha = 0 with plain gradient descent")
            p.add_argument("--learning-rate", type=float, help="force the step size")
            p.add_argument("--jobs", type=int, help="parallel workers (default: all cores)")

    p = sub.add_parser("simulate", help="write truth.csv and dataset.csv")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("train", help="train strategy/seed cells")
    common(p, train=True)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("ablation", help="train all cells and compare strategies")
    common(p, train=True)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("verify", help="check descent and rate guarantees on a trace")
    p.add_argument("trace", help="trace.csv (a sibling config.json is used when present)")
    p.add_argument("--mode", choices=analysis.VERIFY_MODES, default="all")
    p.add_argument("--kappa", type=float)
    p.add_argument("--learning-rate", type=float)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("deadlock", help="anti-parallel gradient demonstration")
    p.add_argument("--c", type=float, default=2.0, help="g_data = -c g_phy")
    p.add_argument("--kappa", type=float, default=5.0)
    p.add_argument("--dim", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_deadlock)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (ConflictGateError, ValueError, OSError) as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
