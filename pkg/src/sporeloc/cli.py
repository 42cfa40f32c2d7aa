"""Command-line driver: ``sporeloc {gen-data,solve-once,gradcheck,experiment}``.

Settings come from an optional INI file (section ``[run]``, key
``schema_version = 1``) and are overridden by flags.  Exit codes: 0 ok,
2 invalid configuration or input, 3 inner solve did not converge, 4 I/O.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .admm_layer import AdmmConfig, solve
from .datagen import TARGET_KINDS, make_experiment_data
from .qp_core import BLOCK_NAMES, QPError
from .relocation import InstanceError, RelocationInstance, plan_violations, to_standard_qp
from .spo import REGIMES, RelocationLayer, SpoConfig, calibrate_budget, evaluate_policy, train_pto, train_spo

log = logging.getLogger("sporeloc")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # city and data
    rows: int = 4
    cols: int = 4
    days: int = 14
    gamma: float = 0.6
    target: str = "uniform"
    mean_level: float = 8.0
    speed_kmh: float = 20.0
    unit_cost: float = 1.0
    interval: float = 15.0
    window: int = 12
    seed: int = 0
    # relocation
    budget: str = "auto"
    budget_quantile: float = 0.75
    # ADMM (training) and evaluation solves
    rho: float = 2.0
    xi: float = 0.05
    k_max: int = 2000
    equilibrate: bool = True
    eval_xi: float = 1e-9
    eval_k_max: int = 20000
    # learning
    w1: float = 1.0
    w2: float = 1.0
    learning_rate: float = 0.01
    weight_decay: float = 0.001
    batch_size: int = 64
    epochs: int = 100
    hidden: int = 16
    train_seeds: str = "0"
    regimes: str = "SPO,PTO,NOP,DON"
    # gradient checks
    gc_grids: int = 4
    gc_instances: int = 50
    gc_step: float = 1e-4
    gc_tolerance: float = 1e-3
    out: str = "runs/default"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            try:
                if f.type in ("int", int):
                    value = int(value)
                elif f.type in ("float", float):
                    value = float(value)
                elif f.type in ("bool", bool) and isinstance(value, str):
                    if value.strip().lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                        raise ValueError(value)
                    value = value.strip().lower() in ("1", "true", "yes", "on")
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{f.name}: cannot parse {value!r} as {f.type}") from exc
            setattr(self, f.name, value)
        self.target = self.target.lower()

    def validate(self) -> None:
        """Check every module's invariants before any work starts."""
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.rows >= 1 and self.cols >= 1, "rows and cols must be >= 1")
        need(self.days >= 1, "days must be >= 1")
        need(0.0 < self.gamma < 1.0, "gamma must be in (0, 1)")
        need(self.target in TARGET_KINDS, f"target must be one of {TARGET_KINDS}")
        need(self.mean_level > 0 and self.speed_kmh > 0 and self.interval > 0, "mean_level, speed_kmh and interval must be > 0")
        need(self.unit_cost >= 0, "unit_cost must be >= 0")
        need(self.window >= 1, "window must be >= 1")
        need(0.0 <= self.budget_quantile <= 1.0, "budget_quantile must be in [0, 1]")
        if self.budget != "auto":
            try:
                need(float(self.budget) >= 0, "budget must be >= 0")
            except ValueError as exc:
                raise ConfigError(f"budget must be 'auto' or a number, got {self.budget!r}") from exc
        need(all(r in REGIMES for r in self.regime_list), f"regimes must be drawn from {REGIMES}")
        need(len(self.seed_list) >= 1, "train_seeds must list at least one seed")
        need(self.gc_grids >= 1 and self.gc_instances >= 1 and self.gc_step > 0, "bad gradient-check settings")
        try:
            self.admm()
            self.eval_admm()
            self.spo()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def regime_list(self) -> list:
        return [r.strip().upper() for r in self.regimes.split(",") if r.strip()]

    @property
    def seed_list(self) -> list:
        try:
            return [int(s) for s in str(self.train_seeds).split(",") if s.strip()]
        except ValueError as exc:
            raise ConfigError(f"train_seeds must be comma-separated integers, got {self.train_seeds!r}") from exc

    def admm(self) -> AdmmConfig:
        return AdmmConfig(self.rho, self.xi, self.k_max, self.equilibrate)

    def eval_admm(self) -> AdmmConfig:
        return AdmmConfig(self.rho, self.eval_xi, self.eval_k_max, self.equilibrate)

    def spo(self, seed: int = 0) -> SpoConfig:
        return SpoConfig(
            self.w1, self.w2, self.learning_rate, self.weight_decay, self.batch_size,
            self.epochs, self.hidden, self.window, seed,
        )

    def to_ini(self) -> str:
        lines = ["[run]", f"schema_version = {SCHEMA_VERSION}"]
        lines += [f"{k} = {v}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"


def load_config(path) -> dict:
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError:
        raise
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not parser.has_section("run"):
        raise ConfigError(f"{path}: missing [run] section")
    values = dict(parser["run"])
    version = values.pop("schema_version", None)
    if version is None or version.strip() != str(SCHEMA_VERSION):
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    return values


def versions() -> dict:
    import scipy

    from ._kernels import HAVE_NUMBA, default_backend

    if HAVE_NUMBA:
        import numba

    return {
        "sporeloc": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__ if HAVE_NUMBA else None,
        "backend": default_backend(),
    }


def write_manifest(out: Path, cfg: RunConfig, command: str, extra: dict | None = None) -> None:
    manifest = {
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "config": asdict(cfg),
        "seeds": {"data": cfg.seed, "train": cfg.seed_list},
        "versions": versions(),
    }
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    (out / "config.ini").write_text(cfg.to_ini())


def _data(cfg: RunConfig):
    return make_experiment_data(
        cfg.rows, cfg.cols, cfg.days, cfg.gamma, cfg.seed, cfg.target, cfg.window,
        cfg.mean_level, cfg.speed_kmh, cfg.unit_cost,
    )


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = _data(cfg)
    data.series.to_csv(out / "demand.csv")
    data.grid.save(out / "grid.json")
    with open(out / "target.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["interval", "grid", "target"])
        for t, row in enumerate(data.target):
            for i, v in enumerate(row):
                w.writerow([t, i, repr(float(v))])
    write_manifest(out, cfg, "gen-data")
    print(f"wrote {data.series.n_intervals} intervals x {data.series.n_grids} grids to {out}")
    return EXIT_OK


def cmd_solve_once(cfg: RunConfig, instance_path: str) -> int:
    """Solve one instance file.  ``predicted_free`` (optional) defaults to zeros."""
    try:
        raw = json.loads(Path(instance_path).read_text())
    except json.JSONDecodeError as exc:
        raise InstanceError("<json>", f"{instance_path}: {exc}") from exc
    inst = RelocationInstance.from_dict(raw)
    free = np.asarray(raw.get("predicted_free", np.zeros(inst.n_grids)), dtype=np.float64)
    if free.shape != (inst.n_grids,):
        raise InstanceError("predicted_free", f"expected length {inst.n_grids}, got shape {free.shape}")
    qp = to_standard_qp(inst, inst.target - free)
    res = solve(qp, cfg.eval_admm())
    viol = plan_violations(inst, res.y)
    report = {
        "objective": res.objective + qp.offset,
        "objective_z1": res.objective,
        "iterations": res.iterations,
        "converged": res.converged,
        "kkt": {
            "stationarity": res.kkt.stationarity,
            "primal_infeasibility": res.kkt.primal_infeasibility,
            "complementarity": res.kkt.complementarity,
        },
        "slack": {name: float(np.min(h - g @ res.y, initial=np.inf)) for name, g, h in zip(BLOCK_NAMES, qp.G, qp.h)},
        "violations": viol,
        "flows": res.y.reshape(inst.n_grids, inst.n_grids).tolist(),
    }
    print(json.dumps(report, indent=1))
    if not res.converged:
        log.error("solve did not converge within k_max=%d", cfg.eval_k_max)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    from . import gradcheck as gc

    insts = gc.nondegenerate_instances(cfg.gc_instances, cfg.gc_grids, cfg.seed)
    layer = [gc.check_layer_jacobian(i, f, step=cfg.gc_step).rel_error for i, f in insts]
    results = {
        "admm_layer": max(layer) if layer else float("nan"),
        "predictor": max(gc.check_predictor(cfg.seed + k) for k in range(3)),
        "end_to_end": gc.check_end_to_end(cfg.seed),
    }
    tol = {"admm_layer": cfg.gc_tolerance, "predictor": cfg.gc_tolerance, "end_to_end": 1e-2}
    ok = True
    print(f"admm_layer: {len(layer)} non-degenerate N={cfg.gc_grids} instances")
    for name, err in results.items():
        passed = err <= tol[name]
        ok &= passed
        print(f"{name:12s} max rel err {err:.3e}  tol {tol[name]:.0e}  {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else 1


def run_experiment(cfg: RunConfig) -> dict:
    """Train and evaluate every regime for each training seed; returns the summary."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    stage = "data"
    try:
        data = _data(cfg)
        stage = "budget"
        budget = calibrate_budget(data, cfg.eval_admm(), cfg.budget_quantile) if cfg.budget == "auto" else float(cfg.budget)
        layer = RelocationLayer(data.travel_time, data.cost, budget, cfg.eval_admm(), cfg.interval)
        per_seed = {}
        for seed in cfg.seed_list:
            weights = {}
            if "PTO" in cfg.regime_list:
                stage = f"train PTO seed {seed}"
                weights["PTO"], rec = train_pto(data, cfg.spo(seed), cfg.eval_admm(), budget)
                rec.to_csv(out / f"train_pto_seed{seed}.csv")
                weights["PTO"].save(out / f"weights_pto_seed{seed}.json")
            if "SPO" in cfg.regime_list:
                stage = f"train SPO seed {seed}"
                weights["SPO"], rec = train_spo(data, cfg.spo(seed), cfg.admm(), budget, cfg.eval_admm())
                rec.to_csv(out / f"train_spo_seed{seed}.csv")
                weights["SPO"].save(out / f"weights_spo_seed{seed}.json")
            rows = {}
            for regime in cfg.regime_list:
                stage = f"evaluate {regime} seed {seed}"
                res = evaluate_policy(weights.get(regime), data, data.test, regime, layer)
                rows[regime] = {**res.metrics.summary(), "max_violation": res.max_violation}
                _write_divergence(out / f"divergence_{regime.lower()}_seed{seed}.csv", res)
            per_seed[seed] = rows
    except OSError:
        raise
    except Exception as exc:
        raise RuntimeError(f"experiment failed during {stage}: {exc}") from exc
    table = {
        r: {
            "rmse": float(np.mean([per_seed[s][r]["rmse"] for s in per_seed])),
            "smape": float(np.mean([per_seed[s][r]["smape"] for s in per_seed])),
        }
        for r in cfg.regime_list
    }
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["regime", "rmse", "smape"])
        for r, v in table.items():
            w.writerow([r, repr(v["rmse"]), repr(v["smape"])])
    summary = {"budget": budget, "table": table, "per_seed": {str(k): v for k, v in per_seed.items()}}
    (out / "results.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    write_manifest(out, cfg, "experiment", {"resolved_budget": budget})
    return summary


def _write_divergence(path: Path, res) -> None:
    from .metrics import write_divergence_csv

    write_divergence_csv(path, res.matched, res.target, res.t)


def cmd_experiment(cfg: RunConfig) -> int:
    summary = run_experiment(cfg)
    print(f"budget {summary['budget']:g}")
    print(f"{'regime':8s} {'RMSE':>10s} {'SMAPE':>10s}")
    for r, v in summary["table"].items():
        print(f"{r:8s} {v['rmse']:10.4f} {v['smape']:10.3f}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sporeloc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [run] section")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        common.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    sub.add_parser("gen-data", parents=[common], help="write demand CSV, grid and target files")
    so = sub.add_parser("solve-once", parents=[common], help="solve one relocation instance JSON")
    so.add_argument("instance")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    sub.add_parser("experiment", parents=[common], help="train and compare SPO/PTO/NOP/DON")
    return p


def resolve_config(args) -> RunConfig:
    values = load_config(args.config) if args.config else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg)
        if args.command == "solve-once":
            return cmd_solve_once(cfg, args.instance)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        return cmd_experiment(cfg)
    except (ConfigError, InstanceError, QPError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
