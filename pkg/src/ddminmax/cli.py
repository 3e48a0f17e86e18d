"""Command-line front end: ``ddminmax collect|run|compare|audit|sweep``.

Configuration is a flat JSON object with dotted keys, for example::

    {"scenario.name": "suspension", "mpc.c": 5e7, "mpc.steps": 150, "seed": 0}

Exit codes: 0 success, 1 audit failure, 2 configuration or I/O error,
3 infeasible at the initial state.
"""

import argparse
import csv
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import __version__
from .analysis import (AuditReport, audit_run, closed_loop_metrics, noise_sweep,
                       verify_cost_bound, verify_sprocedure_constraints)
from .consistency import MultiplierMode, NotInSet, build_offline
from .controller import InitialInfeasible, MpcConfig, RunLog, Scheme, SolverFailed, run_closed_loop
from .numerics import CostWeights, DimError, InvalidMatrix, NotPsd
from .plant import (ConfigError, ConstraintSet, DataRecord, LtiPlant, NoiseSampler, Scenario,
                    builtin_scenario, collect_offline)
from .sdp import SolverOptions

OUT_ENV = "DDMINMAX_OUT"

EXIT_OK, EXIT_AUDIT, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 1, 2, 3

_MATRIX_KEYS = ("A", "B", "G", "Q", "R", "S_u", "S_x")


@dataclass
class ExperimentConfig:
    scenario: str = "suspension"
    matrices: dict = field(default_factory=dict)
    x0: list | None = None
    c: float | None = None
    T_f: int | None = None
    steps: int | None = None
    input_range: list | None = None
    noise_eps: float | None = None
    seed: int = 0
    scheme: str = "robust"
    schemes: list = field(default_factory=lambda: ["static", "robust", "adaptive"])
    multiplier_mode: str = "full"
    max_online_blocks: int | None = None
    solver: dict = field(default_factory=dict)
    out_dir: str | None = None
    plots: bool = True
    sweep: dict = field(default_factory=dict)

    _KEYS = {
        "scenario.name": "scenario", "scenario.x0": "x0", "scenario.T_f": "T_f",
        "scenario.input_range": "input_range", "scenario.noise_eps": "noise_eps",
        "mpc.c": "c", "mpc.steps": "steps", "mpc.scheme": "scheme", "mpc.schemes": "schemes",
        "mpc.multiplier_mode": "multiplier_mode", "mpc.max_online_blocks": "max_online_blocks",
        "output.dir": "out_dir", "output.plots": "plots", "seed": "seed",
    }

    @classmethod
    def from_flat(cls, flat):
        cfg = cls()
        for key, val in flat.items():
            if key in cls._KEYS:
                setattr(cfg, cls._KEYS[key], val)
            elif key.startswith("scenario.") and key.split(".", 1)[1] in _MATRIX_KEYS:
                cfg.matrices[key.split(".", 1)[1]] = val
            elif key.startswith("solver."):
                name = key.split(".", 1)[1]
                if name not in {f.name for f in fields(SolverOptions)}:
                    raise ConfigError(f"unknown solver option {name!r}")
                cfg.solver[name] = val
            elif key.startswith("sweep."):
                cfg.sweep[key.split(".", 1)[1]] = val
            else:
                raise ConfigError(f"unknown config key {key!r}")
        cfg.validate()
        return cfg

    def to_flat(self):
        flat = {k: getattr(self, a) for k, a in self._KEYS.items()}
        flat.update({f"scenario.{k}": v for k, v in self.matrices.items()})
        flat.update({f"solver.{k}": v for k, v in self.solver.items()})
        flat.update({f"sweep.{k}": v for k, v in self.sweep.items()})
        return flat

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                flat = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        if not isinstance(flat, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_flat(flat)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_flat(), fh, indent=1)

    def validate(self):
        self.build_scenario()
        Scheme(self.scheme)
        [Scheme(s) for s in self.schemes]
        MultiplierMode(self.multiplier_mode)

    def build_scenario(self):
        """Scenario with inline overrides applied; validates dimensions."""
        try:
            if self.scenario == "custom":
                missing = [k for k in _MATRIX_KEYS if k not in self.matrices]
                if missing or self.x0 is None:
                    raise ConfigError(f"custom scenario needs {missing + (['x0'] if self.x0 is None else [])}")
                base = None
            else:
                base = builtin_scenario(self.scenario)
            mat = {k: np.atleast_2d(np.asarray(v, dtype=float)) for k, v in self.matrices.items()}
            plant = LtiPlant(mat.get("A", base.plant.A_s if base else None),
                             mat.get("B", base.plant.B_s if base else None),
                             mat.get("G", base.plant.G if base else None))
            weights = CostWeights(mat.get("Q", base.weights.Q if base else None),
                                  mat.get("R", base.weights.R if base else None))
            cons = ConstraintSet(mat.get("S_u", base.constraints.S_u if base else None),
                                 mat.get("S_x", base.constraints.S_x if base else None))
            if self.noise_eps is not None:
                plant = LtiPlant(plant.A_s, plant.B_s, np.eye(plant.n) / float(self.noise_eps) ** 2)
            x0 = np.asarray(self.x0 if self.x0 is not None else base.x0, dtype=float).ravel()
            if weights.n != plant.n or weights.m != plant.m or x0.size != plant.n:
                raise ConfigError("weights or x0 do not match the plant dimensions")
            if cons.S_u.shape[0] != plant.m or cons.S_x.shape[0] != plant.n:
                raise ConfigError("constraint matrices do not match the plant dimensions")
            sc = Scenario(self.scenario, plant, weights, cons, x0,
                          float(self.c if self.c is not None else (base.c if base else 1e3)),
                          int(self.T_f if self.T_f is not None else (base.T_f if base else 20)),
                          int(self.steps if self.steps is not None else (base.steps if base else 20)),
                          tuple(self.input_range) if self.input_range else (-5.0, 5.0))
        except (DimError, InvalidMatrix, NotPsd, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid scenario: {exc}") from None
        if sc.T_f < 1:
            raise ConfigError("T_f must be at least 1")
        if sc.steps < 0:
            raise ConfigError("steps must be nonnegative")
        return sc

    def mpc(self, scenario):
        return MpcConfig(scenario.c, scenario.weights, scenario.constraints, scenario.plant.G,
                         MultiplierMode(self.multiplier_mode), SolverOptions(**self.solver),
                         self.max_online_blocks)


def _plant_hash(plant):
    h = hashlib.sha256()
    for M in (plant.A_s, plant.B_s, plant.G):
        h.update(np.ascontiguousarray(M, dtype=float).tobytes())
    return h.hexdigest()[:16]


def _out_dir(args, cfg):
    out = args.out or cfg.out_dir or os.environ.get(OUT_ENV) or "out"
    os.makedirs(out, exist_ok=True)
    return out


def _load_config(args):
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "scenario", None):
        cfg.scenario = args.scenario
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "c", None) is not None:
        cfg.c = args.c
    if getattr(args, "scheme", None):
        cfg.scheme = args.scheme
    if getattr(args, "steps", None) is not None:
        cfg.steps = args.steps
    if getattr(args, "T_f", None) is not None:
        cfg.T_f = args.T_f
    if getattr(args, "mode", None):
        cfg.multiplier_mode = args.mode
    if getattr(args, "schemes", None):
        cfg.schemes = [s.strip() for s in args.schemes.split(",") if s.strip()]
    if getattr(args, "no_plots", False):
        cfg.plots = False
    cfg.validate()
    return cfg


def _collect(cfg, sc, out):
    data = collect_offline(sc, cfg.seed)
    path = os.path.join(out, "data.csv")
    data.to_csv(path)
    meta = {"seed": cfg.seed, "G": sc.plant.G.tolist(), "plant_hash": _plant_hash(sc.plant),
            "T_f": data.T, "input_range": list(sc.input_range), "scenario": sc.name,
            "rng": "numpy.default_rng (PCG64)", "version": __version__}
    with open(os.path.join(out, "data.meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
    return data, path


def _load_data(args, cfg, sc, out):
    path = getattr(args, "data", None) or os.path.join(out, "data.csv")
    if not os.path.exists(path):
        if getattr(args, "data", None):
            raise FileNotFoundError(path)
        return _collect(cfg, sc, out)[0]
    data = DataRecord.from_csv(path, sc.plant.G)
    if data.n != sc.plant.n or data.m != sc.plant.m:
        raise ConfigError(f"{path}: data dimensions do not match the scenario")
    return data


def _run_one(cfg, sc, data, scheme, out):
    mpc = cfg.mpc(sc)
    cset = build_offline(data)
    noise = NoiseSampler(sc.plant.G, cfg.seed + 17)
    log = run_closed_loop(sc.plant, mpc, Scheme(scheme), sc.x0, sc.steps, noise, cset)
    log.meta.update({"seed": cfg.seed, "scenario": sc.name})
    stem = os.path.join(out, f"run_{Scheme(scheme).value}")
    log.save(stem + ".csv", stem + ".json")
    return log, stem


def _summary(log):
    if not log.rows:
        return {"steps": 0, "total_cost": 0.0, "mean_solve_ms": 0.0, "rpi_entry_step": None,
                "worst_margin": None}
    m = closed_loop_metrics(log)
    return {"steps": len(log), "total_cost": m.total_cost, "mean_solve_ms": m.mean_solve_ms,
            "rpi_entry_step": m.rpi_entry_step, "worst_margin": m.worst_margin}


def cmd_collect(args):
    cfg = _load_config(args)
    sc = cfg.build_scenario()
    out = _out_dir(args, cfg)
    cfg.save(os.path.join(out, "config.json"))
    _, path = _collect(cfg, sc, out)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_run(args):
    cfg = _load_config(args)
    sc = cfg.build_scenario()
    out = _out_dir(args, cfg)
    cfg.save(os.path.join(out, "config.json"))
    data = _load_data(args, cfg, sc, out)
    log, stem = _run_one(cfg, sc, data, cfg.scheme, out)
    summ = _summary(log)
    with open(stem + "_summary.txt", "w") as fh:
        for k, v in summ.items():
            fh.write(f"{k}: {v}\n")
    if cfg.plots and log.rows:
        from .plotting import plot_run
        plot_run(stem + ".csv", stem)
    for w in log.meta.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)
    print(" ".join(f"{k}={v}" for k, v in summ.items()))
    return EXIT_OK


def cmd_compare(args):
    cfg = _load_config(args)
    if len(cfg.schemes) < 2:
        raise ConfigError("compare needs at least two schemes")
    sc = cfg.build_scenario()
    out = _out_dir(args, cfg)
    cfg.save(os.path.join(out, "config.json"))
    data = _load_data(args, cfg, sc, out)
    rows = []
    for scheme in cfg.schemes:
        log, stem = _run_one(cfg, sc, data, scheme, out)
        if cfg.plots and log.rows:
            from .plotting import plot_run
            plot_run(stem + ".csv", stem)
        rows.append({"scheme": Scheme(scheme).value, **_summary(log)})
    keys = ["scheme", "total_cost", "mean_solve_ms", "rpi_entry_step", "worst_margin", "steps"]
    with open(os.path.join(out, "compare.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, keys)
        w.writeheader()
        w.writerows(rows)
    text = "\n".join(f"{r['scheme']:<10} cost={r['total_cost']:.6g} "
                     f"solve_ms={r['mean_solve_ms']:.4g} rpi_entry={r['rpi_entry_step']}"
                     for r in rows)
    with open(os.path.join(out, "compare.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_audit(args):
    cfg = _load_config(args)
    sc = cfg.build_scenario()
    out = _out_dir(args, cfg)
    runs = sorted(glob.glob(os.path.join(out, "run_*.csv")))
    if args.run:
        runs = [p for p in runs if os.path.basename(p) == f"run_{args.run}.csv"]
    data_path = os.path.join(out, "data.csv")
    if not runs or not os.path.exists(data_path):
        raise FileNotFoundError(f"no run artifacts in {out}")
    data = DataRecord.from_csv(data_path, sc.plant.G)
    cset = build_offline(data)
    report = AuditReport()
    for path in runs:
        side = path[:-4] + ".json"
        if not os.path.exists(side):
            raise FileNotFoundError(side)
        log = RunLog.load(path, side)
        part = audit_run(log)
        tag = os.path.basename(path)[:-4]
        for chk in part.checks:
            report.checks.append(replace(chk, name=f"{tag}:{chk.name}"))
        if log.rows:
            cert = log.certificates[0]
            x0 = log.rows[0].x
            try:
                cb = verify_cost_bound(cert, cset, x0, args.samples, 200, cfg.seed, sc.weights,
                                       center=(sc.plant.A_s, sc.plant.B_s))
            except NotInSet:
                cb = verify_cost_bound(cert, cset, x0, args.samples, 200, cfg.seed, sc.weights)
            sp = verify_sprocedure_constraints(cert, sc.constraints, args.samples, cfg.seed)
            for chk in cb.checks + sp.checks:
                report.checks.append(replace(chk, name=f"{tag}:{chk.name}"))
            report.info[f"{tag}:sampled_gap"] = cb.info.get("sampled_gap")
    with open(os.path.join(out, "audit.txt"), "w") as fh:
        fh.write(report.to_text() + "\n")
    with open(os.path.join(out, "audit.csv"), "w") as fh:
        fh.write(report.to_csv())
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_AUDIT


def cmd_sweep(args):
    cfg = _load_config(args)
    sc = cfg.build_scenario()
    out = _out_dir(args, cfg)
    sw = {"eps_min": 1e-4, "eps_max": 2.0, "points": 9, "seeds": [cfg.seed]}
    sw.update(cfg.sweep)
    rows, summary = [], []
    for seed in sw["seeds"]:
        res = noise_sweep(sc, sc.c, int(seed), float(sw["eps_min"]), float(sw["eps_max"]),
                          int(sw["points"]))
        for r in res.grid:
            rows.append({"seed": seed, "eps": r.eps, "feasible": r.feasible,
                         "hypothesis": r.hypothesis, "stable": r.stable,
                         "certified": r.certified, "gamma0": r.gamma0,
                         "threshold": r.threshold, "total_cost": r.total_cost})
        summary.append(f"seed {seed}: feasibility margin {res.feasibility_margin:.3g}, "
                       f"certified margin {res.certified_margin:.3g}")
    path = os.path.join(out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with open(os.path.join(out, "sweep.txt"), "w") as fh:
        fh.write("\n".join(summary) + "\n")
    if cfg.plots:
        from .plotting import plot_sweep
        plot_sweep(path, os.path.join(out, "sweep_cost.svg"))
    print("\n".join(summary))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="ddminmax", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config with dotted keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./out)")
        sp.add_argument("--scenario", choices=["suspension", "scalar", "custom"])
        sp.add_argument("--c", type=float)
        sp.add_argument("--scheme", choices=[s.value for s in Scheme])
        sp.add_argument("--steps", type=int)
        sp.add_argument("--T-f", dest="T_f", type=int)
        sp.add_argument("--mode", choices=[m.value for m in MultiplierMode])
        sp.add_argument("--no-plots", action="store_true")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("collect", help="simulate and store offline data"))
    r = common(sub.add_parser("run", help="closed-loop run of one scheme"))
    r.add_argument("--data", help="offline data CSV (default <out>/data.csv)")
    cp = common(sub.add_parser("compare", help="run several schemes on the same data"))
    cp.add_argument("--data")
    cp.add_argument("--schemes", help="comma separated, e.g. static,robust,adaptive")
    a = common(sub.add_parser("audit", help="audit run artifacts in the output directory"))
    a.add_argument("--run", help="audit only run_<RUN>.csv")
    a.add_argument("--samples", type=int, default=100)
    common(sub.add_parser("sweep", help="noise-robustness sweep"))
    return p


COMMANDS = {"collect": cmd_collect, "run": cmd_run, "compare": cmd_compare,
            "audit": cmd_audit, "sweep": cmd_sweep}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except InitialInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailed as exc:
        print(f"error: {exc}; diagnostics: {exc.diagnostics}", file=sys.stderr)
        return EXIT_AUDIT


if __name__ == "__main__":
    sys.exit(main())
