"""Dual-mode receding-horizon controllers built on the synthesis SDP.

While the optimal cost bound is above the invariance threshold the
controller re-solves at every state. Once it drops to the threshold the
gain from the previous step is frozen and applied for good.
"""

import csv
import enum
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .consistency import MultiplierMode, push_online
from .numerics import CostWeights, min_eigenvalue, weighted_norm_sq
from .plant import ConfigError, ConstraintSet, Diverged
from .sdp import (Certificate, SdpSolution, SolveStatus, SolverOptions, assemble_adaptive,
                  assemble_robust, extract_certificate, solve)

log = logging.getLogger(__name__)


class InitialInfeasible(RuntimeError):
    def __init__(self, c, status):
        super().__init__(
            f"synthesis problem infeasible at the initial state for c = {c:g} "
            f"(solver status {status.value}); try a larger c and reduce it gradually")
        self.c = c
        self.status = status


class SolverFailed(RuntimeError):
    def __init__(self, step, status, diagnostics):
        super().__init__(f"solve failed at step {step} with status {status.value}")
        self.step = step
        self.status = status
        self.diagnostics = diagnostics


class Mode(enum.Enum):
    RECEDING = "RECEDING"
    STATIC = "STATIC"


class Scheme(enum.Enum):
    ROBUST = "robust"
    ADAPTIVE = "adaptive"
    STATIC_FROM_T0 = "static"


@dataclass(frozen=True)
class MpcConfig:
    c: float
    weights: CostWeights
    constraints: ConstraintSet
    G: np.ndarray
    multiplier_mode: MultiplierMode = MultiplierMode.FULL_MULTIPLIERS
    solver: SolverOptions = SolverOptions()
    max_online_blocks: int | None = None

    def __post_init__(self):
        if not self.c > 0:
            raise ConfigError("c must be positive")

    @property
    def provably_infeasible(self):
        # Q <= P < cI has no solution once c <= lambda_min(Q)
        return self.c <= min_eigenvalue(self.weights.Q)

    @property
    def rpi_threshold(self):
        return self.c ** 2 / (min_eigenvalue(self.weights.Q) * min_eigenvalue(self.G))

    @property
    def contraction(self):
        return 1.0 - min_eigenvalue(self.weights.Q) / self.c


@dataclass(frozen=True)
class StepRecord:
    t: int
    mode: Mode
    gamma: float
    V: float
    stage_cost: float
    solve_ms: float
    u: np.ndarray
    x: np.ndarray
    margin_u: float
    margin_x: float


@dataclass(frozen=True)
class ControllerState:
    cset: object
    mode: Mode = Mode.RECEDING
    frozen: Certificate | None = None
    last_certificate: Certificate | None = None
    step: int = 0
    prev: tuple | None = None
    history: tuple = ()
    certificates: tuple = ()
    warnings: tuple = ()


def _record(state, cfg, x, u, mode, gamma, V, solve_ms):
    rec = StepRecord(state.step, mode, gamma, V, cfg.weights.stage_cost(u, x), solve_ms,
                     np.array(u, dtype=float), np.array(x, dtype=float),
                     cfg.constraints.input_margin(u), cfg.constraints.state_margin(x))
    return rec


def _solve_at(cset, x, cfg, adaptive):
    if cfg.provably_infeasible:
        sol = SdpSolution(float("nan"), None, None, None, None, SolveStatus.INFEASIBLE,
                          float("inf"), None, {"reason": "c <= lambda_min(Q)"})
        return None, sol, 0.0
    build = assemble_adaptive if adaptive else assemble_robust
    problem = build(cset, x, cfg.weights, cfg.constraints, cfg.c, cfg.solver.strict_margin)
    t0 = time.perf_counter()
    sol = solve(problem, cfg.solver)
    ms = 1e3 * (time.perf_counter() - t0)
    return problem, sol, ms


def _step(state, x_t, cfg, adaptive):
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float)).ravel()
    if state.mode is Mode.STATIC:
        cert = state.frozen
        u = cert.F @ x_t
        rec = _record(state, cfg, x_t, u, Mode.STATIC, float("nan"),
                      weighted_norm_sq(x_t, cert.P), 0.0)
        return u, replace(state, step=state.step + 1, prev=(x_t, u),
                          history=state.history + (rec,),
                          certificates=state.certificates + (cert,))

    cset = state.cset
    if adaptive and state.prev is not None:
        cap = cfg.max_online_blocks
        if cap is None or len(cset.online) < cap:
            cset = push_online(cset, state.prev[0], state.prev[1], x_t)
    _, sol, ms = _solve_at(cset, x_t, cfg, adaptive)
    if sol.status is not SolveStatus.OPTIMAL:
        if state.step == 0:
            raise InitialInfeasible(cfg.c, sol.status)
        raise SolverFailed(state.step, sol.status, sol.diagnostics)
    cert = extract_certificate(sol)
    theta = cfg.rpi_threshold
    warnings = state.warnings
    if cert.gamma > theta:
        u = cert.F @ x_t
        rec = _record(state, cfg, x_t, u, Mode.RECEDING, cert.gamma,
                      weighted_norm_sq(x_t, cert.P), ms)
        return u, replace(state, cset=cset, last_certificate=cert, step=state.step + 1,
                          prev=(x_t, u), history=state.history + (rec,),
                          certificates=state.certificates + (cert,))
    if state.last_certificate is None:
        msg = (f"optimal bound {cert.gamma:.4g} is already below the invariance threshold "
               f"{theta:.4g} at t=0; freezing the initial gain")
        log.warning(msg)
        warnings = warnings + (msg,)
        frozen = cert
    else:
        frozen = state.last_certificate
    u = frozen.F @ x_t
    rec = _record(state, cfg, x_t, u, Mode.STATIC, cert.gamma,
                  weighted_norm_sq(x_t, frozen.P), ms)
    return u, replace(state, cset=cset, mode=Mode.STATIC, frozen=frozen,
                      last_certificate=cert, step=state.step + 1, prev=(x_t, u),
                      history=state.history + (rec,),
                      certificates=state.certificates + (frozen,), warnings=warnings)


def robust_step(state, x_t, cfg):
    """One step of the offline-data controller. Returns ``(u_t, new_state)``."""
    return _step(state, x_t, cfg, adaptive=False)


def adaptive_step(state, x_t, cfg):
    """One step of the controller that also learns from closed-loop data."""
    return _step(state, x_t, cfg, adaptive=True)


def _static_step(state, x_t, cfg):
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float)).ravel()
    if state.frozen is None:
        _, sol, ms = _solve_at(state.cset, x_t, cfg, adaptive=False)
        if sol.status is not SolveStatus.OPTIMAL:
            raise InitialInfeasible(cfg.c, sol.status)
        cert = extract_certificate(sol)
        state = replace(state, mode=Mode.STATIC, frozen=cert, last_certificate=cert)
        gamma = cert.gamma
    else:
        cert, gamma, ms = state.frozen, float("nan"), 0.0
    u = cert.F @ x_t
    rec = _record(state, cfg, x_t, u, Mode.STATIC, gamma, weighted_norm_sq(x_t, cert.P), ms)
    return u, replace(state, step=state.step + 1, prev=(x_t, u),
                      history=state.history + (rec,),
                      certificates=state.certificates + (cert,))


@dataclass
class RunLog:
    """Per-step closed-loop log plus the certificate in force at each step."""

    rows: list
    scheme: Scheme
    meta: dict = field(default_factory=dict)
    certificates: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    @property
    def n(self):
        return self.rows[0].x.size if self.rows else self.meta.get("n", 0)

    @property
    def m(self):
        return self.rows[0].u.size if self.rows else self.meta.get("m", 0)

    def states(self):
        return np.array([r.x for r in self.rows])

    def inputs(self):
        return np.array([r.u for r in self.rows])

    def modes(self):
        return [r.mode for r in self.rows]

    def to_csv(self, path):
        m, n = self.m, self.n
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "mode", "gamma", "V", "stage_cost", "solve_ms"]
                       + [f"u_{i}" for i in range(m)] + [f"x_{i}" for i in range(n)]
                       + ["margin_u", "margin_x"])
            for r in self.rows:
                w.writerow([r.t, r.mode.value] + [repr(float(v)) for v in
                           (r.gamma, r.V, r.stage_cost, r.solve_ms, *r.u, *r.x,
                            r.margin_u, r.margin_x)])

    def sidecar(self):
        return {
            "scheme": self.scheme.value,
            "meta": self.meta,
            "certificates": [
                None if c is None else {"F": c.F.tolist(), "P": c.P.tolist(), "gamma": c.gamma}
                for c in self.certificates
            ],
        }

    def save(self, csv_path, json_path):
        self.to_csv(csv_path)
        with open(json_path, "w") as fh:
            json.dump(self.sidecar(), fh, indent=1)

    @classmethod
    def from_csv(cls, path, scheme=Scheme.ROBUST, sidecar=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        m = sum(h.startswith("u_") for h in header)
        n = sum(h.startswith("x_") for h in header)
        recs = []
        for r in body:
            vals = [float(v) for v in r[2:]]
            recs.append(StepRecord(int(r[0]), Mode(r[1]), vals[0], vals[1], vals[2], vals[3],
                                   np.array(vals[4:4 + m]), np.array(vals[4 + m:4 + m + n]),
                                   vals[4 + m + n], vals[5 + m + n]))
        meta, certs = {}, []
        if sidecar is not None:
            scheme = Scheme(sidecar["scheme"])
            meta = sidecar["meta"]
            certs = [None if c is None else
                     Certificate(np.array(c["F"]), np.array(c["P"]), c["gamma"])
                     for c in sidecar["certificates"]]
        return cls(recs, Scheme(scheme), meta, certs)

    @classmethod
    def load(cls, csv_path, json_path):
        with open(json_path) as fh:
            side = json.load(fh)
        return cls.from_csv(csv_path, sidecar=side)


def run_closed_loop(plant, cfg, scheme, x0, steps, noise, cset):
    """Simulate ``steps`` closed-loop steps of ``scheme`` from ``x0``.

    ``cset`` is the consistency set built from offline data; its
    multiplier mode is overridden by ``cfg.multiplier_mode``.
    """
    scheme = Scheme(scheme)
    cset = cset.with_mode(cfg.multiplier_mode)
    state = ControllerState(cset)
    meta = {"c": cfg.c, "rpi_threshold": cfg.rpi_threshold, "contraction": cfg.contraction,
            "n": plant.n, "m": plant.m, "mode": cfg.multiplier_mode.value}
    step_fn = {Scheme.ROBUST: robust_step, Scheme.ADAPTIVE: adaptive_step,
               Scheme.STATIC_FROM_T0: _static_step}[scheme]
    x = np.atleast_1d(np.asarray(x0, dtype=float)).ravel()
    for t in range(steps):
        u, state = step_fn(state, x, cfg)
        with np.errstate(over="ignore", invalid="ignore"):
            x = plant.step(x, u, noise.sample())
        if not np.all(np.isfinite(x)):
            raise Diverged(t + 1)
    meta["warnings"] = list(state.warnings)
    meta["online_blocks"] = len(state.cset.online)
    if state.history:
        meta["final_state"] = x.tolist()
    return RunLog(list(state.history), scheme, meta, list(state.certificates))
