"""Independent audits of certificates and closed-loop runs.

Nothing here calls the SDP solver except the noise sweep. Certificates
are checked by brute force: nominal rollouts over sampled consistent
models, eigenvalue tests of the Lyapunov inequality, and pointwise checks
on the boundary of the invariant ellipsoid.
"""

import csv
import enum
import io
from dataclasses import dataclass, field

import numpy as np

from .consistency import is_member, sample_members, NotInSet
from .controller import Mode, MpcConfig, Scheme, run_closed_loop, InitialInfeasible, SolverFailed
from .numerics import max_eigenvalue, min_eigenvalue, weighted_norm_sq
from .plant import NoiseSampler, LtiPlant, collect_offline
from .consistency import build_offline


class NotStabilizable(RuntimeError):
    """Riccati iteration did not converge."""


class CheckStatus(enum.Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"


@dataclass(frozen=True)
class AuditCheck:
    name: str
    status: CheckStatus
    margin: float
    tolerance: float
    detail: str = ""

    @property
    def passed(self):
        return self.status is not CheckStatus.FAIL


@dataclass
class AuditReport:
    checks: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failed(self):
        return [c for c in self.checks if c.status is CheckStatus.FAIL]

    def add(self, name, margin, tolerance, detail="", inconclusive=False):
        if inconclusive:
            status = CheckStatus.INCONCLUSIVE
        else:
            status = CheckStatus.PASS if margin >= -tolerance else CheckStatus.FAIL
        self.checks.append(AuditCheck(name, status, float(margin), float(tolerance), detail))

    def extend(self, other):
        self.checks.extend(other.checks)
        self.info.update(other.info)
        return self

    def to_text(self):
        lines = []
        for c in self.checks:
            lines.append(f"[{c.status.value.upper():>12}] {c.name:<28} margin={c.margin: .3e} "
                         f"tol={c.tolerance:.1e} {c.detail}".rstrip())
        for k, v in self.info.items():
            lines.append(f"info {k} = {v}")
        lines.append("overall: " + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["check", "margin", "tolerance", "pass"])
        for c in self.checks:
            w.writerow([c.name, repr(c.margin), repr(c.tolerance), c.status.value])
        return buf.getvalue()


@dataclass(frozen=True)
class NominalRollout:
    A: np.ndarray
    B: np.ndarray
    F: np.ndarray
    x0: np.ndarray
    horizon: int
    states: np.ndarray
    inputs: np.ndarray
    cost: float


def nominal_rollout(A, B, F, x0, horizon, weights):
    Acl = A + B @ F
    xs = np.empty((horizon + 1, A.shape[0]))
    xs[0] = x0
    for k in range(horizon):
        xs[k + 1] = Acl @ xs[k]
    us = xs[:-1] @ F.T
    cost = float(np.einsum("ki,ij,kj->", us, weights.R, us)
                 + np.einsum("ki,ij,kj->", xs[:-1], weights.Q, xs[:-1]))
    return NominalRollout(A, B, F, np.asarray(x0, float), horizon, xs, us, cost)


def lyapunov_residual(cert, A, B, weights):
    """``lambda_max((A+BF)'P(A+BF) - P + Q + F'RF)``."""
    Acl = A + B @ cert.F
    M = Acl.T @ cert.P @ Acl - cert.P + weights.Q + cert.F.T @ weights.R @ cert.F
    return max_eigenvalue(M)


def _center(cset, center):
    if center is not None:
        return center
    # least-squares estimate from the stored samples
    X0 = np.array([np.concatenate([b.x, b.u]) for b in cset.blocks])
    X1 = np.array([b.x_next for b in cset.blocks])
    theta, *_ = np.linalg.lstsq(X0, X1, rcond=None)
    AB = theta.T
    return AB[:, :cset.n], AB[:, cset.n:]


def certificate_checks(cert, models, weights, x_t, c, strict_tol=1e-9, tol=1e-8):
    """Lyapunov inequality over ``models`` plus the bound sandwich on ``P``."""
    rep = AuditReport()
    worst = max(lyapunov_residual(cert, A, B, weights) for A, B in models) if models else -np.inf
    rep.add("lyapunov_inequality", -worst - strict_tol, 0.0,
            f"worst lambda_max {worst:.3e} over {len(models)} models")
    rep.add("P_above_Q", min_eigenvalue(cert.P - weights.Q), tol)
    rep.add("P_below_cI", min_eigenvalue(c * np.eye(cert.P.shape[0]) - cert.P), tol)
    rep.add("value_below_gamma", cert.gamma - weighted_norm_sq(x_t, cert.P), 1e-6)
    return rep


def verify_cost_bound(cert, cset, x_t, samples, horizon, seed, weights, center=None,
                      max_horizon=200_000, models=None):
    """Compare the certified bound with truncated nominal rollout costs.

    Rollouts are extended (doubling) until the tail ``|x_H|_P^2`` drops
    below ``1e-9 * gamma``. Models that never get there are reported as
    inconclusive rather than failed.
    """
    x_t = np.atleast_1d(np.asarray(x_t, float))
    rep = AuditReport()
    if models is None:
        models = sample_members(cset, _center(cset, center), samples, seed) if samples else []
    V = weighted_norm_sq(x_t, cert.P)
    rep.add("value_below_gamma", cert.gamma - V, 1e-6)
    worst_gap, worst_dec, best, inconclusive = np.inf, np.inf, 0.0, 0
    for A, B in models:
        H = horizon
        while True:
            r = nominal_rollout(A, B, cert.F, x_t, H, weights)
            tail = weighted_norm_sq(r.states[-1], cert.P)
            if tail <= 1e-9 * max(cert.gamma, 1e-300) or H >= max_horizon:
                break
            H = min(2 * H, max_horizon)
        if tail > 1e-9 * max(cert.gamma, 1e-300):
            inconclusive += 1
        Vs = np.einsum("ki,ij,kj->k", r.states, cert.P, r.states)
        stage = (np.einsum("ki,ij,kj->k", r.inputs, weights.R, r.inputs)
                 + np.einsum("ki,ij,kj->k", r.states[:-1], weights.Q, r.states[:-1]))
        dec = -(Vs[1:] - Vs[:-1] + stage)
        worst_dec = min(worst_dec, float(dec.min()) if dec.size else np.inf)
        worst_gap = min(worst_gap, V - r.cost)
        best = max(best, r.cost)
    if models:
        rep.add("rollout_cost_bound", worst_gap, 1e-6, f"{len(models)} models")
        rep.add("per_step_decrease", worst_dec, 1e-6)
        if inconclusive:
            rep.add("tail_negligible", 0.0, 0.0, f"{inconclusive} models", inconclusive=True)
    rep.info["sampled_gap"] = cert.gamma - best
    rep.info["models"] = len(models)
    return rep


def _sphere(n, count, rng):
    if n == 1:
        return np.array([[1.0], [-1.0]])
    d = rng.standard_normal((count, n))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def verify_sprocedure_constraints(cert, constraints, samples, seed, tol=1e-6, mat_tol=1e-8):
    """Pointwise and matrix checks that the invariant ellipsoid respects the constraints."""
    rep = AuditReport()
    rng = np.random.default_rng(seed)
    n = cert.P.shape[0]
    w, V = np.linalg.eigh(cert.P)
    P_inv_half = (V / np.sqrt(w)) @ V.T
    pts = np.sqrt(cert.gamma) * _sphere(n, samples, rng) @ P_inv_half
    S_u, S_x = constraints.S_u, constraints.S_x
    us = pts @ cert.F.T
    u_norm = np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", us, S_u, us), 0.0))
    x_norm = np.sqrt(np.maximum(np.einsum("ki,ij,kj->k", pts, S_x, pts), 0.0))
    rep.add("input_on_boundary", 1.0 - u_norm.max(), tol, f"{len(pts)} points")
    rep.add("state_on_boundary", 1.0 - x_norm.max(), tol, f"{len(pts)} points")
    H = cert.gamma * np.linalg.inv(cert.P)
    L = cert.F @ H
    rep.add("input_matrix_form", min_eigenvalue(H - L.T @ S_u @ L), mat_tol)
    rep.add("state_matrix_form", min_eigenvalue(H - H @ S_x @ H), mat_tol)
    return rep


def lqr_oracle(A, B, weights, iters=100_000, tol=1e-12):
    """Discrete Riccati fixed-point iteration; returns ``(P, F)`` with ``u = F x``."""
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = weights.Q, weights.R
    P = Q.copy()
    for _ in range(iters):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = Q + A.T @ P @ A - A.T @ P @ B @ K
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            break
        step = np.abs(P_new - P).max()
        P = P_new
        if step <= tol * max(1.0, np.abs(P).max()):
            F = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
            return P, F
    raise NotStabilizable("Riccati iteration did not converge")


@dataclass(frozen=True)
class LoopMetrics:
    total_cost: float
    mean_solve_ms: float
    rpi_entry_step: int | None
    worst_margin: float


def closed_loop_metrics(log):
    if not log.rows:
        raise ValueError("empty run log")
    total = float(sum(r.stage_cost for r in log.rows))
    solved = [r.solve_ms for r in log.rows if r.solve_ms > 0]
    entry = next((r.t for r in log.rows if r.mode is Mode.STATIC), None)
    worst = float(min(min(r.margin_u, r.margin_x) for r in log.rows))
    return LoopMetrics(total, float(np.mean(solved)) if solved else 0.0, entry, worst)


def _value(cert, x):
    return weighted_norm_sq(x, cert.P)


def lyapunov_audit(log, tol=1e-6, rel_tol=1e-9):
    """Decrease of the value function while re-optimizing.

    For each receding step ``t`` with successor ``t+1`` it checks
    ``|x_{t+1}|^2_{P_t} - theta <= rho (V_t - theta)``, that the logged
    ``V`` matches the logged state, and, when the successor re-optimizes,
    that the new value does not exceed ``|x_{t+1}|^2_{P_t}``.
    """
    rep = AuditReport()
    theta, rho = log.meta["rpi_threshold"], log.meta["contraction"]
    certs = log.certificates
    if len(certs) != len(log.rows):
        rep.add("certificates_present", -1.0, 0.0, "missing certificate sidecar")
        return rep
    mismatch = max(abs(_value(c, r.x) - r.V) / max(1.0, abs(r.V))
                   for r, c in zip(log.rows, certs)) if certs else 0.0
    rep.add("logged_value_matches_state", -mismatch, 1e-9)
    worst_dec, worst_opt, pairs = np.inf, np.inf, 0
    for k in range(len(log.rows) - 1):
        r, nxt = log.rows[k], log.rows[k + 1]
        if r.mode is not Mode.RECEDING:
            continue
        pairs += 1
        V_t = _value(certs[k], r.x)
        V_next = _value(certs[k], nxt.x)
        lhs = V_next - theta
        rhs = rho * (V_t - theta)
        worst_dec = min(worst_dec, rhs - lhs)
        if nxt.mode is Mode.RECEDING:
            worst_opt = min(worst_opt, V_next - _value(certs[k + 1], nxt.x)
                            + rel_tol * V_next)
    if pairs:
        rep.add("lyapunov_decrease", worst_dec, tol, f"{pairs} receding steps")
    if np.isfinite(worst_opt):
        rep.add("reoptimization_no_worse", worst_opt, tol)
    return rep


def rpi_audit(log, tol=1e-6):
    rep = AuditReport()
    theta = log.meta["rpi_threshold"]
    certs = log.certificates
    static = [(r, c) for r, c in zip(log.rows, certs) if r.mode is Mode.STATIC]
    if not static:
        rep.info["rpi_entry"] = None
        return rep
    frozen = static[0][1]
    inside = False
    worst = np.inf
    for r, c in static:
        V = _value(frozen, r.x)
        if V <= theta + tol:
            inside = True
        if inside:
            worst = min(worst, theta - V)
    if inside:
        rep.add("rpi_invariance", worst, tol, f"threshold {theta:.4g}")
    rep.info["rpi_entry"] = static[0][0].t
    return rep


def constraint_audit(log, tol=1e-6):
    rep = AuditReport()
    if log.rows:
        rep.add("input_constraint", min(r.margin_u for r in log.rows), tol)
        rep.add("state_constraint", min(r.margin_x for r in log.rows), tol)
    modes = "".join("R" if r.mode is Mode.RECEDING else "S" for r in log.rows)
    rep.add("mode_monotone", 0.0 if "SR" not in modes else -1.0, 0.0)
    return rep


def audit_run(log, tol=1e-6):
    rep = AuditReport()
    for part in (lyapunov_audit(log, tol), rpi_audit(log, tol), constraint_audit(log, tol)):
        rep.extend(part)
    return rep


@dataclass(frozen=True)
class TrialResult:
    eps: float
    feasible: bool
    hypothesis: bool
    completed: bool
    violations: bool
    entered_rpi: bool
    gamma0: float
    threshold: float
    total_cost: float

    @property
    def stable(self):
        return self.feasible and self.completed and not self.violations and self.entered_rpi

    @property
    def certified(self):
        return self.stable and self.hypothesis


def robustness_trial(scenario, eps, c, seed, scheme=Scheme.ROBUST, steps=None):
    """Collect data and run the loop with noise bound ``|w| <= eps`` (isotropic)."""
    n = scenario.plant.n
    G = np.eye(n) / eps ** 2
    data = collect_offline(scenario, seed, G=G)
    cset = build_offline(data)
    plant = LtiPlant(scenario.plant.A_s, scenario.plant.B_s, G)
    cfg = MpcConfig(c, scenario.weights, scenario.constraints, G)
    noise = NoiseSampler(G, seed + 17)
    steps = scenario.steps if steps is None else steps
    theta = cfg.rpi_threshold
    try:
        log = run_closed_loop(plant, cfg, scheme, scenario.x0, steps, noise, cset)
    except InitialInfeasible:
        return TrialResult(eps, False, False, False, False, False, np.nan, theta, np.nan)
    except SolverFailed:
        return TrialResult(eps, True, False, False, False, False, np.nan, theta, np.nan)
    m = closed_loop_metrics(log)
    g0 = log.rows[0].gamma
    return TrialResult(eps, True, g0 >= theta, True, m.worst_margin < -1e-6,
                       m.rpi_entry_step is not None, g0, theta, m.total_cost)


@dataclass(frozen=True)
class SweepResult:
    grid: list
    feasibility_margin: float
    certified_margin: float


def _bisect(pred, lo, hi, sig=2):
    """Largest value in ``[lo, hi]`` satisfying ``pred``, to ``sig`` significant figures."""
    while True:
        if float(f"{lo:.{sig - 1}e}") == float(f"{hi:.{sig - 1}e}") or hi / lo < 1 + 10 ** -sig:
            return float(f"{lo:.{sig - 1}e}")
        mid = np.sqrt(lo * hi)
        if pred(mid):
            lo = mid
        else:
            hi = mid


def noise_sweep(scenario, c, seed, eps_min=1e-4, eps_max=2.0, points=9):
    """Geometric sweep of the noise bound, then bisection of both margins.

    ``feasibility_margin`` requires feasibility, constraint satisfaction
    and entry into the invariant set; ``certified_margin`` additionally
    requires the initial bound to sit above the invariance threshold, the
    hypothesis under which convergence is guaranteed.
    """
    grid_eps = np.geomspace(eps_min, eps_max, points)
    cache = {}

    def trial(e):
        key = float(e)
        if key not in cache:
            cache[key] = robustness_trial(scenario, key, c, seed)
        return cache[key]

    grid = [trial(e) for e in grid_eps]
    margins = []
    for attr in ("stable", "certified"):
        ok = [getattr(r, attr) for r in grid]
        if not ok[0]:
            margins.append(0.0)
            continue
        last = max(i for i in range(len(ok)) if all(ok[:i + 1]))
        if last == len(ok) - 1:
            margins.append(float(grid_eps[-1]))
            continue
        margins.append(_bisect(lambda e: getattr(trial(e), attr),
                               grid_eps[last], grid_eps[last + 1]))
    return SweepResult(grid, margins[0], margins[1])
