"""Semidefinite programs for robust state-feedback synthesis from data.

Problems are stored in a canonical form: every constraint is an affine
matrix expression ``F(z) = F0 + sum_k z_k F_k`` that must be PSD, plus
elementwise lower bounds on some scalar variables. Each constraint also
keeps the closure that builds it from named variables, which is what
:func:`verify_solution` evaluates; the canonical data is only used by the
solver.

The reference backend binds cvxopt's primal-dual interior-point SDP
solver. Problems are rescaled by exact diagonal congruences before they
are handed over, which matters a lot for the suspension data where the
noise bound and the state constraints span ten orders of magnitude.
"""

import enum
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .consistency import MultiplierMode
from .numerics import PSD_TOL, STRICT_MARGIN, as_sym, min_eigenvalue, sqrt_factor
from .plant import ConfigError


class InvalidProblem(ValueError):
    """Problem data is malformed or not affine."""


class NoSolution(RuntimeError):
    """Certificate requested from a non-optimal solution."""


class SolveStatus(enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    MAX_ITER = "max_iter"
    NUMERICAL_FAILURE = "numerical_failure"


class VarKind(enum.Enum):
    SCALAR = "scalar"
    SYMMETRIC = "symmetric"
    FULL = "full"
    NONNEG = "nonneg"


@dataclass(frozen=True)
class VariableBlock:
    name: str
    kind: VarKind
    shape: tuple
    offset: int

    @property
    def size(self):
        if self.kind is VarKind.SYMMETRIC:
            k = self.shape[0]
            return k * (k + 1) // 2
        return int(np.prod(self.shape)) if self.shape else 1

    def unpack(self, z):
        v = z[self.offset:self.offset + self.size]
        if self.kind is VarKind.SCALAR:
            return float(v[0])
        if self.kind is VarKind.SYMMETRIC:
            k = self.shape[0]
            S = np.zeros((k, k))
            S[np.triu_indices(k)] = v
            return S + np.triu(S, 1).T
        return v.reshape(self.shape).copy()


@dataclass(frozen=True)
class LmiConstraint:
    """``expr(vars) >= 0`` in the PSD order, stored also in canonical form.

    ``precond`` is the diagonal of a congruence applied before solving.
    """

    name: str
    expr: Callable
    F0: np.ndarray
    Fs: np.ndarray
    strict: bool = False
    precond: np.ndarray | None = None

    @property
    def dim(self):
        return self.F0.shape[0]

    def canonical(self, z):
        return self.F0 + np.tensordot(z, self.Fs, axes=1)


@dataclass(frozen=True)
class SdpProblem:
    """Minimize ``objective @ z`` subject to LMIs and scalar lower bounds."""

    objective: np.ndarray
    variables: tuple
    constraints: tuple
    lower_bounds: dict
    metadata: dict = field(default_factory=dict)
    var_scale: np.ndarray | None = None

    @property
    def num_vars(self):
        return self.objective.size

    def var(self, name):
        for v in self.variables:
            if v.name == name:
                return v
        raise KeyError(name)

    def unpack(self, z):
        return {v.name: v.unpack(z) for v in self.variables}

    def check_affine(self, trials=3, seed=0, tol=1e-9):
        """Probe every constraint closure for affinity and agreement with its canonical form."""
        rng = np.random.default_rng(seed)
        for _ in range(trials):
            z1, z2 = rng.standard_normal((2, self.num_vars))
            a = rng.uniform(-2, 2)
            for con in self.constraints:
                f = lambda z: con.expr(self.unpack(z))
                f0, f1, f2 = f(np.zeros(self.num_vars)), f(z1), f(z2)
                second = f(z1 + a * z2) - f1 - a * (f2 - f0)
                scale = 1.0 + max(np.abs(f1).max(), np.abs(f2).max())
                if np.abs(second).max() > tol * scale:
                    raise InvalidProblem(f"constraint {con.name} is not affine")
                if np.abs(con.canonical(z1) - f1).max() > tol * scale:
                    raise InvalidProblem(f"constraint {con.name} canonical form mismatch")
        return True

    def dump(self):
        lines = ["minimize " + " + ".join(
            f"{w:g}*z[{k}]" for k, w in enumerate(self.objective) if w != 0.0)]
        lines.append("variables:")
        for v in self.variables:
            lines.append(f"  {v.name:<6} {v.kind.value:<9} shape={v.shape} "
                         f"offset={v.offset} size={v.size}")
        lines.append("constraints:")
        for con in self.constraints:
            used = sorted({self._owner(k) for k in np.flatnonzero(
                np.abs(con.Fs).reshape(len(con.Fs), -1).max(axis=1) > 0)})
            rel = "<= -margin*I" if con.strict else ">= 0"
            lines.append(f"  {con.name:<16} dim={con.dim:<3} {rel:<13} vars={','.join(used)}")
        groups = {}
        for k, lb in sorted(self.lower_bounds.items()):
            groups.setdefault((self._owner(k), lb), []).append(k)
        for (owner, lb), ks in groups.items():
            lines.append(f"  {owner} >= {lb:g} elementwise (z[{ks[0]}..{ks[-1]}])")
        for key, val in self.metadata.items():
            if not isinstance(val, np.ndarray):
                lines.append(f"meta {key} = {val}")
        return "\n".join(lines)

    def _owner(self, k):
        for v in self.variables:
            if v.offset <= k < v.offset + v.size:
                return v.name
        return "?"


def _canonical(expr, unpack, nv):
    z = np.zeros(nv)
    F0 = expr(unpack(z))
    Fs = np.empty((nv,) + F0.shape)
    for k in range(nv):
        z[k] = 1.0
        Fs[k] = expr(unpack(z)) - F0
        z[k] = 0.0
    return F0, Fs


def _layout(specs):
    out, off = [], 0
    for name, kind, shape in specs:
        v = VariableBlock(name, kind, shape, off)
        out.append(v)
        off += v.size
    return tuple(out), off


def _assemble(cset, x_t, weights, constraints, c, online, strict_margin=STRICT_MARGIN):
    n, m = cset.n, cset.m
    x_t = np.atleast_1d(np.asarray(x_t, dtype=float)).ravel()
    if x_t.size != n:
        raise InvalidProblem("state dimension does not match the data")
    Q, S_u, S_x = weights.Q, as_sym(constraints.S_u), as_sym(constraints.S_x)
    lam_q = min_eigenvalue(Q)
    if not c > lam_q:
        raise ConfigError(f"c = {c:g} must exceed the smallest eigenvalue of Q ({lam_q:g})")
    if min_eigenvalue(S_u) <= 0.0:
        raise ConfigError("S_u must be nonsingular")
    off_blocks, on_blocks = cset.multiplier_blocks()
    if not off_blocks:
        raise InvalidProblem("consistency set has no offline data")
    if not online:
        on_blocks = []
    D_off, D_on = np.stack(off_blocks), (np.stack(on_blocks) if on_blocks else None)
    M_Q, M_R = weights.M_Q, weights.M_R
    S_u_inv = as_sym(np.linalg.inv(S_u))
    N_x = sqrt_factor(S_x)
    k = 2 * n + m

    specs = [("gamma", VarKind.SCALAR, ()), ("H", VarKind.SYMMETRIC, (n, n)),
             ("L", VarKind.FULL, (m, n)), ("tau", VarKind.NONNEG, (len(off_blocks),))]
    if online:
        specs.append(("delta", VarKind.NONNEG, (len(on_blocks),)))
    variables, nv = _layout(specs)

    def unpack(z):
        return {v.name: v.unpack(z) for v in variables}

    def initial_state(v):
        M = np.zeros((n + 1, n + 1))
        M[0, 0] = 1.0
        M[0, 1:] = M[1:, 0] = x_t
        M[1:, 1:] = v["H"]
        return M

    def robust_decrease(v):
        g, H, L = v["gamma"], v["H"], v["L"]
        N = 4 * n + 2 * m
        M = np.zeros((N, N))
        M[:n, :n] = -H + (g / c) * np.eye(n)
        M[:k, :k] += np.tensordot(v["tau"], D_off, axes=1)
        if D_on is not None:
            M[:k, :k] += np.tensordot(v["delta"], D_on, axes=1)
        M[n:2 * n, k:k + n] = H
        M[2 * n:k, k:k + n] = L
        M[k:k + n, :k] = M[:k, k:k + n].T
        M[k:k + n, k:k + n] = -H
        Phi = np.vstack([M_R @ L, M_Q @ H])
        M[k + n:, k:k + n] = Phi
        M[k:k + n, k + n:] = Phi.T
        M[k + n:, k + n:] = -g * np.eye(m + n)
        return -M - strict_margin * np.eye(N)

    def input_bound(v):
        H, L = v["H"], v["L"]
        return np.block([[H, L.T], [L, S_u_inv]])

    def state_bound(v):
        # factor form of [[H, H], [H, S_x^-1]], valid for singular S_x
        H = v["H"]
        HN = H @ N_x
        return np.block([[H, HN], [HN.T, np.eye(n)]])

    # diagonal rescaling: H ~ t t', L ~ e t'
    sx = np.diag(S_x)
    t = np.where(sx > 0, 1.0 / np.sqrt(np.where(sx > 0, sx, 1.0)), 1.0)
    e = 1.0 / np.sqrt(np.diag(S_u))
    ti, ei = 1.0 / t, 1.0 / e
    pre = {
        "initial_state": np.concatenate([[1.0], ti]),
        "robust_decrease": np.concatenate([ti, ti, ei, ti, np.ones(m + n)]),
        "input_bound": np.concatenate([ti, ei]),
        "state_bound": np.concatenate([ti, np.ones(n)]),
    }
    exprs = [("initial_state", initial_state, False), ("robust_decrease", robust_decrease, True),
             ("input_bound", input_bound, False), ("state_bound", state_bound, False)]
    cons = []
    for name, expr, strict in exprs:
        F0, Fs = _canonical(expr, unpack, nv)
        cons.append(LmiConstraint(name, expr, F0, Fs, strict, pre[name]))

    s = np.ones(nv)
    H_v, L_v = variables[1], variables[2]
    iu = np.triu_indices(n)
    s[H_v.offset:H_v.offset + H_v.size] = t[iu[0]] * t[iu[1]]
    s[L_v.offset:L_v.offset + L_v.size] = np.outer(e, t).ravel()
    dec = cons[1]
    C = dec.precond
    for v in variables[3:]:
        for j in range(v.offset, v.offset + v.size):
            nrm = np.linalg.norm(C[:, None] * dec.Fs[j] * C[None, :])
            s[j] = 1.0 / nrm if nrm > 0 else 1.0

    bounds = {0: 1e-12}
    for v in variables[3:]:
        bounds.update({j: 0.0 for j in range(v.offset, v.offset + v.size)})
    obj = np.zeros(nv)
    obj[0] = 1.0
    meta = {"n": n, "m": m, "c": float(c), "mode": cset.mode.value,
            "adaptive": bool(online), "num_offline": len(off_blocks),
            "num_online": len(on_blocks), "strict_margin": strict_margin,
            "decrease_dim": 4 * n + 2 * m}
    return SdpProblem(obj, variables, tuple(cons), bounds, meta, s)


def assemble_robust(cset, x_t, weights, constraints, c, strict_margin=STRICT_MARGIN):
    """Min-max synthesis problem using offline data only."""
    return _assemble(cset, x_t, weights, constraints, c, False, strict_margin)


def assemble_adaptive(cset, x_t, weights, constraints, c, strict_margin=STRICT_MARGIN):
    """Same problem with one extra multiplier per online block.

    Without online blocks the result is identical to :func:`assemble_robust`.
    """
    online = len(cset.online) > 0
    return _assemble(cset, x_t, weights, constraints, c, online, strict_margin)


@dataclass(frozen=True)
class SolverOptions:
    feas_tol: float = 1e-8
    rel_gap: float = 1e-6
    strict_margin: float = STRICT_MARGIN
    maxiters: int = 100
    kktsolvers: tuple = ("chol", "ldl")
    precondition: bool = True


@dataclass(frozen=True)
class SdpSolution:
    gamma: float
    H: np.ndarray
    L: np.ndarray
    tau: np.ndarray
    delta: np.ndarray | None
    status: SolveStatus
    max_violation: float
    z: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    solve_seconds: float = 0.0


@dataclass(frozen=True)
class Certificate:
    """Feedback ``u = F x`` with Lyapunov matrix ``P`` and cost bound ``gamma``."""

    F: np.ndarray
    P: np.ndarray
    gamma: float


@dataclass(frozen=True)
class VerificationReport:
    residuals: dict
    tol: float
    passed: bool

    def __str__(self):
        rows = [f"{k:<16} {v: .3e}" for k, v in self.residuals.items()]
        return "\n".join(rows + [f"pass={self.passed} (tol {self.tol:g})"])


def constraint_residuals(problem, values):
    """Smallest eigenvalue of every constraint family at named ``values``."""
    res = {}
    for con in problem.constraints:
        res[con.name] = min_eigenvalue(con.expr(values))
    lbs = []
    for v in problem.variables:
        if v.kind is VarKind.NONNEG and v.size:
            lbs.append(float(np.min(values[v.name])))
    res["multiplier_sign"] = min(lbs) if lbs else 0.0
    res["gamma_positive"] = values["gamma"] - problem.lower_bounds.get(0, 0.0)
    return res


def _to_cvxopt(problem, precondition):
    from cvxopt import matrix

    nv = problem.num_vars
    s = problem.var_scale if (precondition and problem.var_scale is not None) else np.ones(nv)
    Gs, hs = [], []
    for con in problem.constraints:
        C = con.precond if (precondition and con.precond is not None) else np.ones(con.dim)
        CC = C[:, None] * C[None, :]
        F = con.Fs * CC[None] * s[:, None, None]
        Gs.append(matrix(-F.transpose(0, 2, 1).reshape(nv, -1).T.copy()))
        hs.append(matrix(con.F0 * CC))
    idx = sorted(problem.lower_bounds)
    Gl = np.zeros((len(idx), nv))
    hl = np.zeros(len(idx))
    for r, j in enumerate(idx):
        Gl[r, j] = -s[j]
        hl[r] = -problem.lower_bounds[j]
    return matrix(problem.objective * s), matrix(Gl), matrix(hl), Gs, hs, s


def _run_cvxopt(problem, options, kkt):
    from cvxopt import solvers

    c, Gl, hl, Gs, hs, s = _to_cvxopt(problem, options.precondition)
    opts = {"show_progress": False, "maxiters": options.maxiters}
    try:
        sol = solvers.sdp(c, Gl=Gl, hl=hl, Gs=Gs, hs=hs, kktsolver=kkt, options=opts)
    except (ZeroDivisionError, ArithmeticError, ValueError) as exc:
        return None, {"error": f"{type(exc).__name__}: {exc}", "kktsolver": kkt}
    diag = {k: sol.get(k) for k in ("status", "gap", "relative gap", "primal objective",
                                     "dual objective", "primal infeasibility",
                                     "dual infeasibility", "iterations")}
    diag["kktsolver"] = kkt
    z = None if sol["x"] is None else np.array(sol["x"]).ravel() * s
    return z, diag


def _classify(problem, z, diag, options):
    if z is None:
        if diag.get("status") == "primal infeasible":
            return SolveStatus.INFEASIBLE, None
        return SolveStatus.NUMERICAL_FAILURE, None
    if diag["status"] == "primal infeasible":
        return SolveStatus.INFEASIBLE, None
    values = problem.unpack(z)
    res = constraint_residuals(problem, values)
    worst = max(0.0, -min(res.values()))
    diag["max_violation"] = worst
    if diag["status"] == "dual infeasible":
        return SolveStatus.NUMERICAL_FAILURE, worst
    rg = diag.get("relative gap")
    gap_ok = rg is not None and rg <= options.rel_gap
    if worst <= options.feas_tol and (diag["status"] == "optimal" or gap_ok):
        if min_eigenvalue(values["H"]) > 0:
            return SolveStatus.OPTIMAL, worst
    if diag.get("iterations", 0) >= options.maxiters:
        return SolveStatus.MAX_ITER, worst
    return SolveStatus.NUMERICAL_FAILURE, worst


def solve(problem, options=SolverOptions()):
    """Solve ``problem`` with cvxopt and classify the outcome.

    A point is reported OPTIMAL only if an independent eigenvalue check
    passes at ``feas_tol`` and either cvxopt converged or the relative
    duality gap is below ``rel_gap``. Solver exceptions become
    NUMERICAL_FAILURE; each KKT backend in ``options.kktsolvers`` is
    tried until one gives a definite answer, first on the preconditioned
    data and then, if that fails, on the raw data.
    """
    if not isinstance(problem, SdpProblem) or not problem.constraints:
        raise InvalidProblem("expected an assembled SdpProblem")
    for con in problem.constraints:
        if con.Fs.shape != (problem.num_vars, con.dim, con.dim):
            raise InvalidProblem(f"constraint {con.name} has inconsistent data")
    t0 = time.perf_counter()
    best = None
    attempts = []
    scalings = (True, False) if options.precondition else (False,)
    runs = [(pre, kkt) for pre in scalings for kkt in options.kktsolvers]
    for pre, kkt in runs:
        z, diag = _run_cvxopt(problem, replace(options, precondition=pre), kkt)
        diag["precondition"] = pre
        attempts.append(diag)
        status, worst = _classify(problem, z, diag, options)
        if best is None or status in (SolveStatus.OPTIMAL, SolveStatus.INFEASIBLE):
            best = (status, worst, z, diag)
        if status in (SolveStatus.OPTIMAL, SolveStatus.INFEASIBLE):
            break
    elapsed = time.perf_counter() - t0
    status, worst, z, diag = best
    diag = dict(diag, attempts=attempts)
    if z is None or status is SolveStatus.INFEASIBLE:
        return SdpSolution(float("nan"), None, None, None, None, status,
                           float("inf") if worst is None else worst, None, diag, elapsed)
    v = problem.unpack(z)
    return SdpSolution(v["gamma"], v["H"], v["L"], np.asarray(v["tau"]), v.get("delta"),
                       status, worst, z, diag, elapsed)


def verify_solution(problem, sol, feas_tol=SolverOptions.feas_tol):
    """Rebuild every constraint from named variables and check eigenvalues."""
    values = {"gamma": sol.gamma, "H": sol.H, "L": sol.L, "tau": sol.tau}
    if problem.metadata.get("adaptive"):
        values["delta"] = sol.delta
    if any(v is None for v in values.values()):
        return VerificationReport({}, 10 * feas_tol, False)
    res = constraint_residuals(problem, values)
    res["H_definite"] = min_eigenvalue(sol.H)
    tol = 10 * feas_tol
    passed = all(r >= -tol for k, r in res.items() if k != "H_definite") and res["H_definite"] > 0
    return VerificationReport(res, tol, passed)


def certificate_from(gamma, H, L):
    H = as_sym(H)
    L = np.atleast_2d(L)
    Hinv = np.linalg.inv(H)
    P = as_sym(gamma * Hinv)
    if min_eigenvalue(P) <= 0:
        raise NoSolution("P is not positive definite")
    return Certificate(L @ Hinv, P, float(gamma))


def extract_certificate(sol):
    if sol.status is not SolveStatus.OPTIMAL:
        raise NoSolution(f"solution status is {sol.status.value}")
    return certificate_from(sol.gamma, sol.H, sol.L)
