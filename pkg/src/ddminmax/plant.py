"""Ground-truth plants, bounded process noise and offline data records."""

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from .numerics import DimError, as_sym, is_pd, NotPsd, sqrt_factor, weighted_norm_sq
from .numerics import CostWeights


class ConfigError(ValueError):
    """Invalid scenario or experiment configuration."""


class Diverged(RuntimeError):
    """Simulated state became non-finite."""

    def __init__(self, step):
        super().__init__(f"state became non-finite at step {step}")
        self.step = step


class NoiseDistribution(enum.Enum):
    UNIFORM_BALL = "uniform_ball"
    BOUNDARY = "boundary"
    ZERO = "zero"


class ScenarioName(enum.Enum):
    SUSPENSION = "suspension"
    SCALAR = "scalar"


def _mat(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2:
        raise DimError(f"{name} must be a matrix")
    return M


@dataclass(frozen=True)
class LtiPlant:
    """``x+ = A_s x + B_s u + w`` with ``|w|_G <= 1``."""

    A_s: np.ndarray
    B_s: np.ndarray
    G: np.ndarray

    def __post_init__(self):
        A, B, G = _mat(self.A_s, "A_s"), _mat(self.B_s, "B_s"), as_sym(self.G)
        if A.shape[0] != A.shape[1]:
            raise DimError("A_s must be square")
        if B.shape[0] != A.shape[0]:
            raise DimError("B_s must have as many rows as A_s")
        if G.shape != A.shape:
            raise DimError("G must be n x n")
        if not is_pd(G, 0.0):
            raise NotPsd("G must be positive definite")
        object.__setattr__(self, "A_s", A)
        object.__setattr__(self, "B_s", B)
        object.__setattr__(self, "G", G)

    @property
    def n(self):
        return self.A_s.shape[0]

    @property
    def m(self):
        return self.B_s.shape[1]

    def step(self, x, u, w=None):
        x_next = self.A_s @ x + self.B_s @ u
        return x_next if w is None else x_next + w


@dataclass(frozen=True)
class ConstraintSet:
    """Ellipsoidal constraints ``|u|_{S_u} <= 1`` and ``|x|_{S_x} <= 1``."""

    S_u: np.ndarray
    S_x: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "S_u", as_sym(self.S_u))
        object.__setattr__(self, "S_x", as_sym(self.S_x))

    def input_margin(self, u):
        return 1.0 - np.sqrt(max(weighted_norm_sq(u, self.S_u), 0.0))

    def state_margin(self, x):
        return 1.0 - np.sqrt(max(weighted_norm_sq(x, self.S_x), 0.0))


@dataclass
class NoiseSampler:
    """Seeded sampler of noise vectors in the ellipsoid ``{w : w'Gw <= 1}``.

    Uses numpy's ``default_rng`` (PCG64), so sequences are reproducible
    across platforms for a fixed seed. Not safe to share between
    concurrent simulations; use :meth:`spawn` instead.
    """

    G: np.ndarray
    seed: int = 0
    distribution: NoiseDistribution = NoiseDistribution.UNIFORM_BALL
    _rng: np.random.Generator = field(init=False, repr=False)
    _map: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.G = as_sym(self.G)
        self.distribution = NoiseDistribution(self.distribution)
        self._rng = np.random.default_rng(self.seed)
        # w = G^{-1/2} v with |v| <= 1
        self._map = sqrt_factor(np.linalg.inv(self.G))

    @property
    def n(self):
        return self.G.shape[0]

    def sample(self):
        n = self.n
        if self.distribution is NoiseDistribution.ZERO:
            return np.zeros(n)
        d = self._rng.standard_normal(n)
        d /= np.linalg.norm(d)
        if self.distribution is NoiseDistribution.UNIFORM_BALL:
            d *= self._rng.uniform() ** (1.0 / n)
        w = self._map @ d
        # guard against round-off pushing a boundary draw outside
        r = weighted_norm_sq(w, self.G)
        if r > 1.0:
            w /= np.sqrt(r)
        return w

    def spawn(self, offset):
        return NoiseSampler(self.G, self.seed + 7919 * (offset + 1), self.distribution)


def sample_noise(sampler):
    return sampler.sample()


@dataclass(frozen=True)
class DataRecord:
    """Input-state trajectory ``U`` (m x T), ``X`` (n x T+1) with noise bound ``G``.

    ``W`` holds the realized noise when the record was simulated.
    """

    U: np.ndarray
    X: np.ndarray
    G: np.ndarray
    W: np.ndarray | None = None

    def __post_init__(self):
        U, X = _mat(self.U, "U"), _mat(self.X, "X")
        if X.shape[1] != U.shape[1] + 1:
            raise DimError("X must have exactly one more column than U")
        G = as_sym(self.G)
        if G.shape[0] != X.shape[0]:
            raise DimError("G must be n x n")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "G", G)

    @property
    def T(self):
        return self.U.shape[1]

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def m(self):
        return self.U.shape[0]

    def residuals(self, A, B):
        return self.X[:, 1:] - A @ self.X[:, :-1] - B @ self.U

    def to_csv(self, path):
        header = ["t"] + [f"u_{i}" for i in range(self.m)] + [f"x_{i}" for i in range(self.n)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.T + 1):
                u = [repr(float(v)) for v in self.U[:, t]] if t < self.T else [""] * self.m
                w.writerow([t] + u + [repr(float(v)) for v in self.X[:, t]])

    @classmethod
    def from_csv(cls, path, G):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ConfigError(f"{path}: empty data file")
        header, body = rows[0], rows[1:]
        m = sum(h.startswith("u_") for h in header)
        n = sum(h.startswith("x_") for h in header)
        if header != ["t"] + [f"u_{i}" for i in range(m)] + [f"x_{i}" for i in range(n)]:
            raise ConfigError(f"{path}: unexpected header {header}")
        if len(body) < 2:
            raise ConfigError(f"{path}: need at least one transition")
        X = np.array([[float(v) for v in r[1 + m:]] for r in body]).T
        U = np.array([[float(v) for v in r[1:1 + m]] for r in body[:-1]]).T.reshape(m, -1)
        return cls(U, X, G)


def simulate(plant, x0, inputs, noise):
    """Run the plant open loop on ``inputs`` (m x T) from ``x0``."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float)).ravel()
    U = _mat(inputs, "inputs")
    if plant.m == 1 and U.shape[0] != 1 and U.shape[1] == 1:
        U = U.T
    if x0.size != plant.n or U.shape[0] != plant.m:
        raise DimError("x0 or inputs do not match the plant dimensions")
    if noise.n != plant.n:
        raise DimError("noise sampler dimension does not match the plant")
    T = U.shape[1]
    if T < 1:
        raise ConfigError("need at least one input")
    X = np.empty((plant.n, T + 1))
    W = np.empty((plant.n, T))
    X[:, 0] = x0
    for k in range(T):
        W[:, k] = noise.sample()
        with np.errstate(over="ignore", invalid="ignore"):
            X[:, k + 1] = plant.step(X[:, k], U[:, k], W[:, k])
        if not np.all(np.isfinite(X[:, k + 1])):
            raise Diverged(k + 1)
    return DataRecord(U, X, plant.G, W)


def excitation_inputs(m, T, low, high, seed):
    """I.i.d. uniform offline excitation on ``[low, high]``."""
    return np.random.default_rng(seed).uniform(low, high, size=(m, T))


@dataclass(frozen=True)
class Scenario:
    """A built-in experiment: plant, weights, constraints and defaults."""

    name: str
    plant: LtiPlant
    weights: CostWeights
    constraints: ConstraintSet
    x0: np.ndarray
    c: float
    T_f: int
    steps: int
    input_range: tuple = (-5.0, 5.0)


def builtin_scenario(name):
    try:
        key = ScenarioName(name.lower() if isinstance(name, str) else name)
    except ValueError:
        raise ConfigError(f"unknown scenario {name!r}") from None
    if key is ScenarioName.SUSPENSION:
        A = np.array([[0.809, 0.009, 0.0, 0.0],
                      [-36.93, 0.8, 0.0, 0.0],
                      [0.191, -0.009, 1.0, 0.01],
                      [0.0, 0.0, 0.0, 1.0]])
        B = np.array([[0.0005], [0.0935], [-0.005], [-0.01]])
        return Scenario(
            "suspension",
            LtiPlant(A, B, 1e8 * np.eye(4)),
            CostWeights(100.0 * np.eye(4), np.eye(1)),
            ConstraintSet(np.array([[0.25]]), np.diag([2500.0, 1.0, 400.0, 1.0])),
            np.array([-0.01, -0.5, 0.03, 0.1]),
            c=5e5, T_f=200, steps=150,
        )
    return Scenario(
        "scalar",
        LtiPlant(np.array([[1.1]]), np.array([[0.5]]), np.array([[1e8]])),
        CostWeights(np.eye(1), np.array([[0.1]])),
        ConstraintSet(np.array([[0.25]]), np.array([[0.25]])),
        np.array([-1.0]),
        c=50.0, T_f=20, steps=20,
    )


def collect_offline(scenario, seed, T_f=None, G=None, distribution=NoiseDistribution.UNIFORM_BALL):
    """Offline record from the scenario plant started at the origin.

    Inputs and noise use independent streams derived from ``seed``.
    """
    T_f = scenario.T_f if T_f is None else int(T_f)
    if T_f < 1:
        raise ConfigError("T_f must be at least 1")
    plant = scenario.plant if G is None else LtiPlant(scenario.plant.A_s, scenario.plant.B_s, G)
    lo, hi = scenario.input_range
    U = excitation_inputs(plant.m, T_f, lo, hi, seed)
    noise = NoiseSampler(plant.G, seed + 1_000_003, distribution)
    return simulate(plant, np.zeros(plant.n), U, noise)
