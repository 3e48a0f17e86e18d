"""Symmetric-matrix helpers shared by the rest of the package.

All functions take and return plain numpy arrays. Symmetric inputs are
symmetrized on entry so every eigenvalue routine sees an exactly
symmetric matrix.
"""

from dataclasses import dataclass, field

import numpy as np

PSD_TOL = 1e-9
STRICT_MARGIN = 1e-8


class InvalidMatrix(ValueError):
    """Matrix is non-finite, non-square or otherwise malformed."""


class NotPsd(ValueError):
    """Matrix expected to be positive semidefinite is not."""


class DimError(ValueError):
    """Operand dimensions do not agree."""


def as_sym(M):
    """Return a finite, exactly symmetric float copy of ``M``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1] or M.shape[0] < 1:
        raise InvalidMatrix(f"expected a non-empty square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidMatrix("matrix has non-finite entries")
    return 0.5 * (M + M.T)


def eigvalsh(M):
    return np.linalg.eigvalsh(as_sym(M))


def min_eigenvalue(M):
    return float(eigvalsh(M)[0])


def max_eigenvalue(M):
    return float(eigvalsh(M)[-1])


def is_psd(M, tol=PSD_TOL):
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return min_eigenvalue(M) >= -tol


def is_pd(M, tol=PSD_TOL):
    return min_eigenvalue(M) > tol


def sqrt_factor(M, tol=PSD_TOL):
    """Symmetric square root ``S`` with ``S.T @ S == M``.

    Eigenvalues in ``[-tol, 0)`` are clipped to zero; anything more
    negative raises :class:`NotPsd`.
    """
    w, V = np.linalg.eigh(as_sym(M))
    if w[0] < -tol * max(1.0, abs(w[-1])):
        raise NotPsd(f"matrix has eigenvalue {w[0]:.3e}")
    w = np.clip(w, 0.0, None)
    S = (V * np.sqrt(w)) @ V.T
    return 0.5 * (S + S.T)


def weighted_norm_sq(x, M):
    """``x' M x`` for a vector ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    M = as_sym(M)
    if M.shape[0] != x.size:
        raise DimError(f"vector of length {x.size} against {M.shape} weight")
    return float(x @ M @ x)


@dataclass(frozen=True)
class CostWeights:
    """Stage-cost weights ``l(u, x) = |u|_R^2 + |x|_Q^2``.

    Attributes:
        Q: State weight, positive definite.
        R: Input weight, positive definite.
        M_Q: Symmetric factor with ``M_Q.T @ M_Q == Q``.
        M_R: Symmetric factor with ``M_R.T @ M_R == R``.
    """

    Q: np.ndarray
    R: np.ndarray
    M_Q: np.ndarray = field(init=False, repr=False)
    M_R: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Q, R = as_sym(self.Q), as_sym(self.R)
        for name, W in (("Q", Q), ("R", R)):
            if not is_pd(W):
                raise NotPsd(f"{name} must be positive definite")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "M_Q", sqrt_factor(Q))
        object.__setattr__(self, "M_R", sqrt_factor(R))

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.R.shape[0]

    def stage_cost(self, u, x):
        return weighted_norm_sq(u, self.R) + weighted_norm_sq(x, self.Q)
