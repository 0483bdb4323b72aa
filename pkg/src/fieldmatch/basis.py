"""Ensemble centring, SVD bases and projection in a weighted norm.

Every weighted operation works in whitened coordinates: with ``W = L L^T``
the weighted least-squares problem ``min ||f - G c||_W`` becomes an
ordinary least-squares problem for ``L^{-1} G`` and ``L^{-1} f``. ``W`` is
never inverted explicitly. ``weight=None`` means the identity (L2).
"""

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import qr, solve_triangular

from .errors import (
    DegenerateEnsembleError,
    IllConditionedProjectionError,
    InvalidArgumentError,
)

#: Singular values below this fraction of the largest are treated as zero.
RANK_TOL = 1e-10
#: Default fraction of ensemble variance kept when truncating.
DEFAULT_THRESHOLD = 0.90
#: Largest condition number of Psi = G^T W^{-1} G accepted by a projection.
MAX_CONDITION = 1e12


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Simulator runs ``f`` (ell x n, one column per run) and their design."""

    f: np.ndarray
    design_x: Optional[np.ndarray]
    mu: np.ndarray
    f_centered: np.ndarray

    @property
    def n(self):
        return self.f.shape[1]

    @property
    def ell(self):
        return self.f.shape[0]


def center_ensemble(f, design_x=None):
    f = np.asarray(f, dtype=float)
    if f.ndim != 2:
        raise InvalidArgumentError(f"ensemble must be a matrix, got {f.ndim} dims")
    if f.shape[1] < 2:
        raise InvalidArgumentError("an ensemble needs at least two runs")
    if not np.all(np.isfinite(f)):
        raise InvalidArgumentError("ensemble contains non-finite values")
    if design_x is not None:
        design_x = np.asarray(design_x, dtype=float)
        if design_x.ndim == 1:
            design_x = design_x[:, None]
        if design_x.shape[0] != f.shape[1]:
            raise InvalidArgumentError(
                f"design has {design_x.shape[0]} rows but ensemble has {f.shape[1]} runs"
            )
        if not np.all(np.isfinite(design_x)):
            raise InvalidArgumentError("design contains non-finite values")
    mu = f.mean(axis=1)
    return Ensemble(f, design_x, mu, f - mu[:, None])


@dataclass(frozen=True, eq=False)
class Basis:
    """Ordered basis vectors, of which the first ``q`` are retained.

    ``vectors`` holds all ``r`` columns; ``singular_values[i]`` is the norm
    of the ensemble's coordinates on column ``i`` (the SVD singular value
    for an SVD basis). ``variance_explained[k-1]`` is the fraction of the
    centred ensemble's sum of squares captured by the first ``k`` columns.
    """

    vectors: np.ndarray
    singular_values: np.ndarray
    mu: np.ndarray
    q: int
    variance_explained: np.ndarray
    n_runs: int
    kind: str = "svd"

    @property
    def r(self):
        return self.vectors.shape[1]

    @property
    def ell(self):
        return self.vectors.shape[0]

    @property
    def gamma_q(self):
        return self.vectors[:, : self.q]

    @property
    def gamma_rest(self):
        return self.vectors[:, self.q :]

    def with_q(self, q):
        if not 1 <= q <= self.r:
            raise InvalidArgumentError(f"q must lie in [1, {self.r}], got {q}")
        return replace(self, q=int(q))


def fix_signs(vectors):
    """Flip columns so each one's largest-magnitude entry is positive."""
    vectors = np.array(vectors, dtype=float, copy=True)
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def svd_basis(ensemble):
    """Left singular vectors of the centred ensemble, all ``r`` of them kept."""
    u, s, _ = np.linalg.svd(ensemble.f_centered, full_matrices=False)
    if s.size == 0 or s[0] == 0.0:
        raise DegenerateEnsembleError("centred ensemble is identically zero")
    r = int(np.sum(s > RANK_TOL * s[0]))
    s = s[:r]
    energy = np.cumsum(s**2)
    explained = energy / energy[-1]
    explained[-1] = 1.0
    return Basis(
        vectors=fix_signs(u[:, :r]),
        singular_values=s,
        mu=ensemble.mu,
        q=r,
        variance_explained=explained,
        n_runs=ensemble.n,
    )


def truncate_basis(basis, threshold=DEFAULT_THRESHOLD):
    """Keep the fewest leading vectors whose cumulative variance reaches ``threshold``."""
    if not 0.0 < threshold <= 1.0:
        raise InvalidArgumentError(f"threshold must lie in (0, 1], got {threshold}")
    # slack of a few ulps so that 9/10 counts as reaching 0.9
    reached = basis.variance_explained >= threshold - 1e-12
    q = int(np.argmax(reached)) + 1 if reached.any() else basis.r
    return basis.with_q(q)


def _whiten(weight, x):
    return x if weight is None else weight.whiten(x)


class Projector:
    """Cached whitened factorization of a set of basis columns.

    Reuse one instance when projecting many fields on the same basis and
    weight; construction costs one triangular solve with ``ell x k``
    right-hand sides.
    """

    def __init__(self, vectors, weight=None):
        vectors = np.asarray(vectors, dtype=float)
        if weight is not None and weight.ell != vectors.shape[0]:
            raise InvalidArgumentError(
                f"weight is {weight.ell}x{weight.ell} but basis vectors have length {vectors.shape[0]}"
            )
        self.vectors = vectors
        self.weight = weight
        self.whitened = _whiten(weight, vectors)
        self.q_factor, self.r_factor = qr(self.whitened, mode="economic")
        d = np.abs(np.diag(self.r_factor))
        cond = np.inf if d.min() == 0 else np.linalg.cond(self.r_factor) ** 2
        self.condition = cond
        if not cond < MAX_CONDITION:
            raise IllConditionedProjectionError(
                f"G^T W^-1 G is ill-conditioned (condition estimate {cond:.3e})",
                condition=cond,
            )

    @property
    def psi(self):
        """``G^T W^{-1} G``."""
        return self.r_factor.T @ self.r_factor

    def coefficients(self, field):
        b = _whiten(self.weight, field)
        return solve_triangular(self.r_factor, self.q_factor.T @ b)

    def residual_norm(self, field):
        """``(f - G c)^T W^{-1} (f - G c)`` for the optimal ``c``."""
        b = _whiten(self.weight, field)
        resid = b - self.q_factor @ (self.q_factor.T @ b)
        return np.sum(resid**2, axis=0)


def _prepare_field(field, basis, center):
    field = np.asarray(field, dtype=float)
    if field.shape[0] != basis.ell:
        raise InvalidArgumentError(f"field has length {field.shape[0]}, basis has {basis.ell}")
    if center:
        field = field - (basis.mu if field.ndim == 1 else basis.mu[:, None])
    return field


def project(field, basis, weight=None, center=True):
    """Weighted least-squares coefficients of ``field`` on ``basis.gamma_q``.

    Parameters
    ----------
    field : ndarray, shape (ell,) or (ell, m)
        One field or a matrix of fields in columns.
    weight : ErrorSpec or None
        Projection norm; ``None`` is plain L2.
    center : bool
        Subtract ``basis.mu`` first (fields are stored un-centred).

    Returns
    -------
    ndarray, shape (q,) or (q, m)
    """
    field = _prepare_field(field, basis, center)
    return Projector(basis.gamma_q, weight).coefficients(field)


def reconstruct(c, basis, add_mean=True):
    c = np.asarray(c, dtype=float)
    if c.shape[0] != basis.q:
        raise InvalidArgumentError(f"expected {basis.q} coefficients, got {c.shape[0]}")
    out = basis.gamma_q @ c
    if add_mean:
        out = out + (basis.mu if out.ndim == 1 else basis.mu[:, None])
    return out


def reconstruction_error(basis, z, weight=None, center=True):
    """Squared W-norm of the part of ``z`` the retained vectors cannot represent."""
    z = _prepare_field(z, basis, center)
    out = Projector(basis.gamma_q, weight).residual_norm(z)
    return float(out) if np.ndim(out) == 0 else out


class VarMSEPoint(NamedTuple):
    k: int
    variance_explained: float
    reconstruction_error: float


def varmse_curve(basis, z, weight=None, center=True):
    """Variance explained and reconstruction error of ``z`` for every ``k = 1..r``."""
    z = _prepare_field(z, basis, center)
    if z.ndim != 1:
        raise InvalidArgumentError("varmse_curve takes a single observation vector")
    proj = Projector(basis.vectors, weight)
    b = _whiten(weight, z)
    captured = np.cumsum((proj.q_factor.T @ b) ** 2)
    # differences of a running sum keep the curve monotone in floating point
    errors = np.maximum(b @ b - captured, 0.0)
    return [
        VarMSEPoint(k + 1, float(basis.variance_explained[k]), float(errors[k]))
        for k in range(basis.r)
    ]
