"""Terminal-case detection and observation-driven basis rotation.

The rotation is a deterministic two-stage procedure:

1. The leading vector is the W-projection of ``z`` onto the ensemble
   span, blended toward the leading SVD direction,
   ``v(lam) ~ (1 - lam) v1 + lam g1``, with ``lam`` the smallest value on
   a regular grid for which ``v(lam)`` still captures
   ``min_first_vector_variance`` of the ensemble sum of squares.
2. When ``lam > 0`` the W-unit direction completing the plane of ``v1``
   and ``g1`` comes next, so that any two leading vectors reproduce the
   span-optimal representation of ``z``. The remaining vectors are the
   SVD of the ensemble after W-orthogonal deflation of the leading ones.

All rotated vectors are W-orthonormal.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import qr, solve_triangular

from .basis import (
    DEFAULT_THRESHOLD,
    RANK_TOL,
    Basis,
    _prepare_field,
    _whiten,
    fix_signs,
    reconstruction_error,
    svd_basis,
    truncate_basis,
    varmse_curve,
)
from .errors import ConstraintInfeasibleError, InvalidArgumentError

BLEND_GRID = 512


@dataclass(frozen=True)
class RotationConfig:
    min_first_vector_variance: float = 0.10
    truncation_threshold: float = DEFAULT_THRESHOLD
    weight: object = None
    blend_grid: int = BLEND_GRID
    complete_plane: bool = True

    def __post_init__(self):
        if not 0.0 < self.min_first_vector_variance < 1.0:
            raise InvalidArgumentError(
                f"min_first_vector_variance must lie in (0, 1), got {self.min_first_vector_variance}"
            )
        if not 0.0 < self.truncation_threshold <= 1.0:
            raise InvalidArgumentError(
                f"truncation_threshold must lie in (0, 1], got {self.truncation_threshold}"
            )
        if self.blend_grid < 2:
            raise InvalidArgumentError("blend_grid needs at least two points")


class TerminalVerdict(NamedTuple):
    terminal: bool
    r_w: float
    threshold: float


def terminal_case_check(basis, z, weight, threshold_t, center=True):
    """Whether the reconstruction error alone already exceeds ``threshold_t``."""
    r_w = reconstruction_error(basis, z, weight, center=center)
    return TerminalVerdict(bool(r_w > threshold_t), float(r_w), float(threshold_t))


def _w_norm(weight, v):
    return float(np.linalg.norm(_whiten(weight, v)))


def _w_inner(weight, a, b):
    return float(_whiten(weight, a) @ _whiten(weight, b))


def captured_fraction(directions, f_centered):
    """L2 fraction of the ensemble sum of squares on each single direction (columns)."""
    directions = np.atleast_2d(np.asarray(directions, dtype=float).T).T
    proj = f_centered.T @ directions
    norms = np.sum(directions**2, axis=0)
    return np.sum(proj**2, axis=0) / (norms * np.sum(f_centered**2))


def _blend(v1, g1, lam):
    return (1.0 - lam) * v1[:, None] + lam * g1[:, None]


def blend_weight(v1, g1, f_centered, min_fraction, grid=BLEND_GRID):
    """Smallest grid value ``lam`` whose blend meets the variance constraint."""
    lams = np.linspace(0.0, 1.0, grid)
    fractions = captured_fraction(_blend(v1, g1, lams), f_centered)
    ok = fractions >= min_fraction
    return float(lams[np.argmax(ok)]) if ok.any() else 1.0


def _span_variance(vectors, f_centered):
    q_mat, _ = qr(vectors, mode="economic")
    captured = np.cumsum(np.sum((q_mat.T @ f_centered) ** 2, axis=1))
    explained = captured / np.sum(f_centered**2)
    explained[-1] = 1.0
    return explained


def rotate_basis(ensemble, z, config=RotationConfig(), center=True):
    """Rotated basis whose leading vectors explain ``z`` as well as the ensemble allows.

    Returns a :class:`Basis` of kind ``"rotated"`` truncated at
    ``config.truncation_threshold`` (raised, if necessary, so that its
    reconstruction error of ``z`` never exceeds that of the equally
    truncated SVD basis).
    """
    weight = config.weight
    svd = svd_basis(ensemble)
    if svd.r < 2:
        raise InvalidArgumentError("rotation needs an ensemble of rank >= 2")
    svd_trunc = truncate_basis(svd, config.truncation_threshold)
    f_c = ensemble.f_centered
    zc = _prepare_field(z, svd, center)

    gamma1 = svd.vectors[:, 0]
    if captured_fraction(gamma1, f_c)[0] < config.min_first_vector_variance * (1 - 1e-12):
        raise ConstraintInfeasibleError(
            "the leading SVD direction explains less than "
            f"{config.min_first_vector_variance:.3g} of the ensemble variance"
        )

    # W-projection of z onto the full ensemble span
    a_mat = _whiten(weight, svd.vectors)
    b = _whiten(weight, zc)
    coef, *_ = np.linalg.lstsq(a_mat, b, rcond=None)
    if np.linalg.norm(a_mat @ coef) <= 1e-12 * max(np.linalg.norm(b), 1e-300):
        return svd_trunc

    v1 = svd.vectors @ coef
    v1 /= _w_norm(weight, v1)
    g1 = gamma1 / _w_norm(weight, gamma1)
    if _w_inner(weight, v1, g1) < 0:
        g1 = -g1

    lam = blend_weight(v1, g1, f_c, config.min_first_vector_variance, config.blend_grid)
    lead = _blend(v1, g1, lam)[:, 0]
    lead /= _w_norm(weight, lead)
    leading = [lead]
    if lam > 0 and config.complete_plane:
        comp = v1 - _w_inner(weight, v1, lead) * lead
        norm = _w_norm(weight, comp)
        if norm > 1e-10:
            leading.append(comp / norm)
    leading = np.column_stack(leading)

    # W-orthogonal deflation of the ensemble by the leading vectors
    lw = _whiten(weight, leading)
    deflated = f_c - leading @ (lw.T @ _whiten(weight, f_c))
    u, s, _ = np.linalg.svd(deflated, full_matrices=False)
    s_max = np.linalg.svd(f_c, compute_uv=False)[0]
    keep = min(int(np.sum(s > RANK_TOL * s_max)), svd.r - leading.shape[1])
    vectors = np.column_stack([leading, u[:, :keep]])

    # W-Gram-Schmidt, preserving the span of every prefix
    _, r_fac = qr(_whiten(weight, vectors), mode="economic")
    vectors = solve_triangular(r_fac.T, vectors.T, lower=True).T
    vectors = fix_signs(vectors)

    coords, *_ = np.linalg.lstsq(vectors, f_c, rcond=None)
    rotated = Basis(
        vectors=vectors,
        singular_values=np.linalg.norm(coords, axis=1),
        mu=svd.mu,
        q=vectors.shape[1],
        variance_explained=_span_variance(vectors, f_c),
        n_runs=ensemble.n,
        kind="rotated",
    )
    rotated = truncate_basis(rotated, config.truncation_threshold)

    target = reconstruction_error(svd_trunc, zc, weight, center=False)
    curve = varmse_curve(rotated, zc, weight, center=False)
    slack = 1e-10 * max(float(b @ b), 1.0)
    for point in curve:
        if point.reconstruction_error <= target + slack:
            if point.k > rotated.q:
                rotated = rotated.with_q(point.k)
            break
    return rotated
