"""Field, coefficient and decomposed implausibilities.

With ``W = Sigma_e + Sigma_eta`` the field implausibility splits exactly
into the reconstruction error of ``z`` on the retained basis (fixed for
all inputs) plus the coefficient implausibility, whose inner matrix is
``Var[c(x)] + Psi^{-1}`` with ``Psi = G^T W^{-1} G``. After a one-off
factorization of W every evaluation is q-dimensional.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_solve, lu_factor, lu_solve, solve_triangular
from scipy.special import gammainc, gammaincinv, gammaln

from .basis import Projector, _prepare_field
from .covariance import JITTER_LADDER, _try_cholesky, cholesky_with_jitter, combine_error_spec
from .emulator import LowRankVariance
from .errors import InvalidArgumentError, NormMismatchError, NotPositiveDefiniteError

#: Samples per vectorized block in the batch paths.
CHUNK = 4096
DEFAULT_PROBABILITY = 0.995


def _dense_variance(var_f, ell):
    if var_f is None:
        return np.zeros((ell, ell))
    if isinstance(var_f, LowRankVariance) or isinstance(var_f, tuple):
        factor, core = var_f
        core = np.asarray(core, dtype=float)
        if core.ndim == 1:
            core = np.diag(core)
        return factor @ core @ factor.T
    var_f = np.asarray(var_f, dtype=float)
    if var_f.shape != (ell, ell):
        raise InvalidArgumentError(f"field variance has shape {var_f.shape}, expected ({ell}, {ell})")
    return var_f


def field_implausibility_direct(z, e_f, var_f, sigma_e, sigma_eta=None,
                                max_jitter=JITTER_LADDER[-1]):
    """Mahalanobis distance of ``z`` from ``e_f`` under the full ell x ell variance.

    This is the slow reference path: one dense Cholesky per call.
    ``var_f`` may be a dense matrix, a :class:`LowRankVariance`, a
    ``(factor, core)`` pair or ``None``.
    """
    z = np.asarray(z, dtype=float)
    e_f = np.asarray(e_f, dtype=float)
    if z.shape != e_f.shape or z.ndim != 1:
        raise InvalidArgumentError(f"z and e_f must be vectors of equal length, got {z.shape}, {e_f.shape}")
    ell = z.size
    total = _dense_variance(var_f, ell) + sigma_e
    if sigma_eta is not None:
        total = total + sigma_eta
    factor, _ = cholesky_with_jitter(total, max_jitter)
    d = solve_triangular(factor, z - e_f, lower=True, check_finite=False)
    return float(d @ d)


def _psi_solver(gamma_q, weight):
    """``(Psi, W^{-1} G Psi^{-1})`` so that projections are ``K^T v``."""
    winv_g = weight.solve(gamma_q)
    psi = gamma_q.T @ winv_g
    psi = 0.5 * (psi + psi.T)
    factor, _ = _try_cholesky(psi)
    if factor is None:
        raise NotPositiveDefiniteError("Psi = G^T W^-1 G is not positive definite")
    k = cho_solve((factor, True), winv_g.T).T
    return psi, k


def project_error_variances(sigma_e, sigma_eta, basis, weight):
    """Variances of the projected observation error and discrepancy (q x q each)."""
    _, k = _psi_solver(basis.gamma_q, weight)

    def sandwich(sigma):
        if sigma is None:
            return np.zeros((basis.q, basis.q))
        out = k.T @ (sigma @ k)
        return 0.5 * (out + out.T)

    return sandwich(sigma_e), sandwich(sigma_eta)


@dataclass(frozen=True, eq=False)
class MatchPrecomp:
    """One-off quantities for repeated implausibility evaluation.

    ``consistent`` records whether the projection weight equals
    ``Sigma_e + Sigma_eta``; the decomposed field implausibility refuses
    to run otherwise.
    """

    basis: object
    weight: object
    c_z: np.ndarray
    psi: np.ndarray
    psi_inv: np.ndarray
    var_c_e: np.ndarray
    var_c_eta: np.ndarray
    r_w: float
    threshold_t: float
    consistent: bool
    z_white: np.ndarray
    gamma_white: np.ndarray

    @property
    def q(self):
        return self.c_z.size

    @property
    def coefficient_variance(self):
        """Observation-side q x q variance added to the emulator variance."""
        return self.psi_inv if self.consistent else self.var_c_e + self.var_c_eta

    def weighted_error(self, e_c):
        """``(z - G e_c)^T W^{-1} (z - G e_c)`` for rows of ``e_c`` (centred fields)."""
        e_c = np.atleast_2d(e_c)
        b = self.z_white
        cross = e_c @ (self.gamma_white.T @ b)
        quad = np.einsum("ni,ij,nj->n", e_c, self.psi, e_c)
        return np.maximum(b @ b - 2.0 * cross + quad, 0.0)


def make_precomp(basis, z, sigma_e, sigma_eta=None, threshold=None, weight=None, center=True):
    """Project ``z`` and the error variances once, in ``weight``.

    ``weight`` defaults to ``combine_error_spec(sigma_e, sigma_eta)``.
    ``threshold`` defaults to the chi-squared 0.995 quantile on ``ell``
    degrees of freedom.
    """
    if weight is None:
        weight = combine_error_spec(sigma_e, sigma_eta)
    consistent = weight.is_sum_of(sigma_e, sigma_eta)
    zc = _prepare_field(z, basis, center)
    proj = Projector(basis.gamma_q, weight)
    c_z = proj.coefficients(zc)
    r_w = float(proj.residual_norm(zc))
    psi = proj.psi
    psi_inv = solve_triangular(proj.r_factor, np.eye(basis.q))
    psi_inv = psi_inv @ psi_inv.T
    var_c_e, var_c_eta = project_error_variances(sigma_e, sigma_eta, basis, weight)
    if threshold is None:
        threshold = chi_squared_bound(basis.ell, DEFAULT_PROBABILITY)
    return MatchPrecomp(
        basis=basis,
        weight=weight,
        c_z=c_z,
        psi=psi,
        psi_inv=psi_inv,
        var_c_e=var_c_e,
        var_c_eta=var_c_eta,
        r_w=r_w,
        threshold_t=float(threshold),
        consistent=consistent,
        z_white=weight.whiten(zc),
        gamma_white=proj.whitened,
    )


def _as_matrix(var_c, q):
    var_c = np.asarray(var_c, dtype=float)
    if var_c.ndim == 1:
        var_c = np.diag(var_c)
    if var_c.shape != (q, q):
        raise InvalidArgumentError(f"emulator variance must be {q}x{q}, got {var_c.shape}")
    return var_c


def coefficient_implausibility(precomp, e_c, var_c):
    """Implausibility in coefficient space (one input)."""
    e_c = np.asarray(e_c, dtype=float)
    if e_c.shape != (precomp.q,):
        raise InvalidArgumentError(f"expected {precomp.q} coefficient means, got {e_c.shape}")
    inner = _as_matrix(var_c, precomp.q) + precomp.coefficient_variance
    factor, pivot = _try_cholesky(0.5 * (inner + inner.T))
    if factor is None:
        raise NotPositiveDefiniteError(
            f"coefficient variance is not positive definite (smallest pivot {pivot:.3e})", pivot=pivot
        )
    d = solve_triangular(factor, precomp.c_z - e_c, lower=True)
    return float(d @ d)


def coefficient_implausibility_batch(precomp, e_c, var_c):
    """Vectorized coefficient implausibility.

    ``e_c`` has shape (N, q); ``var_c`` is (N, q) diagonal variances or
    (N, q, q) full matrices.
    """
    e_c = np.atleast_2d(np.asarray(e_c, dtype=float))
    var_c = np.asarray(var_c, dtype=float)
    n, q = e_c.shape
    if q != precomp.q:
        raise InvalidArgumentError(f"expected {precomp.q} coefficients per sample, got {q}")
    base = precomp.coefficient_variance
    out = np.empty(n)
    diag = np.arange(q)
    for start in range(0, n, CHUNK):
        block = slice(start, min(start + CHUNK, n))
        m = block.stop - block.start
        inner = np.broadcast_to(base, (m, q, q)).copy()
        if var_c.ndim == 2:
            inner[:, diag, diag] += var_c[block]
        else:
            inner += var_c[block]
        d = precomp.c_z - e_c[block]
        x = np.linalg.solve(inner, d[..., None])[..., 0]
        out[block] = np.einsum("ni,ni->n", d, x)
    return out


class ImplausibilityResult(NamedTuple):
    value: float
    nroy: bool
    r_w: float
    coefficient: float


def _require_consistent(precomp):
    if not precomp.consistent:
        raise NormMismatchError(
            "decomposed field implausibility needs the projection weight W to equal "
            "Sigma_e + Sigma_eta"
        )


def fast_field_implausibility(precomp, e_c, var_c):
    """Exact field implausibility as reconstruction error plus coefficient implausibility."""
    _require_consistent(precomp)
    coef = coefficient_implausibility(precomp, e_c, var_c)
    value = precomp.r_w + coef
    return ImplausibilityResult(value, value < precomp.threshold_t, precomp.r_w, coef)


def fast_field_implausibility_batch(precomp, e_c, var_c):
    """``(field, coefficient)`` implausibility arrays for many samples."""
    _require_consistent(precomp)
    coef = coefficient_implausibility_batch(precomp, e_c, var_c)
    return precomp.r_w + coef, coef


def augment_w_truncation(sigma_e, sigma_eta, basis, max_jitter=JITTER_LADDER[-1]):
    """Error spec whose W also carries the variance of the discarded basis directions.

    The extra term ``G_rest Phi G_rest^T`` (``Phi = d_i^2 / (n - 1)``) is
    folded into the discrepancy slot, so ``W = Sigma_e + Sigma_eta'`` and
    the decomposition applies unchanged. With nothing discarded the
    result is exactly ``combine_error_spec(sigma_e, sigma_eta)``.
    """
    if basis.q == basis.r:
        return combine_error_spec(sigma_e, sigma_eta, max_jitter)
    sigma_e = np.asarray(sigma_e, dtype=float)
    phi = basis.singular_values[basis.q :] ** 2 / (basis.n_runs - 1)
    rest = basis.gamma_rest
    extra = (rest * phi) @ rest.T
    extra = 0.5 * (extra + extra.T)
    base = np.zeros_like(sigma_e) if sigma_eta is None else np.asarray(sigma_eta, dtype=float)
    spec = combine_error_spec(sigma_e, base + extra, max_jitter)
    object.__setattr__(spec, "truncation_variance", extra)
    return spec


def chi_squared_bound(dof, p=DEFAULT_PROBABILITY):
    """Chi-squared quantile: inverse regularized incomplete gamma, Newton-polished."""
    if int(dof) != dof or dof < 1:
        raise InvalidArgumentError(f"dof must be a positive integer, got {dof}")
    if not 0.0 < p < 1.0:
        raise InvalidArgumentError(f"p must lie in (0, 1), got {p}")
    k = 0.5 * dof
    x = 2.0 * gammaincinv(k, p)
    for _ in range(50):
        log_pdf = (k - 1.0) * np.log(x / 2.0) - x / 2.0 - gammaln(k) - np.log(2.0)
        step = (gammainc(k, x / 2.0) - p) / np.exp(log_pdf)
        x_new = x - step
        if x_new <= 0:
            x_new = x / 2.0
        if abs(x_new - x) <= 1e-14 * x:
            x = x_new
            break
        x = x_new
    return float(x)


def nroy_classify(values, threshold_t):
    """Mask of not-ruled-out values (strictly below the threshold) and its mean."""
    values = np.asarray(values, dtype=float)
    mask = values < threshold_t
    return mask, float(mask.mean()) if mask.size else 0.0


def woodbury_solve(a, u, c, v, b):
    """``(A + U C V)^{-1} b`` using only solves with ``A`` and a small system."""
    lu = lu_factor(a)
    a_inv_b = lu_solve(lu, b)
    a_inv_u = lu_solve(lu, u)
    small = np.linalg.inv(c) + v @ a_inv_u
    return a_inv_b - a_inv_u @ np.linalg.solve(small, v @ a_inv_b)
