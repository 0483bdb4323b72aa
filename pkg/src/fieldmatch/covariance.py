"""Grids, Gaussian error covariances and the SPD weight matrix W.

Field vectors are laid out lon-major: index ``i = j_lat * n_lon + j_lon``,
so longitude varies fastest.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotrf

from .errors import InvalidArgumentError, NotPositiveDefiniteError

#: Relative jitter ladder (times mean diagonal) tried after a plain factorization fails.
JITTER_LADDER = (1e-12, 1e-10, 1e-8, 1e-6)


@dataclass(frozen=True)
class Grid:
    """Regular longitude-latitude grid (degrees)."""

    lon: np.ndarray
    lat: np.ndarray

    def __post_init__(self):
        lon = np.asarray(self.lon, dtype=float)
        lat = np.asarray(self.lat, dtype=float)
        if lon.ndim != 1 or lat.ndim != 1 or lon.size == 0 or lat.size == 0:
            raise InvalidArgumentError("lon and lat must be non-empty vectors")
        if np.any(np.diff(lon) <= 0) or lon[0] < 0 or lon[-1] >= 360:
            raise InvalidArgumentError("lon must be strictly increasing in [0, 360)")
        if np.any(np.diff(lat) <= 0) or lat[0] < -90 or lat[-1] > 90:
            raise InvalidArgumentError("lat must be strictly increasing in [-90, 90]")
        object.__setattr__(self, "lon", lon)
        object.__setattr__(self, "lat", lat)

    @property
    def n_lon(self):
        return self.lon.size

    @property
    def n_lat(self):
        return self.lat.size

    @property
    def ell(self):
        return self.n_lon * self.n_lat

    def coordinates(self):
        """Per-index ``(lon_i, lat_i)`` arrays of length ``ell``."""
        return np.tile(self.lon, self.n_lat), np.repeat(self.lat, self.n_lon)


def build_grid(n_lon, n_lat):
    """Equally spaced longitudes from 0 and cell-centred latitudes."""
    if int(n_lon) != n_lon or int(n_lat) != n_lat or n_lon < 1 or n_lat < 1:
        raise InvalidArgumentError(f"grid counts must be positive integers, got {n_lon}x{n_lat}")
    n_lon, n_lat = int(n_lon), int(n_lat)
    lon = 360.0 * np.arange(n_lon) / n_lon
    lat = -90.0 + 180.0 * (np.arange(n_lat) + 0.5) / n_lat
    return Grid(lon, lat)


@dataclass(frozen=True)
class SigmaField:
    """Per-location standard deviations, length ``ell``."""

    sigma: np.ndarray

    def __post_init__(self):
        sigma = np.asarray(self.sigma, dtype=float).ravel()
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise InvalidArgumentError("all sigma values must be finite and > 0")
        object.__setattr__(self, "sigma", sigma)


def regional_sigma(grid, default, regions=()):
    """Build a SigmaField that is ``default`` except inside lon/lat boxes.

    Each region is a mapping with optional ``lat_min``, ``lat_max``,
    ``lon_min``, ``lon_max`` (inclusive bounds) and a required ``sigma``.
    Later regions override earlier ones.
    """
    lon, lat = grid.coordinates()
    sigma = np.full(grid.ell, float(default))
    for region in regions:
        region = dict(region)
        value = region.pop("sigma")
        unknown = set(region) - {"lat_min", "lat_max", "lon_min", "lon_max"}
        if unknown:
            raise InvalidArgumentError(f"unknown region keys: {sorted(unknown)}")
        mask = (
            (lat >= region.get("lat_min", -np.inf))
            & (lat <= region.get("lat_max", np.inf))
            & (lon >= region.get("lon_min", -np.inf))
            & (lon <= region.get("lon_max", np.inf))
        )
        sigma[mask] = value
    return SigmaField(sigma)


def _lon_distance(a, b):
    d = np.abs(a - b) % 360.0
    return np.minimum(d, 360.0 - d)


def gaussian_covariance(grid, delta, sigma_field):
    """Gaussian covariance over grid locations.

    Entry ``(i, j)`` is ``s_i s_j exp(-(dlon/delta_lon)^2 - (dlat/delta_lat)^2)``
    with longitude differences taken as the shortest angular distance.
    """
    d_lon, d_lat = (float(d) for d in delta)
    if d_lon <= 0 or d_lat <= 0:
        raise InvalidArgumentError(f"correlation lengths must be positive, got {delta}")
    if isinstance(sigma_field, SigmaField):
        sigma = sigma_field.sigma
    elif np.isscalar(sigma_field):
        sigma = SigmaField(np.full(grid.ell, float(sigma_field))).sigma
    else:
        sigma = SigmaField(sigma_field).sigma
    if sigma.size != grid.ell:
        raise InvalidArgumentError(f"sigma has length {sigma.size}, grid has {grid.ell} cells")

    lon, lat = grid.coordinates()
    cov = np.empty((grid.ell, grid.ell))
    # row blocks keep the temporaries small for large grids
    step = max(1, 2**22 // grid.ell)
    for start in range(0, grid.ell, step):
        rows = slice(start, min(start + step, grid.ell))
        dlon = _lon_distance(lon[rows, None], lon[None, :]) / d_lon
        dlat = (lat[rows, None] - lat[None, :]) / d_lat
        cov[rows] = np.exp(-(dlon**2) - dlat**2)
        cov[rows] *= sigma[rows, None]
        cov[rows] *= sigma[None, :]
    upper = np.triu_indices(grid.ell, 1)
    cov.T[upper] = cov[upper]
    np.fill_diagonal(cov, sigma**2)
    return cov


def _leading_pivot(a, k):
    """Pivot of the k-th (1-based) Cholesky step of ``a``."""
    if k == 1:
        return float(a[0, 0])
    lead = cholesky(a[: k - 1, : k - 1], lower=True)
    s = solve_triangular(lead, a[: k - 1, k - 1], lower=True)
    return float(a[k - 1, k - 1] - s @ s)


def _try_cholesky(a):
    """Lower factor or ``(None, pivot)`` when ``a`` is not numerically SPD."""
    factor, info = dpotrf(a, lower=1, clean=1, overwrite_a=0)
    if info > 0:
        return None, _leading_pivot(a, info)
    if info < 0:
        raise InvalidArgumentError("matrix contains invalid entries")
    pivots = np.diag(factor) ** 2
    # a pivot at rounding level means the matrix is singular to working precision
    floor = a.shape[0] * np.finfo(float).eps * np.max(np.abs(np.diag(a)))
    if pivots.min() <= floor:
        return None, float(pivots.min())
    return factor, float(pivots.min())


def cholesky_with_jitter(a, max_jitter=JITTER_LADDER[-1]):
    """Cholesky factor of ``a``, adding diagonal jitter on failure.

    The jitter climbs :data:`JITTER_LADDER` (relative to the mean
    diagonal) but never beyond ``max_jitter``.

    Returns
    -------
    factor : ndarray
        Lower-triangular factor of ``a + jitter * I``.
    jitter : float
        Absolute amount added to the diagonal (0.0 when none was needed).
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidArgumentError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError("matrix has non-finite entries")
    factor, pivot = _try_cholesky(a)
    if factor is not None:
        return factor, 0.0
    scale = float(np.mean(np.diag(a)))
    if scale <= 0:
        scale = 1.0
    smallest = pivot
    for eps in JITTER_LADDER:
        if eps > max_jitter:
            break
        jitter = eps * scale
        shifted = a.copy()
        shifted[np.diag_indices_from(shifted)] += jitter
        factor, pivot = _try_cholesky(shifted)
        if factor is not None:
            return factor, jitter
        smallest = pivot
    raise NotPositiveDefiniteError(
        f"matrix is not positive definite; smallest pivot {smallest:.3e} "
        f"after jitter up to {max_jitter:g} x mean diagonal",
        pivot=smallest,
        jitter=max_jitter,
    )


@dataclass(frozen=True, eq=False)
class ErrorSpec:
    """Observation error, discrepancy and their factorized sum W.

    ``w`` includes any jitter that was needed to factorize it; ``jitter``
    records the absolute diagonal shift.
    """

    sigma_e: np.ndarray
    sigma_eta: np.ndarray
    w: np.ndarray
    w_factor: np.ndarray
    jitter: float = 0.0
    truncation_variance: np.ndarray = field(default=None, repr=False)

    @property
    def ell(self):
        return self.w.shape[0]

    def whiten(self, b):
        """``L^{-1} b`` where ``W = L L^T``."""
        return solve_triangular(self.w_factor, b, lower=True, check_finite=False)

    def solve(self, b):
        """``W^{-1} b`` through the stored factor."""
        return cho_solve((self.w_factor, True), b, check_finite=False)

    def is_sum_of(self, sigma_e, sigma_eta=None, rtol=1e-12):
        """Whether ``w`` equals ``sigma_e + sigma_eta`` (plus recorded jitter)."""
        target = np.array(sigma_e, dtype=float, copy=True)
        if sigma_eta is not None:
            target += sigma_eta
        if target.shape != self.w.shape:
            return False
        target[np.diag_indices_from(target)] += self.jitter
        scale = max(np.max(np.abs(target)), np.finfo(float).tiny)
        return bool(np.max(np.abs(target - self.w)) <= rtol * scale)


def _check_symmetric(m, name):
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise InvalidArgumentError(f"{name} must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    scale = max(np.max(np.abs(m)), 1.0)
    if np.max(np.abs(m - m.T)) > 1e-12 * scale:
        raise InvalidArgumentError(f"{name} is not symmetric")
    return m


def combine_error_spec(sigma_e, sigma_eta=None, max_jitter=JITTER_LADDER[-1]):
    """Form ``W = sigma_e + sigma_eta`` and factorize it.

    ``sigma_eta=None`` stands for a zero discrepancy.
    """
    sigma_e = _check_symmetric(sigma_e, "sigma_e")
    if sigma_eta is None:
        sigma_eta = np.zeros_like(sigma_e)
    sigma_eta = _check_symmetric(sigma_eta, "sigma_eta")
    if sigma_eta.shape != sigma_e.shape:
        raise InvalidArgumentError(f"shape mismatch: {sigma_e.shape} vs {sigma_eta.shape}")
    w = sigma_e + sigma_eta
    factor, jitter = cholesky_with_jitter(w, max_jitter)
    if jitter:
        w[np.diag_indices_from(w)] += jitter
    return ErrorSpec(sigma_e, sigma_eta, w, factor, jitter)
