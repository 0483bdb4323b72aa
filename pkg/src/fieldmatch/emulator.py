"""Gaussian-process emulators for scalar outputs.

Each emulator is a GP with a constant or linear trend and a squared
exponential correlation

    R(x, x') = exp(-sum_d ((x_d - x'_d) / theta_d)^2)

plus a relative nugget on the diagonal. Lengthscales are chosen by
maximizing the profile log likelihood (trend and process variance
profiled out analytically) from several Latin hypercube starts.
Predictions are plug-in: the estimated trend is treated as known.
"""

import logging
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.stats import qmc

from .basis import project
from .covariance import _try_cholesky
from .errors import (
    FitFailureError,
    InvalidArgumentError,
    SingularCorrelationError,
)

log = logging.getLogger(__name__)

_PENALTY = 1e25
FALLBACK_NUGGET = 0.1


@dataclass(frozen=True)
class GpConfig:
    mean_kind: str = "constant"
    nugget: float = 1e-8
    lengthscale_bounds: tuple = (0.05, 10.0)
    restarts: int = 5
    seed: int = 0
    process_variance: Optional[float] = None

    def __post_init__(self):
        if self.mean_kind not in ("constant", "linear"):
            raise InvalidArgumentError(f"mean_kind must be 'constant' or 'linear', got {self.mean_kind!r}")
        if self.nugget < 0:
            raise InvalidArgumentError("nugget must be non-negative")
        if self.restarts < 1:
            raise InvalidArgumentError("restarts must be >= 1")
        bounds = np.asarray(self.lengthscale_bounds, dtype=float)
        if np.any(bounds <= 0) or np.any(bounds[..., 0] > bounds[..., 1]):
            raise InvalidArgumentError(f"invalid lengthscale bounds {self.lengthscale_bounds}")
        if self.process_variance is not None and self.process_variance <= 0:
            raise InvalidArgumentError("fixed process variance must be positive")

    def bounds_for(self, p):
        bounds = np.asarray(self.lengthscale_bounds, dtype=float)
        if bounds.ndim == 1:
            bounds = np.tile(bounds, (p, 1))
        if bounds.shape != (p, 2):
            raise InvalidArgumentError(f"lengthscale bounds must be (2,) or ({p}, 2)")
        return bounds


def correlation(xa, xb, lengthscales):
    d = (xa[:, None, :] - xb[None, :, :]) / lengthscales
    return np.exp(-np.sum(d**2, axis=-1))


def trend_matrix(x, mean_kind):
    ones = np.ones((x.shape[0], 1))
    return ones if mean_kind == "constant" else np.hstack([ones, x])


class _Profile(NamedTuple):
    nll: float
    beta: np.ndarray
    variance: float
    factor: np.ndarray


def _profile(design, y, h, lengthscales, nugget, fixed_variance=None):
    n = y.size
    corr = correlation(design, design, lengthscales)
    corr[np.diag_indices(n)] += nugget
    factor, _ = _try_cholesky(corr)
    if factor is None:
        return None
    lh = solve_triangular(factor, h, lower=True)
    ly = solve_triangular(factor, y, lower=True)
    beta, *_ = np.linalg.lstsq(lh, ly, rcond=None)
    resid = ly - lh @ beta
    ss = float(resid @ resid)
    logdet = float(np.sum(np.log(np.diag(factor))))
    if fixed_variance is None:
        variance = ss / n
        if variance <= 0:
            return None
        nll = 0.5 * n * np.log(variance) + logdet + 0.5 * n * (1.0 + np.log(2 * np.pi))
    else:
        variance = fixed_variance
        nll = 0.5 * ss / variance + 0.5 * n * np.log(variance) + logdet + 0.5 * n * np.log(2 * np.pi)
    return _Profile(nll, beta, variance, factor)


class GpEmulator:
    """A fitted GP for one scalar output.

    ``nugget`` is the absolute variance added to the diagonal
    (``process_variance * nugget_relative``).
    """

    def __init__(self, design, observations, mean_kind, mean_coefficients, lengthscales,
                 process_variance, nugget_relative, log_likelihood=np.nan,
                 start_log_likelihoods=()):
        self.design = np.asarray(design, dtype=float)
        self.observations = np.asarray(observations, dtype=float)
        self.mean_kind = mean_kind
        self.mean_coefficients = np.asarray(mean_coefficients, dtype=float)
        self.lengthscales = np.asarray(lengthscales, dtype=float)
        self.process_variance = float(process_variance)
        self.nugget_relative = float(nugget_relative)
        self.log_likelihood = float(log_likelihood)
        self.start_log_likelihoods = tuple(start_log_likelihoods)
        self.clamp_count = 0

        n = self.observations.size
        corr = correlation(self.design, self.design, self.lengthscales)
        corr[np.diag_indices(n)] += self.nugget_relative
        self.factor, _ = _try_cholesky(corr)
        if self.factor is None:
            raise SingularCorrelationError("correlation matrix is singular at the fitted lengthscales")
        resid = self.observations - trend_matrix(self.design, mean_kind) @ self.mean_coefficients
        self.weights = cho_solve((self.factor, True), resid)

    @property
    def nugget(self):
        return self.process_variance * self.nugget_relative

    @property
    def p(self):
        return self.design.shape[1]

    def trend(self, x):
        return trend_matrix(x, self.mean_kind) @ self.mean_coefficients

    def predict(self, x):
        """Predictive mean and variance at the rows of ``x`` (shape (m, p))."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.p:
            raise InvalidArgumentError(f"expected inputs with {self.p} columns, got {x.shape[1]}")
        if self.process_variance == 0.0:
            return self.trend(x), np.zeros(x.shape[0])
        r = correlation(x, self.design, self.lengthscales)
        mean = self.trend(x) + r @ self.weights
        v = solve_triangular(self.factor, r.T, lower=True)
        var = self.process_variance * (1.0 - np.sum(v**2, axis=0))
        negative = var < 0
        if negative.any():
            self.clamp_count += int(negative.sum())
            var[negative] = 0.0
        return mean, var

    def to_dict(self):
        return {
            "design": self.design.tolist(),
            "observations": self.observations.tolist(),
            "mean_kind": self.mean_kind,
            "mean_coefficients": self.mean_coefficients.tolist(),
            "lengthscales": self.lengthscales.tolist(),
            "process_variance": self.process_variance,
            "nugget_relative": self.nugget_relative,
            "log_likelihood": self.log_likelihood,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["design"], d["observations"], d["mean_kind"], d["mean_coefficients"],
            d["lengthscales"], d["process_variance"], d["nugget_relative"],
            d.get("log_likelihood", np.nan),
        )


def predict_gp(em, x):
    """``(mean, variance)`` at one input vector."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("prediction input must be finite")
    mean, var = em.predict(x.reshape(1, -1))
    return float(mean[0]), float(var[0])


def profile_log_likelihood(design, y, lengthscales, config=GpConfig()):
    """Profile log likelihood at fixed lengthscales (``-inf`` if singular)."""
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    prof = _profile(design, y, trend_matrix(design, config.mean_kind),
                    np.asarray(lengthscales, dtype=float), config.nugget, config.process_variance)
    return -np.inf if prof is None else -prof.nll


def _lhs_unit(p, n, seed):
    return qmc.LatinHypercube(d=p, seed=seed).random(n)


def fit_gp(design, y, config=GpConfig()):
    """Fit one emulator by multi-start profile maximum likelihood."""
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    y = np.asarray(y, dtype=float).ravel()
    n, p = design.shape
    if y.size != n:
        raise InvalidArgumentError(f"design has {n} rows but y has {y.size} values")
    if not (np.all(np.isfinite(design)) and np.all(np.isfinite(y))):
        raise InvalidArgumentError("design and observations must be finite")
    h = trend_matrix(design, config.mean_kind)
    if n < h.shape[1] + 1:
        raise InvalidArgumentError(f"need at least {h.shape[1] + 1} runs for a {config.mean_kind} mean")

    bounds = config.bounds_for(p)
    log_lo, log_hi = np.log(bounds[:, 0]), np.log(bounds[:, 1])
    span = log_hi - log_lo

    def thetas(u):
        return np.exp(log_lo + u * span)

    beta_ols, *_ = np.linalg.lstsq(h, y, rcond=None)
    resid = y - h @ beta_ols
    if np.linalg.norm(resid) <= 1e-12 * max(np.linalg.norm(y), 1.0):
        # the trend explains y exactly: a zero-variance emulator
        return GpEmulator(design, y, config.mean_kind, beta_ols, thetas(np.full(p, 0.5)),
                          0.0 if config.process_variance is None else config.process_variance,
                          config.nugget, np.inf)

    if config.nugget == 0.0:
        _, counts = np.unique(design, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise SingularCorrelationError("duplicate design rows with zero nugget")

    # optimize on standardized outputs so the search does not depend on the units of y
    scale = float(np.std(y))
    y_std = y / scale
    fixed = None if config.process_variance is None else config.process_variance / scale**2

    def objective(u):
        prof = _profile(design, y_std, h, thetas(u), config.nugget, fixed)
        if prof is None or not np.isfinite(prof.nll):
            return _PENALTY
        return prof.nll

    starts = _lhs_unit(p, config.restarts, config.seed)
    start_values = [objective(u) for u in starts]
    best_u, best_val = None, np.inf
    free = span > 0
    for u0, v0 in zip(starts, start_values):
        if not free.any():
            u, val = u0, v0
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = minimize(objective, u0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * p)
            u, val = np.clip(res.x, 0.0, 1.0), float(res.fun)
            if val > v0:
                u, val = u0, v0
        if val < best_val:
            best_u, best_val = u, val
    if best_u is None or best_val >= _PENALTY:
        raise FitFailureError(
            "profile likelihood was non-finite at every start",
            diagnostics={"start_values": start_values, "n": n, "p": p},
        )
    theta = thetas(best_u)
    prof = _profile(design, y, h, theta, config.nugget, config.process_variance)
    # undo the standardization: the log likelihood shifts by -n log(scale)
    start_ll = [-v - n * np.log(scale) if v < _PENALTY else -np.inf for v in start_values]
    return GpEmulator(design, y, config.mean_kind, prof.beta, theta, prof.variance,
                      config.nugget, -prof.nll, start_ll)


def _fallback_gp(design, y, config):
    """Constant-mean emulator with a large nugget, used when a fit fails."""
    bounds = config.bounds_for(design.shape[1])
    theta = np.sqrt(bounds[:, 0] * bounds[:, 1])
    variance = max(float(np.var(y)), np.finfo(float).tiny)
    return GpEmulator(design, y, "constant", [float(np.mean(y))], theta, variance, FALLBACK_NUGGET)


@dataclass(eq=False)
class EmulatorBank:
    """Independent emulators sharing one design; ``kind`` is ``coefficient`` or ``gridbox``."""

    emulators: list
    kind: str
    failures: list = field(default_factory=list)

    def __len__(self):
        return len(self.emulators)

    @property
    def design(self):
        return self.emulators[0].design

    def predict(self, x):
        """Means and variances, each of shape (m, len(bank)), at the rows of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        means = np.empty((x.shape[0], len(self)))
        variances = np.empty_like(means)
        for j, em in enumerate(self.emulators):
            means[:, j], variances[:, j] = em.predict(x)
        return means, variances

    def to_dict(self):
        return {
            "kind": self.kind,
            "failures": list(self.failures),
            "emulators": [em.to_dict() for em in self.emulators],
        }

    @classmethod
    def from_dict(cls, d):
        return cls([GpEmulator.from_dict(e) for e in d["emulators"]], d["kind"], d.get("failures", []))


def fit_coefficient_emulators(ensemble, basis, weight=None, config=GpConfig()):
    """One emulator per retained basis coefficient, projected in ``weight``."""
    if ensemble.design_x is None:
        raise InvalidArgumentError("ensemble has no design inputs")
    coeffs = np.atleast_2d(project(ensemble.f, basis, weight))
    emulators = []
    for i, row in enumerate(coeffs):
        try:
            emulators.append(fit_gp(ensemble.design_x, row, config))
        except (FitFailureError, SingularCorrelationError) as exc:
            raise type(exc)(f"coefficient {i}: {exc}") from exc
    return EmulatorBank(emulators, "coefficient")


def fit_univariate_emulators(ensemble, config=GpConfig()):
    """One emulator per grid box; failed boxes fall back to a large-nugget constant-mean GP."""
    if ensemble.design_x is None:
        raise InvalidArgumentError("ensemble has no design inputs")
    emulators, failures = [], []
    for i, row in enumerate(ensemble.f):
        try:
            emulators.append(fit_gp(ensemble.design_x, row, config))
        except (FitFailureError, SingularCorrelationError, np.linalg.LinAlgError) as exc:
            failures.append({"index": i, "reason": str(exc)})
            emulators.append(_fallback_gp(ensemble.design_x, row, config))
    if failures:
        log.warning("%d of %d grid-box emulators fell back to the default fit",
                    len(failures), len(emulators))
    return EmulatorBank(emulators, "gridbox", failures)


def predict_coefficients(bank, x):
    """Stacked coefficient means and their diagonal q x q variance at one input."""
    if bank.kind != "coefficient":
        raise InvalidArgumentError("predict_coefficients needs a coefficient bank")
    means, variances = bank.predict(np.asarray(x, dtype=float).reshape(1, -1))
    return means[0], np.diag(variances[0])


class LowRankVariance(NamedTuple):
    """``factor @ core @ factor.T`` without forming it."""

    factor: np.ndarray
    core: np.ndarray

    def dense(self):
        return self.factor @ self.core @ self.factor.T


def field_moments(prediction, basis, add_mean=True):
    """Field mean and factored field variance from coefficient moments."""
    e_c, var_c = prediction
    e_c = np.asarray(e_c, dtype=float)
    var_c = np.asarray(var_c, dtype=float)
    if var_c.ndim == 1:
        var_c = np.diag(var_c)
    e_f = basis.gamma_q @ e_c
    if add_mean:
        e_f = e_f + basis.mu
    return e_f, LowRankVariance(basis.gamma_q, var_c)


def sample_field(bank, x, size, basis=None, rng=None):
    """Draws of the field at ``x`` from the emulator posterior, shape (ell, size)."""
    rng = np.random.default_rng(rng)
    means, variances = bank.predict(np.asarray(x, dtype=float).reshape(1, -1))
    draws = means[0][:, None] + np.sqrt(variances[0])[:, None] * rng.standard_normal((len(bank), size))
    if bank.kind == "gridbox":
        return draws
    if basis is None:
        raise InvalidArgumentError("coefficient draws need the basis to map back to the field")
    return basis.gamma_q @ draws + basis.mu[:, None]


def _field_predictions(bank, basis, x):
    means, variances = bank.predict(x)
    if bank.kind == "coefficient":
        if basis is None:
            raise InvalidArgumentError("a coefficient bank needs its basis")
        return basis.gamma_q @ means.T + basis.mu[:, None], means.T, variances.T
    return means.T, means.T, variances.T


def validate_emulators(bank, basis, validation_x, validation_f, weight=None, band=3.0):
    """Weighted prediction error per run and standardized-residual coverage per emulator.

    The per-run error is ``(f - E[f])^T W^{-1} (f - E[f]) / ell``.
    Coverage is the fraction of runs whose standardized residual lies
    within ``band``; a residual at rounding level counts as covered even
    at zero variance.
    """
    validation_x = np.atleast_2d(np.asarray(validation_x, dtype=float))
    validation_f = np.asarray(validation_f, dtype=float)
    if validation_f.ndim == 1:
        validation_f = validation_f[:, None]
    if validation_f.shape[1] != validation_x.shape[0]:
        raise InvalidArgumentError(
            f"{validation_x.shape[0]} validation inputs but {validation_f.shape[1]} validation fields"
        )
    if validation_x.shape[1] != bank.design.shape[1]:
        raise InvalidArgumentError("validation inputs have the wrong dimension")
    e_f, target_means, target_vars = _field_predictions(bank, basis, validation_x)
    if e_f.shape[0] != validation_f.shape[0]:
        raise InvalidArgumentError("validation fields have the wrong length")
    resid = validation_f - e_f
    if weight is not None:
        resid = weight.whiten(resid)
    ell = validation_f.shape[0]
    errors = np.sum(resid**2, axis=0) / ell

    if bank.kind == "coefficient":
        targets = np.atleast_2d(project(validation_f, basis, weight))
    else:
        targets = validation_f
    diff = np.abs(targets - target_means)
    sd = np.sqrt(target_vars)
    # residuals at rounding level count as exact, even where the variance is zero
    exact = diff <= 1e-10 * max(float(np.abs(targets).max()), np.finfo(float).tiny)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(exact, 0.0, diff / sd)
    coverage = np.mean(z <= band, axis=1)
    return {
        "errors": errors,
        "median_error": float(np.median(errors)),
        "coverage": coverage,
        "band": float(band),
        "n_runs": int(errors.size),
    }
