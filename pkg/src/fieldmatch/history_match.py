"""Single-wave history matching on an ensemble of output fields.

The pipeline is: centre -> basis (SVD or rotated) -> coefficient
emulators -> one-off precomputation -> Latin hypercube sample ->
decomposed implausibility -> NROY classification. Only one wave is run;
the NROY mask is returned so an outer loop can design the next ensemble.
"""

import time
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy.stats import qmc

from .basis import Basis, center_ensemble, svd_basis, truncate_basis
from .covariance import build_grid, combine_error_spec, gaussian_covariance, regional_sigma
from .emulator import GpConfig, fit_coefficient_emulators
from .errors import InvalidArgumentError, TerminalCaseError
from .implausibility import (
    augment_w_truncation,
    chi_squared_bound,
    fast_field_implausibility_batch,
    field_implausibility_direct,
    make_precomp,
    nroy_classify,
)
from .rotation import RotationConfig, rotate_basis, terminal_case_check


def lhs_sample(dim, n, seed=None):
    """Latin hypercube sample of ``n`` points in ``[-1, 1]^dim``."""
    if dim < 1 or n < 1:
        raise InvalidArgumentError(f"need dim >= 1 and n >= 1, got dim={dim}, n={n}")
    return 2.0 * qmc.LatinHypercube(d=int(dim), seed=seed).random(int(n)) - 1.0


class SyntheticSimulator:
    """Smooth stand-in simulator: fixed spatial modes with input-driven amplitudes.

    ``f(x) = base + sum_k s_k sin(w_k . x + b_k) phi_k`` where the
    ``phi_k`` are low-order patterns on the sphere scaled to unit RMS.
    """

    SCALES = (1.0, 0.6, 0.35, 0.15, 0.06, 0.025)

    def __init__(self, grid, p, seed=0, scales=SCALES):
        self.grid = grid
        self.p = int(p)
        lon, lat = grid.coordinates()
        lon, lat = np.radians(lon), np.radians(lat)
        patterns = [
            np.sin(lat),
            np.cos(lat) * np.cos(lon),
            np.cos(lat) * np.sin(lon),
            np.cos(2 * lat),
            np.cos(lat) ** 2 * np.cos(2 * lon),
            np.sin(2 * lat) * np.sin(lon),
        ]
        modes = []
        for pat in patterns[: len(scales)]:
            pat = pat - pat.mean()
            rms = np.sqrt(np.mean(pat**2))
            modes.append(pat / rms if rms > 0 else pat)
        self.modes = np.column_stack(modes)
        self.scales = np.asarray(scales, dtype=float)
        self.base = 2.0 * np.cos(2 * lat)
        rng = np.random.default_rng(seed)
        self.w = rng.normal(0.0, 1.2 / np.sqrt(self.p), size=(len(scales), self.p))
        self.b = rng.uniform(-np.pi, np.pi, size=len(scales))

    def amplitudes(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.scales * np.sin(x @ self.w.T + self.b)

    def __call__(self, x):
        """Fields at the rows of ``x``: shape (ell,) for one input, else (ell, m)."""
        x = np.asarray(x, dtype=float)
        out = self.base[:, None] + self.modes @ self.amplitudes(x).T
        return out[:, 0] if x.ndim == 1 else out


class SyntheticExperiment(NamedTuple):
    ensemble: object
    z: np.ndarray
    true_x: np.ndarray
    simulator: SyntheticSimulator


def synth_experiment(grid, n, p, seed=0, obs_cov=None):
    """Ensemble on an LHS design plus observations from a held-out input.

    ``obs_cov`` (ell x ell), when given, adds one draw of Gaussian
    observation error to ``z``; otherwise ``z`` is the simulator output
    at ``true_x`` exactly.
    """
    sim = SyntheticSimulator(grid, p, seed)
    rng = np.random.default_rng([seed, 1])
    design = lhs_sample(p, n, seed)
    true_x = rng.uniform(-1.0, 1.0, size=p)
    ensemble = center_ensemble(sim(design), design)
    z = sim(true_x)
    if obs_cov is not None:
        spec = combine_error_spec(obs_cov)
        z = z + spec.w_factor @ rng.standard_normal(grid.ell)
    return SyntheticExperiment(ensemble, z, true_x, sim)


def error_covariances(grid, delta=(5.0, 5.0), sigma=1.0 / 3.0, regions=(), discrepancy_sigma=0.0):
    """Observation-error and discrepancy covariances on ``grid``.

    Both use the Gaussian form with the same correlation lengths; the
    discrepancy is zero when ``discrepancy_sigma`` is 0.
    """
    sigma_e = gaussian_covariance(grid, delta, regional_sigma(grid, sigma, regions))
    if discrepancy_sigma:
        sigma_eta = gaussian_covariance(grid, delta, discrepancy_sigma)
    else:
        sigma_eta = np.zeros_like(sigma_e)
    return sigma_e, sigma_eta


@dataclass(frozen=True)
class WaveConfig:
    input_dim: int
    sample_count: int = 10_000
    seed: int = 0
    basis_kind: str = "svd"
    truncation_threshold: float = 0.90
    gp: GpConfig = field(default_factory=GpConfig)
    threshold_kind: str = "chi2_coeff"
    probability: float = 0.995
    augment_truncation: bool = False
    min_first_vector_variance: float = 0.10

    def __post_init__(self):
        if self.input_dim < 1 or self.sample_count < 1:
            raise InvalidArgumentError("input_dim and sample_count must be >= 1")
        if self.basis_kind not in ("svd", "rotated"):
            raise InvalidArgumentError(f"basis_kind must be 'svd' or 'rotated', got {self.basis_kind!r}")
        if self.threshold_kind not in ("chi2_coeff", "chi2_field"):
            raise InvalidArgumentError(
                f"threshold_kind must be 'chi2_coeff' or 'chi2_field', got {self.threshold_kind!r}"
            )


@dataclass(eq=False)
class WaveResult:
    samples: np.ndarray
    field_implausibility: np.ndarray
    coefficient_implausibility: np.ndarray
    nroy_mask: np.ndarray
    nroy_fraction: float
    threshold: float
    n_extra: int
    coefficient_means: np.ndarray
    coefficient_variances: np.ndarray
    basis: object
    weight: object
    bank: object
    precomp: object
    summary: dict
    timing: dict = field(default_factory=dict)

    @property
    def implausibility(self):
        """The values the classification was made on."""
        if self.summary["threshold_kind"] == "chi2_coeff":
            return self.coefficient_implausibility
        return self.field_implausibility

    @property
    def extra_mask(self):
        return self.nroy_mask[self.nroy_mask.size - self.n_extra :]


def build_basis(config, ensemble, z, weight):
    svd = svd_basis(ensemble)
    if config.basis_kind == "svd":
        return truncate_basis(svd, config.truncation_threshold)
    rot = RotationConfig(
        min_first_vector_variance=config.min_first_vector_variance,
        truncation_threshold=config.truncation_threshold,
        weight=weight,
    )
    return rotate_basis(ensemble, z, rot)


def prepare_basis(config, ensemble, z, sigma_e, sigma_eta=None):
    """The wave's basis and the error spec whose W is used for projection."""
    base_spec = combine_error_spec(sigma_e, sigma_eta)
    basis = build_basis(config, ensemble, z, base_spec)
    if config.augment_truncation:
        return basis, augment_w_truncation(sigma_e, sigma_eta, basis)
    return basis, base_spec


def run_wave(config, ensemble, z, sigma_e, sigma_eta=None, extra_points=None):
    """Run one history-matching wave.

    ``extra_points`` (rows of inputs, e.g. a known best input) are
    evaluated after the Latin hypercube sample; they appear at the end of
    the returned arrays but do not count toward ``nroy_fraction``.

    Raises
    ------
    TerminalCaseError
        If the reconstruction error of ``z`` alone exceeds the field bound.
    """
    if ensemble.design_x is None or ensemble.design_x.shape[1] != config.input_dim:
        raise InvalidArgumentError("ensemble design does not match config.input_dim")
    timing = {}
    t0 = time.perf_counter()
    basis, spec = prepare_basis(config, ensemble, z, sigma_e, sigma_eta)
    timing["basis_s"] = time.perf_counter() - t0

    field_bound = chi_squared_bound(basis.ell, config.probability)
    verdict = terminal_case_check(basis, z, spec, field_bound)
    if verdict.terminal:
        raise TerminalCaseError(
            f"terminal case: reconstruction error {verdict.r_w:.6g} exceeds bound {field_bound:.6g}",
            r_w=verdict.r_w,
            threshold=field_bound,
        )

    t0 = time.perf_counter()
    bank = fit_coefficient_emulators(ensemble, basis, spec, config.gp)
    timing["fit_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    precomp = make_precomp(basis, z, spec.sigma_e, spec.sigma_eta, field_bound, weight=spec)
    timing["precomp_s"] = time.perf_counter() - t0

    samples = lhs_sample(config.input_dim, config.sample_count, config.seed)
    n_extra = 0
    if extra_points is not None:
        extra = np.atleast_2d(np.asarray(extra_points, dtype=float))
        samples = np.vstack([samples, extra])
        n_extra = extra.shape[0]

    t0 = time.perf_counter()
    means, variances = bank.predict(samples)
    timing["predict_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    field_impl, coef_impl = fast_field_implausibility_batch(precomp, means, variances)
    timing["implausibility_s"] = time.perf_counter() - t0

    if config.threshold_kind == "chi2_coeff":
        threshold = chi_squared_bound(basis.q, config.probability)
        mask, _ = nroy_classify(coef_impl, threshold)
    else:
        threshold = field_bound
        mask, _ = nroy_classify(field_impl, threshold)
    lhs_mask = mask[: config.sample_count]
    fraction = float(lhs_mask.mean())

    summary = {
        "basis_kind": basis.kind,
        "q": basis.q,
        "ell": basis.ell,
        "threshold_kind": config.threshold_kind,
        "threshold": threshold,
        "field_bound": field_bound,
        "r_w": precomp.r_w,
        "r_w_per_ell": precomp.r_w / basis.ell,
        "nroy_fraction": fraction,
        "sample_count": config.sample_count,
        "min_implausibility": float(np.min(coef_impl if config.threshold_kind == "chi2_coeff" else field_impl)),
    }
    result = WaveResult(
        samples=samples,
        field_implausibility=field_impl,
        coefficient_implausibility=coef_impl,
        nroy_mask=mask,
        nroy_fraction=fraction,
        threshold=threshold,
        n_extra=n_extra,
        coefficient_means=means,
        coefficient_variances=variances,
        basis=basis,
        weight=spec,
        bank=bank,
        precomp=precomp,
        summary=summary,
        timing=timing,
    )
    summary.update(nroy_summaries(result, bank, basis, z, spec))
    return result


def nroy_summaries(result, bank, basis, z, weight):
    """Mean weighted error of NROY predictions, plain and exp(-coefficient implausibility) weighted.

    Errors are ``(z - E[f(x)])^T W^{-1} (z - E[f(x)]) / ell``. The weighted
    mean uses weights ``exp(-I_coef(x))``, shifted by the NROY minimum
    for numerical range (the shift cancels in the normalization).
    """
    mask = result.nroy_mask[: result.nroy_mask.size - result.n_extra]
    if not mask.any():
        return {"nroy_empty": True, "nroy_error_mean": float("nan"), "nroy_error_weighted": float("nan")}
    if result.coefficient_means is not None:
        means = result.coefficient_means[: mask.size][mask]
    else:
        means, _ = bank.predict(result.samples[: mask.size][mask])
    zc = np.asarray(z, dtype=float) - basis.mu
    whiten = (lambda v: v) if weight is None else weight.whiten
    resid = whiten(zc[:, None] - basis.gamma_q @ means.T)
    errors = np.sum(resid**2, axis=0) / basis.ell
    impl = result.coefficient_implausibility[: mask.size][mask]
    w = np.exp(-(impl - impl.min()))
    return {
        "nroy_empty": False,
        "nroy_error_mean": float(errors.mean()),
        "nroy_error_weighted": float(np.sum(w * errors) / np.sum(w)),
    }


def grid_for_size(ell):
    """Grid with ``ell`` cells and roughly twice as many longitudes as latitudes."""
    n_lat = max(d for d in range(1, int(np.sqrt(ell / 2)) + 1) if ell % d == 0)
    return build_grid(ell // n_lat, n_lat)


class BenchmarkRow(NamedTuple):
    ell: int
    q: int
    samples: int
    precomp_s: float
    decomposed_s: float
    naive_extrapolated_s: float


def benchmark_implausibility(ell_list, q, sample_counts, seed=0, naive_reps=100, delta=(5.0, 5.0)):
    """Wall-clock comparison of the decomposed and the dense implausibility.

    For each ``ell``: time the one-off precomputation, the decomposed
    evaluation of every sample count, and ``naive_reps`` dense
    evaluations whose mean cost is extrapolated to each sample count.
    """
    rows = []
    rng = np.random.default_rng(seed)
    for ell in ell_list:
        grid = grid_for_size(int(ell))
        sigma_e = gaussian_covariance(grid, delta, 1.0)
        gamma, _ = np.linalg.qr(rng.standard_normal((grid.ell, q)))
        mu = np.zeros(grid.ell)
        basis = Basis(gamma, np.ones(q), mu, q, np.linspace(1.0 / q, 1.0, q), q + 1)
        z = gamma @ rng.normal(size=q) + 0.1 * rng.standard_normal(grid.ell)

        t0 = time.perf_counter()
        precomp = make_precomp(basis, z, sigma_e)
        precomp_s = time.perf_counter() - t0

        t0 = time.perf_counter()
        for _ in range(naive_reps):
            e_c = rng.normal(size=q)
            v = rng.uniform(0.1, 1.0, size=q)
            field_implausibility_direct(z, gamma @ e_c, (gamma, v), sigma_e)
        naive_per_eval = (time.perf_counter() - t0) / naive_reps

        for n in sample_counts:
            n = int(n)
            e_c = rng.normal(size=(n, q))
            v = rng.uniform(0.1, 1.0, size=(n, q))
            t0 = time.perf_counter()
            fast_field_implausibility_batch(precomp, e_c, v)
            decomposed_s = time.perf_counter() - t0
            rows.append(BenchmarkRow(grid.ell, q, n, precomp_s, decomposed_s, naive_per_eval * n))
    return rows
