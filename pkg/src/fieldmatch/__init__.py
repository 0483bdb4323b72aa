"""History matching of high-dimensional output fields through weighted basis projection."""

from .basis import (
    Basis,
    Ensemble,
    center_ensemble,
    project,
    reconstruct,
    reconstruction_error,
    svd_basis,
    truncate_basis,
    varmse_curve,
)
from .covariance import ErrorSpec, Grid, SigmaField, build_grid, combine_error_spec, gaussian_covariance
from .emulator import (
    EmulatorBank,
    GpConfig,
    GpEmulator,
    field_moments,
    fit_coefficient_emulators,
    fit_gp,
    fit_univariate_emulators,
    predict_coefficients,
    predict_gp,
    validate_emulators,
)
from .history_match import (
    WaveConfig,
    WaveResult,
    benchmark_implausibility,
    lhs_sample,
    nroy_summaries,
    run_wave,
    synth_experiment,
)
from .implausibility import (
    MatchPrecomp,
    augment_w_truncation,
    chi_squared_bound,
    coefficient_implausibility,
    fast_field_implausibility,
    field_implausibility_direct,
    make_precomp,
    nroy_classify,
    project_error_variances,
)
from .rotation import RotationConfig, rotate_basis, terminal_case_check

__version__ = "0.1.0"
