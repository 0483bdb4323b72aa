"""Command-line interface.

Subcommands::

    fieldmatch synth    --out DIR [--grid 32x16 --n 40 --p 3 --seed 0 ...]
    fieldmatch basis    --ensemble F --out DIR [--threshold 0.9 --rotate --obs Z --weight W]
    fieldmatch emulate  --mode {coeff,uv} --config CFG --out DIR
    fieldmatch match    --config CFG --out DIR
    fieldmatch bench    [--ell 1024 --q 14 --samples 1e3,1e4,1e5 --seed 0 --out FILE]

Exit codes: 0 success, 2 invalid input, 3 terminal case, 4 numerical
failure. Failures print one JSON error record on stderr.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .basis import center_ensemble, svd_basis, truncate_basis, varmse_curve
from .covariance import build_grid, combine_error_spec
from .emulator import fit_coefficient_emulators, fit_univariate_emulators, validate_emulators
from .errors import FieldMatchError, InvalidArgumentError, TerminalCaseError
from .history_match import (
    benchmark_implausibility,
    error_covariances,
    lhs_sample,
    prepare_basis,
    run_wave,
    synth_experiment,
)
from .implausibility import chi_squared_bound
from .io import DEFAULT_DELTA, DEFAULT_SIGMA, load_config, read_matrix, read_vector, write_bank, \
    write_basis, write_json, write_matrix
from .rotation import RotationConfig, rotate_basis, terminal_case_check

log = logging.getLogger("fieldmatch")

HISTOGRAM_BINS = 50


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise InvalidArgumentError(f"{self.prog}: {message}")


def _grid_arg(text):
    try:
        n_lon, n_lat = (int(t) for t in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected NLONxNLAT, got {text!r}") from None
    return n_lon, n_lat


def _pair_arg(text):
    try:
        a, b = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}") from None
    return a, b


def _counts_arg(text):
    try:
        counts = [int(float(t)) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated counts, got {text!r}") from None
    if any(c < 1 for c in counts):
        raise argparse.ArgumentTypeError("counts must be positive")
    return counts


def _out_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# synth -----------------------------------------------------------------------

def cmd_synth(args):
    out = _out_dir(args.out)
    grid = build_grid(*args.grid)
    sigma_e, _ = error_covariances(grid, args.delta, args.obs_sigma)
    exp = synth_experiment(grid, args.n, args.p, args.seed, obs_cov=sigma_e if args.obs_sigma > 0 else None)
    write_matrix(out / "ensemble.csv", exp.ensemble.f)
    write_matrix(out / "design.csv", exp.ensemble.design_x)
    write_matrix(out / "z.csv", exp.z)
    write_matrix(out / "true_x.csv", exp.true_x[None, :])

    paths = {"ensemble": "ensemble.csv", "design": "design.csv", "z": "z.csv", "extra_points": "true_x.csv"}
    if args.n_val > 0:
        val_x = lhs_sample(args.p, args.n_val, np.random.default_rng([args.seed, 2]))
        write_matrix(out / "validation_ensemble.csv", exp.simulator(val_x))
        write_matrix(out / "validation_design.csv", val_x)
        paths["validation_ensemble"] = "validation_ensemble.csv"
        paths["validation_design"] = "validation_design.csv"
    config = {
        "paths": paths,
        "grid": {"n_lon": grid.n_lon, "n_lat": grid.n_lat},
        "errors": {"delta_lon": args.delta[0], "delta_lat": args.delta[1], "sigma": args.obs_sigma},
        "wave": {"seed": args.seed},
    }
    (out / "run.yaml").write_text(yaml.safe_dump(config, sort_keys=True))
    log.info("wrote synthetic experiment (ell=%d, n=%d, p=%d) to %s", grid.ell, args.n, args.p, out)
    return 0


# basis -----------------------------------------------------------------------

def cmd_basis(args):
    out = _out_dir(args.out)
    f = read_matrix(args.ensemble)
    ensemble = center_ensemble(f)
    weight = combine_error_spec(read_matrix(args.weight)) if args.weight else None
    z = read_vector(args.obs) if args.obs else None
    if args.rotate:
        if z is None:
            raise InvalidArgumentError("--rotate needs --obs")
        config = RotationConfig(min_first_vector_variance=args.min_variance,
                                truncation_threshold=args.threshold, weight=weight)
        basis = rotate_basis(ensemble, z, config)
    else:
        basis = truncate_basis(svd_basis(ensemble), args.threshold)
    write_basis(out / "basis", basis)
    if z is None:
        return 0

    curve = varmse_curve(basis, z, weight)
    write_matrix(out / "varmse.csv", np.array(curve, dtype=float))
    threshold = chi_squared_bound(basis.ell)
    verdict = terminal_case_check(basis, z, weight, threshold)
    write_json(out / "verdict.json", {
        "terminal": verdict.terminal,
        "r_w": verdict.r_w,
        "threshold": verdict.threshold,
        "q": basis.q,
        "ell": basis.ell,
        "weighted": weight is not None,
    })
    if verdict.terminal:
        raise TerminalCaseError(
            f"terminal case: reconstruction error {verdict.r_w:.6g} exceeds bound {threshold:.6g}",
            r_w=verdict.r_w, threshold=threshold,
        )
    return 0


# emulate / match -------------------------------------------------------------

def _load_run(config_path):
    cfg = load_config(config_path)
    design = read_matrix(cfg.paths["design"])
    ensemble = center_ensemble(read_matrix(cfg.paths["ensemble"]), design)
    z = read_vector(cfg.paths["z"])
    grid = build_grid(cfg.grid["n_lon"], cfg.grid["n_lat"])
    if grid.ell != ensemble.ell or z.size != ensemble.ell:
        raise InvalidArgumentError(
            f"grid has {grid.ell} cells, ensemble {ensemble.ell} rows, z {z.size} values"
        )
    sigma_e, sigma_eta = error_covariances(grid, **cfg.error_kwargs())
    wave = cfg.wave_config(design.shape[1])
    return cfg, ensemble, z, sigma_e, sigma_eta, wave


def cmd_emulate(args):
    out = _out_dir(args.out)
    cfg, ensemble, z, sigma_e, sigma_eta, wave = _load_run(args.config)
    basis, spec = prepare_basis(wave, ensemble, z, sigma_e, sigma_eta)
    if args.mode == "coeff":
        bank = fit_coefficient_emulators(ensemble, basis, spec, wave.gp)
        write_basis(out / "basis", basis)
    else:
        bank = fit_univariate_emulators(ensemble, wave.gp)
        basis = None
    write_bank(out / "bank.json", bank)

    report = {"mode": args.mode, "size": len(bank), "failures": bank.failures}
    if "validation_ensemble" in cfg.paths and "validation_design" in cfg.paths:
        val = validate_emulators(bank, basis, read_matrix(cfg.paths["validation_design"]),
                                 read_matrix(cfg.paths["validation_ensemble"]), spec)
        report.update(val)
    else:
        report["n_runs"] = 0
    write_json(out / "validation.json", report)
    return 0


def cmd_match(args):
    out = _out_dir(args.out)
    cfg, ensemble, z, sigma_e, sigma_eta, wave = _load_run(args.config)
    extra = read_matrix(cfg.paths["extra_points"]) if "extra_points" in cfg.paths else None
    try:
        result = run_wave(wave, ensemble, z, sigma_e, sigma_eta, extra_points=extra)
    except TerminalCaseError as exc:
        write_json(out / "verdict.json", {"terminal": True, "r_w": exc.r_w, "threshold": exc.threshold})
        raise

    write_matrix(out / "samples.csv", result.samples)
    write_matrix(out / "nroy_mask.csv", result.nroy_mask.astype(float))
    write_matrix(out / "implausibility.csv",
                 np.column_stack([result.field_implausibility, result.coefficient_implausibility]))
    values = result.implausibility[: wave.sample_count]
    counts, edges = np.histogram(values, bins=HISTOGRAM_BINS)
    write_matrix(out / "histogram.csv", np.column_stack([edges[:-1], edges[1:], counts]))

    summary = dict(result.summary)
    summary["extra_points_in_nroy"] = result.extra_mask.tolist()
    write_json(out / "summary.json", summary)
    write_json(out / "timing.json", result.timing)
    log.info("NROY fraction %.4f (q=%d)", result.nroy_fraction, result.basis.q)
    return 0


# bench -----------------------------------------------------------------------

def cmd_bench(args):
    rows = benchmark_implausibility([args.ell], args.q, args.samples, args.seed, naive_reps=args.naive_reps)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["samples", "precomp_s", "decomposed_s", "naive_extrapolated_s"])
        for row in rows:
            writer.writerow([row.samples, f"{row.precomp_s:.6g}", f"{row.decomposed_s:.6g}",
                             f"{row.naive_extrapolated_s:.6g}"])
    finally:
        if fh is not sys.stdout:
            fh.close()
    return 0


def build_parser():
    parser = _Parser(prog="fieldmatch", description="History matching of high-dimensional fields.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic ensemble and observations")
    p.add_argument("--grid", type=_grid_arg, default=(32, 16), help="NLONxNLAT (default 32x16)")
    p.add_argument("--n", type=int, default=40, help="ensemble size")
    p.add_argument("--p", type=int, default=3, help="input dimension")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-val", type=int, default=10, help="validation runs (0 for none)")
    p.add_argument("--obs-sigma", type=float, default=DEFAULT_SIGMA,
                   help="observation error standard deviation (0 for exact observations)")
    p.add_argument("--delta", type=_pair_arg, default=DEFAULT_DELTA,
                   help="error correlation lengths DLON,DLAT in degrees")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("basis", help="compute an SVD or rotated basis and its diagnostics")
    p.add_argument("--ensemble", required=True, help="ensemble matrix file (ell x n)")
    p.add_argument("--threshold", type=float, default=0.9, help="variance fraction to retain")
    p.add_argument("--rotate", action="store_true", help="rotate the basis toward --obs")
    p.add_argument("--obs", help="observation vector file")
    p.add_argument("--weight", help="weight matrix file W (default: identity)")
    p.add_argument("--min-variance", type=float, default=0.1,
                   help="variance the first rotated vector must still explain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_basis)

    p = sub.add_parser("emulate", help="fit coefficient or grid-box emulators")
    p.add_argument("--mode", choices=("coeff", "uv"), default="coeff")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emulate)

    p = sub.add_parser("match", help="run one history-matching wave")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("bench", help="time decomposed against dense implausibility")
    p.add_argument("--ell", type=int, default=1024)
    p.add_argument("--q", type=int, default=14)
    p.add_argument("--samples", type=_counts_arg, default=[1000, 10000, 100000])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--naive-reps", type=int, default=100, help="dense evaluations to time")
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_bench)
    return parser


def _error_record(exc, code):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for key in ("r_w", "threshold", "pivot", "line", "condition"):
        value = getattr(exc, key, None)
        if value is not None:
            record[key] = value if not isinstance(value, Path) else str(value)
    return record


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        return args.func(args)
    except FieldMatchError as exc:
        return _fail(exc, exc.exit_code)
    except OSError as exc:
        return _fail(exc, 2)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(exc, 4)


def _fail(exc, code):
    print(json.dumps(_error_record(exc, code), sort_keys=True), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
