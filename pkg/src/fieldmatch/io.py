"""Text matrix files, basis and emulator serialization, and run configuration.

Matrix files are dense row-major text: a ``rows,cols`` header line, then
one comma-separated row per line, every value written with 17
significant digits so doubles round-trip exactly.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .basis import Basis
from .emulator import EmulatorBank, GpConfig
from .errors import ConfigError, InvalidArgumentError, MatrixFormatError
from .history_match import WaveConfig


def write_matrix(path, matrix):
    """Write a 1-D (as a column) or 2-D array in the text matrix format."""
    a = np.asarray(matrix, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise InvalidArgumentError(f"can only write 1-D or 2-D arrays, got {a.ndim} dims")
    path = Path(path)
    if not path.parent.is_dir():
        raise InvalidArgumentError(f"{path.parent}: directory does not exist")
    with open(path, "w", newline="\n") as fh:
        fh.write(f"{a.shape[0]},{a.shape[1]}\n")
        if a.size:
            np.savetxt(fh, a, fmt="%.17g", delimiter=",")


def read_matrix(path):
    """Read a text matrix file; the header shape is authoritative.

    Raises
    ------
    MatrixFormatError
        On a malformed header, a non-numeric token or a row/column count
        that disagrees with the header, naming the offending line.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise MatrixFormatError(f"cannot read file ({exc.strerror})", line=0, path=path) from exc
    lines = text.split("\n")
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise MatrixFormatError("empty file, expected a 'rows,cols' header", line=1, path=path)
    try:
        rows, cols = (int(t) for t in lines[0].split(","))
    except ValueError:
        raise MatrixFormatError(f"bad header {lines[0]!r}, expected 'rows,cols'", line=1, path=path) from None
    if rows < 0 or cols < 0:
        raise MatrixFormatError(f"negative shape in header {lines[0]!r}", line=1, path=path)

    out = np.empty((rows, cols))
    body = lines[1:]
    for i, line in enumerate(body):
        lineno = i + 2
        if i >= rows:
            raise MatrixFormatError(f"header declares {rows} rows but more follow", line=lineno, path=path)
        tokens = line.split(",")
        if len(tokens) != cols:
            raise MatrixFormatError(f"expected {cols} values, found {len(tokens)}", line=lineno, path=path)
        try:
            out[i] = [float(t) for t in tokens]
        except ValueError:
            bad = next(t for t in tokens if not _is_float(t))
            raise MatrixFormatError(f"non-numeric token {bad.strip()!r}", line=lineno, path=path) from None
    if len(body) < rows:
        raise MatrixFormatError(
            f"header declares {rows} rows but only {len(body)} follow", line=len(lines) + 1, path=path
        )
    return out


def _is_float(token):
    try:
        float(token)
    except ValueError:
        return False
    return True


def read_vector(path):
    """Read a single-row or single-column matrix file as a 1-D array."""
    m = read_matrix(path)
    if 1 not in m.shape:
        raise InvalidArgumentError(f"{path}: expected a vector, got shape {m.shape}")
    return m.ravel()


def write_json(path, obj):
    """Deterministic JSON: sorted keys, fixed indentation, trailing newline."""
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_basis(directory, basis):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_matrix(directory / "vectors.csv", basis.vectors)
    write_matrix(directory / "mu.csv", basis.mu)
    write_matrix(directory / "singular_values.csv", basis.singular_values)
    write_matrix(directory / "variance_explained.csv", basis.variance_explained)
    write_json(directory / "meta.json", {"q": basis.q, "r": basis.r, "kind": basis.kind,
                                         "n_runs": basis.n_runs})


def read_basis(directory):
    directory = Path(directory)
    try:
        meta = json.loads((directory / "meta.json").read_text())
    except (OSError, ValueError) as exc:
        raise InvalidArgumentError(f"{directory}/meta.json: {exc}") from exc
    return Basis(
        vectors=read_matrix(directory / "vectors.csv"),
        singular_values=read_vector(directory / "singular_values.csv"),
        mu=read_vector(directory / "mu.csv"),
        q=int(meta["q"]),
        variance_explained=read_vector(directory / "variance_explained.csv"),
        n_runs=int(meta["n_runs"]),
        kind=meta.get("kind", "svd"),
    )


def write_bank(path, bank):
    write_json(path, bank.to_dict())


def read_bank(path):
    try:
        return EmulatorBank.from_dict(json.loads(Path(path).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise InvalidArgumentError(f"{path}: cannot load emulator bank ({exc})") from exc


# run configuration ---------------------------------------------------------

_REQUIRED, _OPTIONAL = True, False
DEFAULT_DELTA = (5.0, 5.0)
DEFAULT_SIGMA = 1.0 / 3.0

_SCHEMA = {
    "paths": {
        "ensemble": _REQUIRED,
        "design": _REQUIRED,
        "z": _REQUIRED,
        "validation_ensemble": _OPTIONAL,
        "validation_design": _OPTIONAL,
        "extra_points": _OPTIONAL,
    },
    "grid": {"n_lon": _REQUIRED, "n_lat": _REQUIRED},
    "errors": {
        "delta_lon": _OPTIONAL,
        "delta_lat": _OPTIONAL,
        "sigma": _OPTIONAL,
        "regions": _OPTIONAL,
        "discrepancy_sigma": _OPTIONAL,
    },
    "wave": {
        "sample_count": _OPTIONAL,
        "seed": _OPTIONAL,
        "basis_kind": _OPTIONAL,
        "truncation_threshold": _OPTIONAL,
        "threshold_kind": _OPTIONAL,
        "probability": _OPTIONAL,
        "augment_truncation": _OPTIONAL,
        "min_first_vector_variance": _OPTIONAL,
    },
    "gp": {
        "mean_kind": _OPTIONAL,
        "nugget": _OPTIONAL,
        "lengthscale_bounds": _OPTIONAL,
        "restarts": _OPTIONAL,
        "seed": _OPTIONAL,
    },
}
_REQUIRED_SECTIONS = ("paths", "grid")
_REGION_KEYS = {"lat_min", "lat_max", "lon_min", "lon_max", "sigma"}


@dataclass
class RunConfig:
    """A parsed run configuration; relative paths are resolved against the file's directory."""

    paths: dict
    grid: dict
    errors: dict = field(default_factory=dict)
    wave: dict = field(default_factory=dict)
    gp: dict = field(default_factory=dict)
    source: Path = None

    def gp_config(self):
        kw = dict(self.gp)
        if "lengthscale_bounds" in kw:
            kw["lengthscale_bounds"] = tuple(kw["lengthscale_bounds"])
        return GpConfig(**kw)

    def wave_config(self, input_dim):
        return WaveConfig(input_dim=int(input_dim), gp=self.gp_config(), **self.wave)

    def error_kwargs(self):
        e = self.errors
        return {
            "delta": (float(e.get("delta_lon", DEFAULT_DELTA[0])), float(e.get("delta_lat", DEFAULT_DELTA[1]))),
            "sigma": float(e.get("sigma", DEFAULT_SIGMA)),
            "regions": tuple(e.get("regions", ())),
            "discrepancy_sigma": float(e.get("discrepancy_sigma", 0.0)),
        }


def parse_config(data, base_dir="."):
    """Validate a configuration mapping; every unknown key is an error."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    unknown = sorted(set(data) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(map(str, unknown))}")
    for name in _REQUIRED_SECTIONS:
        if name not in data:
            raise ConfigError(f"missing required section '{name}'")
    sections = {}
    for name, spec in _SCHEMA.items():
        section = data.get(name) or {}
        if not isinstance(section, dict):
            raise ConfigError(f"section '{name}' must be a mapping")
        unknown = sorted(set(section) - set(spec))
        if unknown:
            raise ConfigError(f"unknown key(s) in '{name}': {', '.join(map(str, unknown))}")
        missing = [k for k, req in spec.items() if req and k not in section]
        if missing:
            raise ConfigError(f"missing required key(s) in '{name}': {', '.join(missing)}")
        sections[name] = dict(section)

    for i, region in enumerate(sections["errors"].get("regions", [])):
        if not isinstance(region, dict) or "sigma" not in region or not set(region) <= _REGION_KEYS:
            raise ConfigError(
                f"errors.regions[{i}] needs 'sigma' and only the keys {sorted(_REGION_KEYS)}"
            )

    base_dir = Path(base_dir)
    sections["paths"] = {
        k: (base_dir / v if not os.path.isabs(str(v)) else Path(v))
        for k, v in sections["paths"].items()
    }
    return RunConfig(**sections, source=None)


def load_config(path):
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    cfg = parse_config(data, path.parent)
    cfg.source = path
    return cfg
