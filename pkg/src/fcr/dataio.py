"""On-disk formats and ingestion: metadata tables, dense matrices, dataset
manifests, label vocabularies and the flat key=value config files."""
from __future__ import annotations

import json
import os
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, LatentDims

MATRIX_MAGIC = b"FCRM"
MATRIX_VERSION = 1


class IngestionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# label vocabularies


@dataclass(frozen=True)
class Vocab:
    """Deterministic enumeration of categorical levels.

    Treatment vocabularies put control levels first so the control class has
    the reserved index 0.
    """

    values: tuple

    def __len__(self) -> int:
        return len(self.values)

    def index_of(self, value) -> int:
        try:
            return self.values.index(value)
        except ValueError:
            raise IngestionError(f"value {value!r} not in vocabulary {self.values}")

    def encode(self, arr: np.ndarray) -> np.ndarray:
        lookup = {v: i for i, v in enumerate(self.values)}
        try:
            return np.asarray([lookup[v] for v in arr.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise IngestionError(f"label {exc.args[0]!r} outside vocabulary") from exc

    def to_list(self) -> list:
        return list(self.values)

    @classmethod
    def from_list(cls, values: Sequence) -> "Vocab":
        return cls(tuple(values))


def treatment_vocab(ds: Dataset) -> Vocab:
    control_values = sorted(set(np.asarray(ds.treatments)[ds.control_mask].tolist()))
    rest = sorted(set(np.asarray(ds.treatments).tolist()) - set(control_values))
    return Vocab(tuple(control_values) + tuple(rest))


def covariate_vocab(ds: Dataset) -> Vocab:
    return Vocab(tuple(sorted(set(np.asarray(ds.covariates).tolist()))))


# ---------------------------------------------------------------------------
# dense matrix file: 16-byte header (magic, version, rows, cols), f32 row-major


def write_matrix(path: Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise IngestionError("matrix files hold 2-d arrays")
    header = MATRIX_MAGIC + struct.pack("<III", MATRIX_VERSION, *matrix.shape)
    _atomic_write_bytes(Path(path), header + matrix.tobytes())


def read_matrix(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) >= 4 and raw[:4] == MATRIX_MAGIC:
        if len(raw) < 16:
            raise IngestionError(f"{path}: truncated matrix header")
        version, rows, cols = struct.unpack("<III", raw[4:16])
        if version != MATRIX_VERSION:
            raise IngestionError(f"{path}: unsupported matrix version {version}")
        expected = 16 + 4 * rows * cols
        if len(raw) != expected:
            raise IngestionError(
                f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(raw)}"
            )
        return np.frombuffer(raw[16:], dtype="<f4").reshape(rows, cols).astype(np.float64)
    return _read_text_matrix(path)


def _read_text_matrix(path: Path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise IngestionError(f"{path}: empty matrix file")
    delim = "\t" if "\t" in lines[0] else ","
    start = 0
    try:
        [float(v) for v in lines[0].split(delim)]
    except ValueError:
        start = 1  # header row
    rows = []
    for ln, line in enumerate(lines[start:], start + 1):
        if not line.strip():
            continue
        try:
            rows.append([float(v) for v in line.split(delim)])
        except ValueError as exc:
            raise IngestionError(f"{path}:{ln}: non-numeric matrix entry ({exc})")
    matrix = np.asarray(rows, dtype=np.float64)
    if matrix.ndim != 2:
        raise IngestionError(f"{path}: ragged or empty text matrix")
    return matrix


def write_text_matrix(path: Path, matrix: np.ndarray, columns: Sequence[str],
                      delim: str = "\t") -> None:
    matrix = np.asarray(matrix)
    out = [delim.join(columns)]
    for row in matrix:
        out.append(delim.join(repr(float(v)) for v in row))
    _atomic_write_bytes(Path(path), ("\n".join(out) + "\n").encode())


# ---------------------------------------------------------------------------
# metadata table + dataset manifest


@dataclass(frozen=True)
class IngestSchema:
    covariate_column: str = "covariate"
    treatment_column: str = "treatment"
    control_label: str = "control"


def _parse_labels(raw: list[str]) -> np.ndarray:
    """Columns that parse fully as numbers become float labels."""
    try:
        return np.asarray([float(v) for v in raw], dtype=np.float64)
    except ValueError:
        return np.asarray(raw, dtype=object)


def _parse_control_value(label: str, treatments: np.ndarray):
    if treatments.dtype == object:
        return label
    try:
        return float(label)
    except ValueError:
        return None


def read_metadata(path: Path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise IngestionError(f"{path}: empty metadata file")
    delim = "\t" if "\t" in lines[0] else ","
    header = lines[0].split(delim)
    rows = [line.split(delim) for line in lines[1:] if line.strip()]
    for ln, row in enumerate(rows, 2):
        if len(row) != len(header):
            raise IngestionError(
                f"{path}:{ln}: row has {len(row)} fields, header has {len(header)}"
            )
    return header, rows


def ingest_dataset(matrix_path: Path, metadata_path: Path,
                   schema: IngestSchema = IngestSchema(),
                   latents_path: Optional[Path] = None,
                   dims: Optional[LatentDims] = None) -> Dataset:
    """Validated Dataset from a matrix file plus a headered metadata table."""
    outcomes = read_matrix(matrix_path)
    bad = np.argwhere(~np.isfinite(outcomes))
    if bad.size:
        r, c = bad[0]
        raise IngestionError(f"{matrix_path}: non-finite value at row {r}, column {c}")
    header, rows = read_metadata(metadata_path)
    for col in (schema.covariate_column, schema.treatment_column):
        if col not in header:
            raise IngestionError(
                f"{metadata_path}: missing column {col!r} (have {header})"
            )
    if len(rows) != outcomes.shape[0]:
        raise IngestionError(
            f"matrix has {outcomes.shape[0]} rows but metadata has {len(rows)}"
        )
    ci = header.index(schema.covariate_column)
    ti = header.index(schema.treatment_column)
    covariates = _parse_labels([r[ci] for r in rows])
    treatments = _parse_labels([r[ti] for r in rows])
    control_value = _parse_control_value(schema.control_label, treatments)
    control_mask = (
        np.zeros(len(rows), dtype=bool)
        if control_value is None
        else np.asarray([v == control_value for v in treatments.tolist()], dtype=bool)
    )
    if not control_mask.any():
        warnings.warn(
            f"control label {schema.control_label!r} absent from treatment column; "
            "control mask is empty"
        )
    latents = read_matrix(latents_path) if latents_path else None
    return Dataset(
        outcomes=outcomes,
        covariates=covariates,
        treatments=treatments,
        control_mask=control_mask,
        latents=latents,
        dims=dims,
    )


def write_dataset(ds: Dataset, out_dir: Path, stem: str = "dataset",
                  control_label: Optional[str] = None) -> Path:
    """Write matrix + metadata (+ latents) and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix_file = f"{stem}.y.fcrm"
    meta_file = f"{stem}.meta.tsv"
    write_matrix(out_dir / matrix_file, ds.outcomes)

    def fmt(v):
        return repr(float(v)) if isinstance(v, (int, float, np.floating)) else str(v)

    lines = ["covariate\ttreatment"]
    for c, t in zip(ds.covariates.tolist(), ds.treatments.tolist()):
        lines.append(f"{fmt(c)}\t{fmt(t)}")
    _atomic_write_bytes(out_dir / meta_file, ("\n".join(lines) + "\n").encode())

    if control_label is None:
        controls = set(np.asarray(ds.treatments)[ds.control_mask].tolist())
        control_label = fmt(sorted(controls)[0]) if controls else ""
    manifest = {
        "matrix": matrix_file,
        "metadata": meta_file,
        "schema": {
            "covariate_column": "covariate",
            "treatment_column": "treatment",
            "control_label": control_label,
        },
    }
    if ds.latents is not None:
        latents_file = f"{stem}.z.fcrm"
        write_matrix(out_dir / latents_file, ds.latents)
        manifest["latents"] = latents_file
    if ds.dims is not None:
        manifest["dims"] = {"n_x": ds.dims.n_x, "n_tx": ds.dims.n_tx, "n_t": ds.dims.n_t}
    manifest_path = out_dir / f"{stem}.json"
    _atomic_write_bytes(manifest_path, json.dumps(manifest, indent=2).encode())
    return manifest_path


def load_dataset(manifest_path: Path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{manifest_path}: unreadable dataset manifest ({exc})")
    base = manifest_path.parent
    schema = IngestSchema(**manifest.get("schema", {}))
    dims = LatentDims(**manifest["dims"]) if "dims" in manifest else None
    return ingest_dataset(
        base / manifest["matrix"],
        base / manifest["metadata"],
        schema=schema,
        latents_path=base / manifest["latents"] if "latents" in manifest else None,
        dims=dims,
    )


# ---------------------------------------------------------------------------
# flat key = value config files


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(key: str, value: str, kind: str):
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {value!r}")
        if kind == "floats":
            return tuple(float(v) for v in value.split(",") if v.strip())
        if kind == "str":
            return value
        if kind == "str?":
            return None if value.lower() in ("", "none") else value
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}")
    raise ConfigError(f"unknown config kind {kind!r} for key {key!r}")


CONFIG_SCHEMA: dict[str, tuple[str, object]] = {
    # synthetic data generation
    "sim.sample_count": ("int", 5000),
    "sim.t_support": ("floats", (1.0, 2.0, 3.0)),
    "sim.x_support": ("floats", (100.0, 1000.0, 5000.0)),
    "sim.y_dim": ("int", 96),
    "sim.mixer_depth": ("int", 2),
    "sim.mixer_activation": ("float", 0.2),
    "sim.mean_mode": ("str", "product"),
    "sim.control_t": ("str?", "1.0"),
    "sim.n_x": ("int", 1),
    "sim.n_tx": ("int", 4),
    "sim.n_t": ("int", 1),
    # model shape
    "model.n_x": ("int", 1),
    "model.n_tx": ("int", 4),
    "model.n_t": ("int", 1),
    "model.hidden": ("int", 128),
    "model.depth": ("int", 2),
    "model.embed_width": ("int", 32),
    "model.slope": ("float", 0.01),
    # training
    "train.epochs": ("int", 40),
    "train.batch_size": ("int", 2046),
    "train.lr": ("float", 3e-4),
    "train.disc_lr": ("float", 3e-4),
    "train.disc_steps": ("int", 10),
    "train.w_sim": ("float", 0.0),
    "train.w_ct": ("float", 0.0),
    "train.w_dis": ("float", 0.0),
    "train.standardize": ("bool", True),
    # split protocol
    "split.prediction": ("float", 0.2),
    "split.test": ("float", 0.2),
    "split.validation": ("float", 0.2),
    # evaluation
    "eval.knn": ("int", 15),
    "eval.resolution": ("float", 1.0),
    "eval.hsic_permutations": ("int", 300),
    "eval.kci_samples": ("int", 2000),
    "eval.kci_repeats": ("int", 20),
    "eval.max_cells": ("int", 2000),
    "eval.deg_top_k": ("int", 20),
    # ingestion of external matrices
    "ingest.covariate_column": ("str", "covariate"),
    "ingest.treatment_column": ("str", "treatment"),
    "ingest.control_label": ("str", "control"),
    # grid search
    "grid.w_sim": ("floats", (0.5, 1.0)),
    "grid.w_ct": ("floats", (0.5,)),
    "grid.w_dis": ("floats", (0.1,)),
    "grid.epochs": ("int", 10),
    "grid.workers": ("int", 1),
    # prediction
    "predict.treatment": ("str?", None),
}


def resolve_config(path: Optional[Path] = None,
                   overrides: Sequence[str] = ()) -> dict:
    """Defaults, then config file, then --set overrides; unknown keys rejected."""
    resolved = {key: default for key, (_, default) in CONFIG_SCHEMA.items()}
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(parse_config_text(Path(path).read_text(), source=str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    for key, value in raw.items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        kind, _ = CONFIG_SCHEMA[key]
        resolved[key] = _coerce(key, value, kind)
    return resolved


# ---------------------------------------------------------------------------


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def atomic_write_text(path: Path, text: str) -> None:
    _atomic_write_bytes(Path(path), text.encode())
