"""File formats: score-matrix CSV, feature-bundle JSON, fitted statistics, results, run config.

All formats are text. Floats are written with 17 significant digits (CSV)
or Python's shortest round-trip repr (JSON), so every format round-trips
bit-exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ChecksumError, ConfigurationError, ParseError, SchemaVersionError
from .scores import ClassStats, FeatureBundle, GaussianLayerStats, GramLayerStats

SCHEMA_VERSION = 1
ID_COLUMNS = ("id", "sample_id")


@dataclass
class ScoreMatrix:
    """Named score columns; rows are samples."""

    names: list[str]
    values: np.ndarray
    sample_ids: list[str] | None = None

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.size == 0:
            values = values.reshape(0, len(self.names))
        if values.ndim != 2 or values.shape[1] != len(self.names):
            raise ConfigurationError(f"values of shape {values.shape} do not match {len(self.names)} names")
        self.values = values
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError(f"score names are not unique: {self.names}")
        if self.sample_ids is not None and len(self.sample_ids) != self.values.shape[0]:
            raise ConfigurationError("sample_ids length does not match the number of rows")

    @property
    def K(self) -> int:
        return len(self.names)

    def __len__(self) -> int:
        return self.values.shape[0]


def write_text_atomic(path: Path, text: str) -> None:
    # Write to a sibling temp file and rename, so readers never see partial output.
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "x", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def read_score_matrix(path: str | os.PathLike) -> ScoreMatrix:
    """Parse a score CSV with a header row and an optional leading ``id``/``sample_id`` column.

    Raises:
        ParseError: empty file, ragged row, unparsable or non-finite value
            (the message names the line and column).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    has_id = header[0].lower() in ID_COLUMNS
    names = header[1:] if has_id else header
    if not names or any(not n for n in names):
        raise ParseError(f"{path}:1: header has empty column names")
    if len(set(names)) != len(names):
        raise ParseError(f"{path}:1: duplicate column names")
    values, ids = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}")
        if has_id:
            ids.append(row[0])
            row = row[1:]
        parsed = []
        for col, cell in enumerate(row):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"{path}:{lineno}: column {names[col]!r}: cannot parse {cell!r}") from None
            if not math.isfinite(v):
                raise ParseError(f"{path}:{lineno}: column {names[col]!r}: non-finite value {cell!r}")
            parsed.append(v)
        values.append(parsed)
    arr = np.array(values, dtype=float).reshape(len(values), len(names))
    return ScoreMatrix(names=list(names), values=arr, sample_ids=ids if has_id else None)


def write_score_matrix(matrix: ScoreMatrix, path: str | os.PathLike) -> None:
    lines = []
    header = (["sample_id"] if matrix.sample_ids is not None else []) + list(matrix.names)
    lines.append(",".join(header))
    for r, row in enumerate(matrix.values):
        cells = [f"{v:.17g}" for v in row]
        if matrix.sample_ids is not None:
            cells.insert(0, str(matrix.sample_ids[r]))
        lines.append(",".join(cells))
    write_text_atomic(Path(path), "\n".join(lines) + "\n")


# --- JSON helpers ---------------------------------------------------------------


def _dump_json(payload: dict, path: str | os.PathLike) -> None:
    write_text_atomic(Path(path), json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n")


def _load_json(path: str | os.PathLike) -> Any:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc


def _check_version(data: Any, path, kind: str) -> None:
    if not isinstance(data, dict):
        raise ParseError(f"{path}: expected a JSON object")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(f"{path}: {kind} schema version {version!r} is not supported (expected {SCHEMA_VERSION})")


# --- results ------------------------------------------------------------------------


def write_results(results: dict, path: str | os.PathLike) -> None:
    """Write a results mapping as JSON with a schema version and sorted keys.

    ``results`` typically holds ``"detections"`` (a list of
    :meth:`DetectionResult.to_dict` mappings) and optional ``"metrics"``.
    """
    _dump_json({"schema_version": SCHEMA_VERSION, **results}, path)


def read_results(path: str | os.PathLike) -> dict:
    data = _load_json(path)
    _check_version(data, path, "results")
    return {k: v for k, v in data.items() if k != "schema_version"}


# --- feature bundles -----------------------------------------------------------------


def _bundle_to_dict(b: FeatureBundle) -> dict:
    return {
        "layers": [{"shape": list(a.shape), "data": a.reshape(-1).tolist()} for a in b.layers],
        "label": b.label,
        "predicted_class": b.predicted_class,
        "softmax": None if b.softmax is None else b.softmax.tolist(),
    }


def _bundle_from_dict(d: dict, where: str) -> FeatureBundle:
    layers = []
    for i, layer in enumerate(d["layers"]):
        shape = tuple(int(s) for s in layer["shape"])
        data = np.asarray(layer["data"], dtype=float)
        if int(np.prod(shape)) != data.size:
            raise ParseError(f"{where}: layer {i} has {data.size} values for shape {shape}")
        layers.append(data.reshape(shape))
    return FeatureBundle(layers=layers, label=d.get("label"), predicted_class=d.get("predicted_class"), softmax=d.get("softmax"))


def write_feature_bundles(bundles: Sequence[FeatureBundle], path: str | os.PathLike) -> None:
    _dump_json({"schema_version": SCHEMA_VERSION, "bundles": [_bundle_to_dict(b) for b in bundles]}, path)


def read_feature_bundles(path: str | os.PathLike) -> list[FeatureBundle]:
    data = _load_json(path)
    _check_version(data, path, "feature bundle")
    try:
        return [_bundle_from_dict(d, f"{path}: bundle {i}") for i, d in enumerate(data["bundles"])]
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed feature bundle file ({exc})") from exc


# --- fitted statistics -------------------------------------------------------------


def _stats_payload(stats: ClassStats) -> dict:
    return {
        "classes": list(stats.classes),
        "layer_shapes": {str(k): list(v) for k, v in stats.layer_shapes.items()},
        "gaussian": {
            str(k): {"means": g.means.tolist(), "covariance": g.covariance.tolist(), "ridge": g.ridge}
            for k, g in stats.gaussian.items()
        },
        "gram": {
            str(k): {
                "powers": list(g.powers),
                "mins": g.mins.tolist(),
                "maxs": g.maxs.tolist(),
                "normalizer": g.normalizer,
            }
            for k, g in stats.gram.items()
        },
    }


def _checksum(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_class_stats(stats: ClassStats, path: str | os.PathLike) -> None:
    payload = _stats_payload(stats)
    _dump_json({"schema_version": SCHEMA_VERSION, "checksum": _checksum(payload), "stats": payload}, path)


def load_class_stats(path: str | os.PathLike) -> ClassStats:
    """Load statistics written by :func:`save_class_stats`.

    Raises:
        SchemaVersionError: unsupported version.
        ChecksumError: payload was modified or corrupted.
    """
    data = _load_json(path)
    _check_version(data, path, "class statistics")
    payload = data.get("stats")
    if not isinstance(payload, dict) or _checksum(payload) != data.get("checksum"):
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupted")
    try:
        return ClassStats(
            classes=tuple(int(c) for c in payload["classes"]),
            layer_shapes={int(k): tuple(v) for k, v in payload["layer_shapes"].items()},
            gaussian={
                int(k): GaussianLayerStats(means=np.array(g["means"]), covariance=np.array(g["covariance"]), ridge=g["ridge"])
                for k, g in payload["gaussian"].items()
            },
            gram={
                int(k): GramLayerStats(
                    powers=tuple(g["powers"]), mins=np.array(g["mins"]), maxs=np.array(g["maxs"]), normalizer=g["normalizer"]
                )
                for k, g in payload["gram"].items()
            },
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed class statistics ({exc})") from exc


# --- run configuration -----------------------------------------------------------------


@dataclass
class RunConfig:
    """Options shared by CLI subcommands; loaded from JSON, unknown keys rejected."""

    alpha: float | None = None
    epsilon: float | None = None
    delta: float | None = None
    method: str | None = None
    K: int | None = None
    scan_limit: int | None = None
    seed: int | None = None
    workers: int | None = None
    temperature: float | None = None
    powers: list[int] | None = None
    ridge: float | None = None
    holdout_fraction: float | None = None
    paths: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict, where: str = "config") -> RunConfig:
        if not isinstance(data, dict):
            raise ConfigurationError(f"{where}: expected a JSON object")
        known = {f.name for f in fields(cls)} | {"schema_version"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"{where}: unknown keys {unknown}")
        version = data.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(f"{where}: config schema version {version!r} is not supported")
        kwargs = {k: v for k, v in data.items() if k != "schema_version"}
        cfg = cls(**kwargs)
        cfg._validate(where)
        return cfg

    def _validate(self, where: str) -> None:
        checks = {
            "alpha": (float, lambda v: 0 < v < 1),
            "delta": (float, lambda v: 0 < v < 1),
            "epsilon": (float, lambda v: v >= 0),
            "K": (int, lambda v: v >= 1),
            "scan_limit": (int, lambda v: v >= 1),
            "seed": (int, lambda v: v >= 0),
            "workers": (int, lambda v: v >= 1),
            "temperature": (float, lambda v: v > 0),
            "ridge": (float, lambda v: v >= 0),
            "holdout_fraction": (float, lambda v: 0 <= v < 1),
        }
        for name, (kind, ok) in checks.items():
            v = getattr(self, name)
            if v is None:
                continue
            if isinstance(v, bool) or not isinstance(v, (int, float)) or (kind is int and not isinstance(v, int)):
                raise ConfigurationError(f"{where}: {name} must be a {kind.__name__}, got {v!r}")
            if not ok(v):
                raise ConfigurationError(f"{where}: {name}={v!r} is out of range")
        if self.method is not None and self.method not in ("bh", "bonferroni", "naive"):
            raise ConfigurationError(f"{where}: unknown method {self.method!r}")
        if not isinstance(self.paths, dict) or not all(isinstance(v, str) for v in self.paths.values()):
            raise ConfigurationError(f"{where}: paths must map names to strings")

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **{f.name: getattr(self, f.name) for f in fields(self)}}


def load_run_config(path: str | os.PathLike) -> RunConfig:
    return RunConfig.from_dict(_load_json(path), where=str(path))
