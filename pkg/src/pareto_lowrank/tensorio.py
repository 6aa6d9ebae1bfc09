"""On-disk container for weight matrices, calibration data and factors.

A container is a directory holding two files:

* ``manifest.json`` with keys ``format_version`` and ``entries``;
* ``data.bin``, the row-major little-endian matrices concatenated without padding.

Calibration containers reuse the same layout. The ``group`` label of each entry
says how to interpret it: ``"act"`` for raw activations (M x B, one sample per
column) and ``"cov:<B>"`` for a precomputed M x M covariance built from B samples.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "data.bin"

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_ENTRY_KEYS = ("name", "rows", "cols", "dtype", "group", "byte_offset", "byte_length")

SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8


class ContainerError(ValueError):
    """Raised when a container cannot be written or is inconsistent on disk."""


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    rows: int
    cols: int
    dtype: str
    group: str
    byte_offset: int
    byte_length: int

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in _ENTRY_KEYS}


@dataclass(frozen=True)
class TensorManifest:
    format_version: int
    entries: tuple[ManifestEntry, ...]

    def to_json(self) -> dict:
        return {
            "format_version": self.format_version,
            "entries": [e.to_json() for e in self.entries],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TensorManifest":
        if set(doc) != {"format_version", "entries"}:
            raise ContainerError(f"manifest keys must be format_version/entries, got {sorted(doc)}")
        entries = []
        for raw in doc["entries"]:
            if set(raw) != set(_ENTRY_KEYS):
                raise ContainerError(f"bad manifest entry keys: {sorted(raw)}")
            entries.append(ManifestEntry(**{k: raw[k] for k in _ENTRY_KEYS}))
        return cls(int(doc["format_version"]), tuple(entries))


@dataclass
class WeightTensor:
    """A named dense N x M matrix belonging to a layer group."""

    name: str
    matrix: np.ndarray
    group: str = "default"

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape  # type: ignore[return-value]

    def validate(self) -> None:
        if not self.name:
            raise ValueError("tensor name must be nonempty")
        if self.matrix.ndim != 2 or min(self.matrix.shape) < 1:
            raise ValueError(f"{self.name}: expected a nonempty 2-D matrix, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise ValueError(f"{self.name}: non-finite entry")


@dataclass
class Covariance:
    """Symmetric PSD calibration matrix ``X X^T`` and the number of samples behind it."""

    matrix: np.ndarray
    sample_count: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def validate(self) -> None:
        c = self.matrix
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"covariance must be square, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("covariance has non-finite entries")
        scale = max(np.abs(c).max(initial=0.0), np.finfo(float).tiny)
        if np.abs(c - c.T).max(initial=0.0) > SYMMETRY_RTOL * scale:
            raise ValueError("covariance is not symmetric")
        evals = np.linalg.eigvalsh((c + c.T) / 2)
        if evals.size and evals[0] < -PSD_RTOL * max(evals[-1], 0.0):
            raise ValueError(f"covariance is not PSD (min eigenvalue {evals[0]:.3e})")


@dataclass
class CalibrationRecord:
    """Calibration data for one layer: raw activations or a precomputed covariance."""

    layer_name: str
    activations: np.ndarray | None = None
    covariance: Covariance | None = None

    def __post_init__(self) -> None:
        if (self.activations is None) == (self.covariance is None):
            raise ValueError("exactly one of activations/covariance must be given")

    def validate(self) -> None:
        if self.covariance is not None:
            self.covariance.validate()
        else:
            x = self.activations
            if x.ndim != 2 or x.shape[1] < 1:
                raise ValueError(f"{self.layer_name}: activations need at least one sample column")
            if not np.all(np.isfinite(x)):
                raise ValueError(f"{self.layer_name}: non-finite activation")

    def to_covariance(self) -> Covariance:
        if self.covariance is not None:
            c = np.asarray(self.covariance.matrix, dtype=np.float64)
            return Covariance((c + c.T) / 2, self.covariance.sample_count)
        return covariance_from_activations(self.activations)


def covariance_from_activations(samples: np.ndarray) -> Covariance:
    """Return ``X X^T`` for an M x B sample matrix, exactly symmetrized."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError(f"expected an M x B matrix with B >= 1, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite activation")
    c = x @ x.T
    return Covariance((c + c.T) / 2, int(x.shape[1]))


def _dtype_tag(a: np.ndarray) -> str:
    return "f32" if a.dtype == np.float32 else "f64"


def _as_tensors(entries: Iterable) -> list[WeightTensor]:
    out = []
    for e in entries:
        if isinstance(e, WeightTensor):
            out.append(e)
        elif len(e) == 2:
            out.append(WeightTensor(e[0], np.asarray(e[1])))
        else:
            out.append(WeightTensor(e[0], np.asarray(e[1]), e[2]))
    return out


def write_container(entries: Sequence, path: str | os.PathLike) -> TensorManifest:
    """Write named matrices to a container directory.

    ``entries`` holds :class:`WeightTensor` objects or ``(name, matrix[, group])``
    tuples. float32 matrices are stored as f32; everything else as f64.
    """
    tensors = _as_tensors(entries)
    seen: set[str] = set()
    for t in tensors:
        if t.name in seen:
            raise ContainerError(f"duplicate name {t.name!r}")
        seen.add(t.name)
        t.validate()

    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    manifest_entries = []
    offset = 0
    with open(root / BLOB_NAME, "wb") as fh:
        for t in tensors:
            tag = _dtype_tag(t.matrix)
            payload = np.ascontiguousarray(t.matrix, dtype=_DTYPES[tag]).tobytes(order="C")
            fh.write(payload)
            rows, cols = t.matrix.shape
            manifest_entries.append(
                ManifestEntry(t.name, int(rows), int(cols), tag, t.group, offset, len(payload))
            )
            offset += len(payload)
    manifest = TensorManifest(FORMAT_VERSION, tuple(manifest_entries))
    (root / MANIFEST_NAME).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")
    return manifest


def read_manifest(path: str | os.PathLike) -> TensorManifest:
    text = (Path(path) / MANIFEST_NAME).read_text(encoding="utf-8")
    manifest = TensorManifest.from_json(json.loads(text))
    if manifest.format_version != FORMAT_VERSION:
        raise ContainerError(
            f"version mismatch: container has {manifest.format_version}, expected {FORMAT_VERSION}"
        )
    return manifest


def _check_manifest(manifest: TensorManifest, blob_size: int) -> None:
    names = [e.name for e in manifest.entries]
    if any(not n for n in names):
        raise ContainerError("empty entry name")
    if len(set(names)) != len(names):
        raise ContainerError("duplicate name in manifest")
    for e in manifest.entries:
        if e.dtype not in _DTYPES:
            raise ContainerError(f"{e.name}: unknown dtype {e.dtype!r}")
        if e.rows < 1 or e.cols < 1 or e.byte_offset < 0:
            raise ContainerError(f"{e.name}: invalid shape or offset")
        if e.byte_length != e.rows * e.cols * _DTYPES[e.dtype].itemsize:
            raise ContainerError(f"{e.name}: offset/length inconsistency")
    spans = sorted((e.byte_offset, e.byte_offset + e.byte_length) for e in manifest.entries)
    for (_, end), (start, _) in zip(spans, spans[1:]):
        if start < end:
            raise ContainerError("overlapping entries")
    if spans and spans[-1][1] > blob_size:
        raise ContainerError("truncated blob")


def read_container(path: str | os.PathLike) -> list[WeightTensor]:
    """Load every matrix of a container, in manifest order, bit-exactly."""
    root = Path(path)
    manifest = read_manifest(root)
    blob = (root / BLOB_NAME).read_bytes()
    _check_manifest(manifest, len(blob))
    out = []
    for e in manifest.entries:
        dt = _DTYPES[e.dtype]
        a = np.frombuffer(blob, dtype=dt, count=e.rows * e.cols, offset=e.byte_offset)
        out.append(WeightTensor(e.name, a.reshape(e.rows, e.cols).astype(dt.newbyteorder("="), copy=True), e.group))
    return out


def write_calibration(records: Sequence[CalibrationRecord], path: str | os.PathLike) -> TensorManifest:
    entries = []
    for rec in records:
        rec.validate()
        if rec.covariance is not None:
            entries.append(WeightTensor(rec.layer_name, rec.covariance.matrix, f"cov:{rec.covariance.sample_count}"))
        else:
            entries.append(WeightTensor(rec.layer_name, rec.activations, "act"))
    return write_container(entries, path)


def read_calibration(path: str | os.PathLike) -> dict[str, CalibrationRecord]:
    records = {}
    for t in read_container(path):
        if t.group == "act":
            rec = CalibrationRecord(t.name, activations=t.matrix)
        elif t.group.startswith("cov:"):
            try:
                count = int(t.group[4:])
            except ValueError:
                raise ContainerError(f"{t.name}: bad covariance sample count {t.group!r}") from None
            rec = CalibrationRecord(t.name, covariance=Covariance(t.matrix, count))
        else:
            raise ContainerError(f"{t.name}: unknown calibration kind {t.group!r}")
        rec.validate()
        records[t.name] = rec
    return records
