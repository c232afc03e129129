"""On-disk tensor format and dataset manifests.

Every stage of the pipeline exchanges data through two file kinds:

* ``.nst`` tensors — a minimal binary layout (see :func:`write_tensor`):
  4-byte magic ``NST1``, one unsigned byte for the dtype code
  (0 = float32, 1 = float64), one unsigned byte for the number of
  dimensions (1..3), ``ndim`` little-endian uint64 dims, then the payload
  in row-major order.  Write-then-read is bit-exact.
* manifest ``.json`` files — self-describing metadata for one named
  series: its sampling rate, role, channel names, the tensor path, and
  optionally a list of repeat tensors for repeated presentations.

Channel axis convention: tensors with role ``responses`` or
``stimulus_waveform`` are stored channels x samples; role ``features``
is samples x features, so the channel axis is the second one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"NST1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}

ROLES = ("stimulus_waveform", "features", "responses")


class BadMagicError(DataError):
    """File does not start with the NST1 magic bytes."""


class UnknownDtypeError(DataError):
    """Dtype code byte is not a known code."""


class TruncatedPayloadError(DataError):
    """File ends before the declared payload is complete."""


@dataclass
class TimeSeries:
    """A channels x samples matrix with an explicit sampling rate."""

    values: np.ndarray
    rate_hz: float

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.rate_hz <= 0:
            raise DataError(f"rate_hz must be positive, got {self.rate_hz}")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def n_samples(self) -> int:
        return self.values.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.rate_hz


def write_tensor(path, data: np.ndarray, dtype: str = "float64") -> None:
    """Write ``data`` to ``path`` in the NST1 binary layout.

    Non-finite values are rejected so files always round-trip through
    :func:`read_tensor` bit-exactly.
    """
    arr = np.asarray(data)
    if arr.ndim not in (1, 2, 3):
        raise DataError(f"tensor must have 1..3 dims, got {arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"refusing to write non-finite values to {path}")
    np_dtype = np.dtype(dtype)
    if np_dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported dtype {dtype!r} (float32/float64 only)")
    code = _DTYPE_CODES[np_dtype]
    arr = np.ascontiguousarray(arr, dtype=_DTYPES[code])
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BB", code, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path):
    """Read an NST1 tensor.  Returns ``(array, dtype_name)``.

    Raises a distinct error for a bad magic, an unknown dtype code, or a
    truncated payload; messages carry the file path and byte offset.
    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 6 or blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic at offset 0 (expected NST1)")
    code, ndim = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPES:
        raise UnknownDtypeError(f"{path}: unknown dtype code {code} at offset 4")
    if ndim not in (1, 2, 3):
        raise DataError(f"{path}: ndim {ndim} out of range at offset 5")
    header_end = 6 + 8 * ndim
    if len(blob) < header_end:
        raise TruncatedPayloadError(
            f"{path}: truncated dims, file ends at offset {len(blob)}"
        )
    dims = struct.unpack_from(f"<{ndim}Q", blob, 6)
    np_dtype = _DTYPES[code]
    expected = header_end + int(np.prod(dims)) * np_dtype.itemsize
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload truncated at offset {len(blob)}, expected {expected} bytes"
        )
    arr = np.frombuffer(blob[header_end:expected], dtype=np_dtype).reshape(dims)
    return arr.copy(), "float32" if code == 0 else "float64"


@dataclass
class DatasetManifest:
    """Metadata for one named series on disk.

    ``tensor_path`` and every ``repeats`` entry are relative to the
    manifest's own directory.
    """

    name: str
    rate_hz: float
    role: str
    channel_names: list[str]
    tensor_path: str
    repeats: list[str] | None = field(default=None)

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"manifest {self.name!r}: unknown role {self.role!r}")
        if self.rate_hz <= 0:
            raise DataError(f"manifest {self.name!r}: rate_hz must be positive")

    @property
    def channel_axis(self) -> int:
        return 1 if self.role == "features" else 0

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "rate_hz": self.rate_hz,
            "role": self.role,
            "channel_names": list(self.channel_names),
            "tensor_path": self.tensor_path,
        }
        if self.repeats is not None:
            d["repeats"] = list(self.repeats)
        return d

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot parse manifest ({exc})") from exc
    try:
        return DatasetManifest(
            name=raw["name"],
            rate_hz=float(raw["rate_hz"]),
            role=raw["role"],
            channel_names=list(raw["channel_names"]),
            tensor_path=raw["tensor_path"],
            repeats=list(raw["repeats"]) if "repeats" in raw else None,
        )
    except KeyError as exc:
        raise DataError(f"{path}: manifest missing field {exc}") from exc


def validate_manifest(manifest: DatasetManifest, base_dir) -> None:
    """Check that the referenced tensors exist and agree with the metadata."""
    base = Path(base_dir)
    arr, _ = read_tensor(base / manifest.tensor_path)
    n_channels = arr.shape[manifest.channel_axis]
    if len(manifest.channel_names) != n_channels:
        raise DataError(
            f"manifest {manifest.name!r}: {len(manifest.channel_names)} channel "
            f"names but tensor has {n_channels} channels"
        )
    if manifest.repeats is not None:
        for rel in manifest.repeats:
            rep, _ = read_tensor(base / rel)
            if rep.shape != arr.shape:
                raise DataError(
                    f"manifest {manifest.name!r}: repeat {rel} has dims "
                    f"{rep.shape}, expected {arr.shape}"
                )


def average_repeats(manifest: DatasetManifest, base_dir) -> TimeSeries:
    """Element-wise mean across the manifest's repeat tensors.

    The sampling rate is preserved.  All repeats must share identical dims.
    """
    if not manifest.repeats:
        raise DataError(f"manifest {manifest.name!r} has no repeats to average")
    base = Path(base_dir)
    first = None
    acc = None
    for rel in manifest.repeats:
        arr, _ = read_tensor(base / rel)
        if first is None:
            first = arr.astype(np.float64)
            acc = np.zeros_like(first)
        else:
            if arr.shape != first.shape:
                raise DataError(
                    f"manifest {manifest.name!r}: repeat {rel} has dims "
                    f"{arr.shape}, expected {first.shape}"
                )
            # accumulate deviations so n identical repeats average exactly
            acc += arr - first
    return TimeSeries(first + acc / len(manifest.repeats), manifest.rate_hz)
