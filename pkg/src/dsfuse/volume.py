"""Dense 3D scalar volumes, their on-disk format, resizing and standardization.

On disk a volume is a pair of files sharing a stem: ``<stem>.json`` holds
the header (format version, dims, spacing, modality, dtype) and
``<stem>.raw`` holds the voxels as little-endian float32 in C order
(z slowest, x fastest).
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, DomainError, FormatError, ShapeError, UsageError

FORMAT_NAME = "dsfuse-volume"
FORMAT_VERSION = 1
DTYPE_TAG = "float32-le"
DESK_DIMS = (32, 64, 64)


class Modality(str, enum.Enum):
    PET = "PET"
    CT = "CT"
    MASK = "MASK"
    PROB = "PROB"
    CONFLICT = "CONFLICT"


_UNIT_RANGE = (Modality.PROB, Modality.CONFLICT)


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable 3D grid of scalars with physical spacing and a modality tag.

    ``data`` has shape ``dims`` and is stored read-only. Masks must be
    exactly binary and probability/conflict maps must lie in [0, 1].
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    modality: Modality = Modality.PET
    dims: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not data.flags.c_contiguous or data.flags.writeable:
            data = np.array(data, order="C", copy=True)
            data.flags.writeable = False
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(math.isfinite(s) and s > 0 for s in spacing):
            raise DomainError(f"spacing must be three positive reals, got {self.spacing}")
        modality = Modality(self.modality)
        _check_values(data, modality)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "modality", modality)
        object.__setattr__(self, "dims", tuple(int(n) for n in data.shape))

    @property
    def size(self) -> int:
        return int(self.data.size)

    def with_data(self, data, modality: Modality | None = None) -> "Volume":
        """A new volume on the same grid."""
        return Volume(data, self.spacing, self.modality if modality is None else modality)

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.modality == other.modality
            and self.data.dtype == other.data.dtype
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


def _check_values(data: np.ndarray, modality: Modality) -> None:
    if modality == Modality.MASK:
        if not np.all((data == 0.0) | (data == 1.0)):
            raise DomainError("MASK volume must contain only 0 and 1")
    elif modality in _UNIT_RANGE:
        if not np.all(np.isfinite(data)):
            raise DomainError(f"{modality.value} volume contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise DomainError(f"{modality.value} volume must lie in [0, 1]")


def _stem(path) -> Path:
    path = Path(path)
    if path.suffix in (".json", ".raw"):
        return path.with_suffix("")
    return path


def header_path(path) -> Path:
    stem = _stem(path)
    return stem.with_name(stem.name + ".json")


def payload_path(path) -> Path:
    stem = _stem(path)
    return stem.with_name(stem.name + ".raw")


def save_volume(v: Volume, path) -> Path:
    """Write ``v`` as a header/payload pair; returns the header path.

    float64 volumes are narrowed to float32 on write.
    """
    hpath, ppath = header_path(path), payload_path(path)
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "dims": list(v.dims),
        "spacing": list(v.spacing),
        "modality": v.modality.value,
        "dtype": DTYPE_TAG,
        "payload": ppath.name,
    }
    payload = np.ascontiguousarray(v.data, dtype="<f4").tobytes(order="C")
    ppath.write_bytes(payload)
    hpath.write_text(json.dumps(header, indent=2) + "\n")
    return hpath


def load_volume(path) -> Volume:
    hpath = header_path(path)
    try:
        header = json.loads(hpath.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"volume header not found: {hpath}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable volume header {hpath}: {exc}") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise FormatError(f"{hpath} is not a {FORMAT_NAME} header")
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"unknown volume format version {header.get('version')!r}")
    if header.get("dtype") != DTYPE_TAG:
        raise FormatError(f"unsupported dtype tag {header.get('dtype')!r}")
    try:
        dims = tuple(int(n) for n in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        modality = Modality(header["modality"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed header {hpath}: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"bad dims {dims} in {hpath}")

    ppath = hpath.with_name(header.get("payload", payload_path(path).name))
    try:
        raw = ppath.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"volume payload not found: {ppath}") from exc
    expected = 4 * dims[0] * dims[1] * dims[2]
    if len(raw) != expected:
        raise FormatError(f"payload {ppath} has {len(raw)} bytes, header implies {expected}")
    data = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    try:
        return Volume(data, spacing, modality)
    except (DomainError, ShapeError) as exc:
        raise FormatError(f"invalid contents in {ppath}: {exc}") from exc


def _linear_axis(a: np.ndarray, axis: int, n_out: int, nearest: bool) -> np.ndarray:
    n_in = a.shape[axis]
    if n_out == n_in:
        return a
    if n_out == 1:
        coords = np.array([(n_in - 1) / 2.0])
    else:
        # corners of the input and output grids coincide
        coords = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    if nearest:
        idx = np.clip(np.floor(coords + 0.5).astype(np.intp), 0, n_in - 1)
        return np.take(a, idx, axis=axis)
    lo = np.clip(np.floor(coords).astype(np.intp), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    t = (coords - lo).astype(a.dtype)
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    below = np.take(a, lo, axis=axis)
    above = np.take(a, hi, axis=axis)
    # a + t*(b - a) keeps constant runs exact
    return below + t * (above - below)


def resize_trilinear(v: Volume, target_dims) -> Volume:
    """Resample to ``target_dims``; nearest-neighbour for masks.

    Grid corners are aligned, so resizing to the same dims is the identity
    and the centre of an upsampled 2x2x2 block is the mean of its corners.
    """
    target = tuple(int(n) for n in target_dims)
    if len(target) != 3 or min(target) < 1:
        raise DomainError(f"target dims must be three positive integers, got {target_dims}")
    nearest = v.modality == Modality.MASK
    out = v.data
    for axis, n in enumerate(target):
        out = _linear_axis(out, axis, n, nearest)
    if v.modality in _UNIT_RANGE:
        out = np.clip(out, 0.0, 1.0)
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(v.spacing, v.dims, target))
    return Volume(np.array(out, dtype=v.data.dtype), spacing, v.modality)


def standardize(v: Volume) -> Volume:
    """Per-volume z-score using the population standard deviation."""
    if v.modality not in (Modality.PET, Modality.CT):
        raise UsageError(f"standardize applies to intensity volumes, not {v.modality.value}")
    if v.size < 2:
        raise DegenerateInputError("cannot standardize a single voxel")
    x = v.data.astype(np.float64)
    mean = x.mean()
    std = x.std()
    if not math.isfinite(std) or std <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateInputError("volume has zero variance")
    return v.with_data(((x - mean) / std).astype(v.data.dtype))
