"""Grid rasters, latitude weights, masks, patch reshaping and the binary tensor format.

Every other module passes fields around as plain ``numpy`` arrays of shape
``(..., H, W)``; :class:`GridField` is the typed wrapper used at module
boundaries (dataset files, rollout outputs).
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LHTENSOR"
DTYPE_F32LE = 0
_DTYPES = {DTYPE_F32LE: np.dtype("<f4")}

STEP_SECONDS = 6 * 3600


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TensorFileError(IOError):
    pass


class ChecksumError(TensorFileError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridField:
    """One variable on a regular lat-lon grid at one time step.

    ``lats`` are stored north-to-south (descending); use :meth:`normalized`
    to reorient a field built from ascending latitudes.
    """

    var_id: str
    time_index: int
    lats: np.ndarray
    lons: np.ndarray
    data: np.ndarray
    units: str = ""

    def __post_init__(self):
        lats = np.asarray(self.lats, dtype=np.float64)
        lons = np.asarray(self.lons, dtype=np.float64)
        data = np.asarray(self.data)
        if lats.ndim != 1 or lons.ndim != 1 or lats.size < 1 or lons.size < 1:
            raise ShapeError("lats and lons must be non-empty 1-D arrays")
        if data.shape != (lats.size, lons.size):
            raise ShapeError(f"data shape {data.shape} != ({lats.size}, {lons.size})")
        if not np.all(np.isfinite(data)):
            raise DomainError(f"{self.var_id}: non-finite values in field")
        if lats.size > 1:
            d = np.diff(lats)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise DomainError("latitudes must be strictly monotone")
        if lons.size > 1:
            d = np.diff(lons)
            if not np.allclose(d, d[0], rtol=1e-9, atol=1e-9):
                raise DomainError("longitudes must be uniformly spaced")
        object.__setattr__(self, "lats", _frozen(lats))
        object.__setattr__(self, "lons", _frozen(lons))
        object.__setattr__(self, "data", _frozen(data))

    @property
    def shape(self):
        return self.data.shape

    def normalized(self) -> "GridField":
        """Return the field with latitudes in the canonical descending order."""
        if self.lats.size > 1 and self.lats[1] > self.lats[0]:
            return GridField(self.var_id, self.time_index, self.lats[::-1],
                             self.lons, self.data[::-1], self.units)
        return self


def regular_grid(H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell-centre latitudes (north to south) and longitudes in degrees."""
    if H < 1 or W < 1:
        raise ShapeError("grid dimensions must be positive")
    dlat = 180.0 / H
    lats = 90.0 - dlat * (np.arange(H) + 0.5)
    lons = np.arange(W) * (360.0 / W)
    return lats, lons


def lat_weights(lats) -> np.ndarray:
    """cos(latitude) weights normalised to unit mean."""
    lats = np.asarray(lats, dtype=np.float64)
    if lats.ndim != 1 or lats.size == 0:
        raise ShapeError("lats must be a non-empty 1-D array")
    if np.any(np.abs(lats) > 90.0):
        raise DomainError("latitude outside [-90, 90]")
    c = np.cos(np.deg2rad(lats))
    # cos(+-90) is ~6e-17, not 0; clamp so poles carry no weight
    c = np.where(np.abs(lats) == 90.0, 0.0, np.maximum(c, 0.0))
    m = c.mean()
    if m <= 0:
        raise DomainError("all latitudes at the poles; weights undefined")
    return c / m


def validate_mask(mask) -> np.ndarray:
    m = np.asarray(mask)
    if not np.all((m == 0) | (m == 1)):
        raise DomainError("mask values must be exactly 0 or 1")
    return m.astype(np.float64)


def patchify(data: np.ndarray, P: int) -> np.ndarray:
    """Split ``(..., H, W)`` into ``(..., (H/P)*(W/P), P*P)`` row-major patches."""
    data = np.asarray(data)
    H, W = data.shape[-2:]
    if P < 1 or H % P or W % P:
        raise ShapeError(f"patch size {P} does not divide grid {H}x{W}")
    lead = data.shape[:-2]
    x = data.reshape(*lead, H // P, P, W // P, P)
    x = np.moveaxis(x, -3, -2)  # (..., H/P, W/P, P, P)
    return x.reshape(*lead, (H // P) * (W // P), P * P)


def unpatchify(patches: np.ndarray, P: int, H: int, W: int) -> np.ndarray:
    patches = np.asarray(patches)
    if H % P or W % P:
        raise ShapeError(f"patch size {P} does not divide grid {H}x{W}")
    n = (H // P) * (W // P)
    if patches.shape[-2:] != (n, P * P):
        raise ShapeError(f"expected (..., {n}, {P * P}) patches, got {patches.shape}")
    lead = patches.shape[:-2]
    x = patches.reshape(*lead, H // P, W // P, P, P)
    x = np.moveaxis(x, -2, -3)
    return x.reshape(*lead, H, W)


# -- binary tensor files ---------------------------------------------------

def encode_tensor(data) -> bytes:
    arr = np.asarray(data)
    if arr.dtype.kind not in "fiu":
        raise TypeError(f"unsupported dtype {arr.dtype}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("tensor contains non-finite values")
    arr = np.asarray(arr, dtype="<f4", order="C")
    payload = arr.tobytes()
    head = MAGIC + struct.pack("<BB", DTYPE_F32LE, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 10 or buf[:8] != MAGIC:
        raise TensorFileError("bad magic; not an LHTENSOR file")
    tag, rank = struct.unpack_from("<BB", buf, 8)
    if tag not in _DTYPES:
        raise TensorFileError(f"unknown dtype tag {tag}")
    off = 10
    if len(buf) < off + 8 * rank:
        raise TensorFileError("truncated header")
    dims = struct.unpack_from(f"<{rank}Q", buf, off)
    off += 8 * rank
    dtype = _DTYPES[tag]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) != off + nbytes + 4:
        raise TensorFileError(f"size mismatch: expected {off + nbytes + 4} bytes, got {len(buf)}")
    payload = buf[off:off + nbytes]
    (crc,) = struct.unpack_from("<I", buf, off + nbytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("payload CRC32 mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


def _atomic_write(path: Path, blob: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_tensor(path, data) -> None:
    path = Path(path)
    _atomic_write(path, encode_tensor(data))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_tensor(fh.read())


def write_json(path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


# -- named tensor collections (checkpoints) --------------------------------

def save_checkpoint(directory, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None):
    """One tensor file per array plus ``manifest.json`` (names, shapes, meta)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, arr in tensors.items():
        fname = name.replace("/", "__") + ".lht"
        write_tensor(d / fname, arr)
        entries[name] = {"file": fname, "shape": list(np.shape(arr))}
    write_json(d / "manifest.json", {"tensors": entries, "meta": dict(meta or {})})


def load_checkpoint(directory) -> tuple[dict[str, np.ndarray], dict]:
    d = Path(directory)
    man = read_json(d / "manifest.json")
    out = {}
    for name, ent in man["tensors"].items():
        arr = read_tensor(d / ent["file"])
        if list(arr.shape) != ent["shape"]:
            raise TensorFileError(f"{name}: shape {arr.shape} != manifest {ent['shape']}")
        out[name] = arr.astype(np.float64)
    return out, man["meta"]


def hash_directory(directory) -> str:
    """SHA-256 over every file (sorted by name) in a directory tree."""
    import hashlib

    h = hashlib.sha256()
    root = Path(directory)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class Sidecar:
    """JSON description of a gridded dataset directory."""

    variables: dict = field(default_factory=dict)  # var_id -> units
    lats: list = field(default_factory=list)
    lons: list = field(default_factory=list)
    time_step_seconds: int = STEP_SECONDS
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"variables": self.variables, "lats": list(map(float, self.lats)),
                "lons": list(map(float, self.lons)),
                "time_step_seconds": self.time_step_seconds, **self.extra}

    @classmethod
    def from_json(cls, obj: dict) -> "Sidecar":
        obj = dict(obj)
        return cls(obj.pop("variables"), obj.pop("lats"), obj.pop("lons"),
                   obj.pop("time_step_seconds", STEP_SECONDS), obj)
