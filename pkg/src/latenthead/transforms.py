"""Preprocessing: precipitation log transform, accumulation, compositing, regridding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_core import DomainError, ShapeError

EPSILON = 1e-5


@dataclass(frozen=True)
class TransformConfig:
    epsilon: float = EPSILON
    accumulation_window: int = 2
    layer_thicknesses: tuple = field(default=(0.07, 0.21, 0.72))

    def __post_init__(self):
        if self.epsilon <= 0:
            raise DomainError("epsilon must be positive")
        if self.accumulation_window < 1:
            raise DomainError("accumulation window must be >= 1")
        if any(t <= 0 for t in self.layer_thicknesses):
            raise DomainError("layer thicknesses must be positive")


def log_precip(x, epsilon: float = EPSILON) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise DomainError("precipitation must be nonnegative")
    return np.log1p(x / epsilon)


def inv_log_precip(y, epsilon: float = EPSILON) -> np.ndarray:
    return epsilon * np.expm1(np.asarray(y, dtype=np.float64))


def _same_shape(fields):
    fields = [np.asarray(f, dtype=np.float64) for f in fields]
    if not fields:
        raise ShapeError("need at least one field")
    shape = fields[0].shape
    for f in fields[1:]:
        if f.shape != shape:
            raise ShapeError(f"shape mismatch: {f.shape} vs {shape}")
    return fields


def accumulate(samples) -> np.ndarray:
    """Sum consecutive sub-interval fields into one accumulated field."""
    return np.sum(np.stack(_same_shape(samples)), axis=0)


def accumulate_series(series, window: int) -> np.ndarray:
    """Non-overlapping accumulation of a ``(T, ...)`` series; a trailing remainder is dropped."""
    series = np.asarray(series, dtype=np.float64)
    n = series.shape[0] // window
    return series[: n * window].reshape(n, window, *series.shape[1:]).sum(axis=1)


def composite_sum(fields) -> np.ndarray:
    return accumulate(fields)


def composite_weighted(fields, thicknesses) -> np.ndarray:
    fields = _same_shape(fields)
    w = np.asarray(thicknesses, dtype=np.float64)
    if w.shape != (len(fields),):
        raise ShapeError(f"{len(fields)} layers but {w.size} thicknesses")
    if np.any(w <= 0):
        raise DomainError("thicknesses must be positive")
    return np.tensordot(w, np.stack(fields), axes=1)


def bilinear_regrid(data, lats, lons, new_lats, new_lons) -> np.ndarray:
    """Bilinear interpolation on a regular lat-lon grid.

    Longitude is periodic. Latitude targets must lie inside the span of the
    source latitudes (no extrapolation toward the poles).
    """
    data = np.asarray(data, dtype=np.float64)
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    new_lats = np.asarray(new_lats, dtype=np.float64)
    new_lons = np.asarray(new_lons, dtype=np.float64)
    if data.shape[-2:] != (lats.size, lons.size):
        raise ShapeError("data does not match coordinate arrays")

    if lats.size > 1 and lats[0] > lats[-1]:
        lats = lats[::-1]
        data = data[..., ::-1, :]
    lo, hi = lats[0], lats[-1]
    tol = 1e-9 * max(1.0, abs(hi - lo))
    if np.any(new_lats < lo - tol) or np.any(new_lats > hi + tol):
        raise DomainError("target latitude outside source range")

    if lats.size == 1:
        i0 = np.zeros(new_lats.size, int)
        i1 = i0
        fy = np.zeros(new_lats.size)
    else:
        y = np.clip(new_lats, lo, hi)
        i0 = np.clip(np.searchsorted(lats, y, side="right") - 1, 0, lats.size - 2)
        i1 = i0 + 1
        fy = (y - lats[i0]) / (lats[i1] - lats[i0])

    W = lons.size
    dlon = 360.0 / W
    x = np.mod(new_lons - lons[0], 360.0) / dlon
    j0 = np.floor(x).astype(int)
    fx = x - j0
    # snap round-off so grid-aligned targets reproduce source values exactly
    snap = np.isclose(fx, 1.0, atol=1e-12)
    j0 = np.where(snap, j0 + 1, j0)
    fx = np.where(snap | np.isclose(fx, 0.0, atol=1e-12), 0.0, fx)
    j0 %= W
    j1 = (j0 + 1) % W

    fy = fy[:, None]
    fx = fx[None, :]
    a = data[..., i0[:, None], j0[None, :]]
    b = data[..., i0[:, None], j1[None, :]]
    c = data[..., i1[:, None], j0[None, :]]
    d = data[..., i1[:, None], j1[None, :]]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)
