"""Autoregressive rollouts with decoder heads attached, and basin aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import backbone as bb
from .heads import MlpHead, head_forward
from .metrics import MetricConfig, evaluate_fields, rmse
from .tensor_core import STEP_SECONDS, DomainError, ShapeError, lat_weights, regular_grid, validate_mask

STEPS_PER_DAY = 86400 // STEP_SECONDS


@dataclass
class RolloutResult:
    fields: dict                    # var -> (n, H, W), lead 1..n
    lead_hours: np.ndarray
    n_requested: int
    truncated_at: int | None = None  # first step with a non-finite value
    reports: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return len(self.lead_hours)

    def prefix(self, k: int) -> "RolloutResult":
        if not 0 < k <= self.n_steps:
            raise ValueError(f"prefix length {k} outside 1..{self.n_steps}")
        return RolloutResult({v: a[:k] for v, a in self.fields.items()}, self.lead_hours[:k], k,
                             None, self.reports[:k])


def rollout(init_surf, init_atm, model: bb.Backbone, heads: dict, n_steps: int,
            refs: dict | None = None, metric_config: MetricConfig | None = None) -> RolloutResult:
    """Feed forecasts back as inputs for ``n_steps`` steps, decoding every head each step.

    ``init_surf`` is ``(T, n_surf, H, W)`` and ``init_atm`` ``(T, V_a, L, H, W)``
    in physical units, oldest first.  ``refs`` optionally maps variable to a
    ``(n_steps, H, W)`` reference used for a per-step report.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    cfg = model.cfg
    surf = np.asarray(init_surf, dtype=np.float64)
    atm = np.asarray(init_atm, dtype=np.float64)
    if surf.shape[0] != cfg.T or atm.shape[0] != cfg.T:
        raise ShapeError(f"need {cfg.T} initial states")
    names = list(model.surf_vars) + list(heads)
    out = {v: [] for v in names}
    w = lat_weights(regular_grid(cfg.H, cfg.W)[0])
    reports = []
    truncated = None
    for k in range(n_steps):
        batch = model.make_batch(surf[None], atm[None])
        latent = bb.process(bb.encode(batch, model.params, cfg), model.params, cfg)
        dec = bb.decode_native(latent, model.params, cfg)
        s_next = model.denormalize_surf(dec["surf"])[0]
        a_next = model.denormalize_atm(dec["atm"])[0]
        step = {v: s_next[i] for i, v in enumerate(model.surf_vars)}
        for v, h in heads.items():
            step[v] = h.decode_output(head_forward(latent[:, :, 0], h))[0]
        if not all(np.all(np.isfinite(a)) for a in step.values()) or not np.all(np.isfinite(a_next)):
            truncated = k
            break
        for v in names:
            out[v].append(step[v])
        if refs:
            reports.append({v: evaluate_fields(step[v], refs[v][k], var_id=v,
                                               config=metric_config or MetricConfig(), weights=w,
                                               metrics=("mae", "rmse", "bias", "pcc")).values
                            for v in refs if v in step})
        surf = np.concatenate([surf[1:], s_next[None]])
        atm = np.concatenate([atm[1:], a_next[None]])
    n = len(out[names[0]])
    fields = {v: (np.stack(a) if a else np.empty((0, cfg.H, cfg.W))) for v, a in out.items()}
    lead = (np.arange(1, n + 1) * STEP_SECONDS / 3600.0)
    return RolloutResult(fields, lead, n_steps, truncated, reports)


def spatial_std(fields, mask=None) -> np.ndarray:
    """Per-step spatial standard deviation of ``(n, H, W)`` fields."""
    f = np.asarray(fields, dtype=np.float64)
    if mask is None:
        return f.reshape(f.shape[0], -1).std(axis=1)
    m = np.asarray(mask) > 0
    return f[:, m].std(axis=1)


def std_ratio(rollout_fields, ref_fields, mask=None) -> np.ndarray:
    """Per-step spatial std over the mean spatial std of the reference series."""
    return spatial_std(rollout_fields, mask) / spatial_std(ref_fields, mask).mean()


# -- basins -------------------------------------------------------------------

@dataclass
class BasinMask:
    basin_id: str
    mask: np.ndarray
    pixel_areas: np.ndarray

    def __post_init__(self):
        self.mask = validate_mask(self.mask) > 0
        self.pixel_areas = np.asarray(self.pixel_areas, dtype=np.float64)
        if self.pixel_areas.shape != self.mask.shape:
            raise ShapeError("pixel areas do not match the mask")
        if not self.mask.any():
            raise DomainError(f"basin {self.basin_id!r} is empty")

    @classmethod
    def on_grid(cls, basin_id, mask, lats):
        m = np.asarray(mask)
        areas = np.broadcast_to(np.cos(np.deg2rad(np.asarray(lats, dtype=np.float64)))[:, None], m.shape)
        return cls(basin_id, m, areas.copy())


def basin_series(fields, basin: BasinMask) -> np.ndarray:
    """Area-weighted sum over the basin for every step of ``(n, H, W)`` fields."""
    f = np.asarray(fields, dtype=np.float64)
    if f.shape[-2:] != basin.mask.shape:
        raise ShapeError("fields do not match the basin grid")
    w = basin.pixel_areas * basin.mask
    return np.tensordot(f, w, axes=([-2, -1], [0, 1]))


def daily_average(series, steps_per_day: int = STEPS_PER_DAY):
    """Block means over whole days. Returns ``(daily, remainder_dropped)``."""
    s = np.asarray(series, dtype=np.float64)
    n = s.shape[0] // steps_per_day
    rem = s.shape[0] - n * steps_per_day
    return s[: n * steps_per_day].reshape(n, steps_per_day, *s.shape[1:]).mean(axis=1), rem > 0


def daily_sum(series, steps_per_day: int = STEPS_PER_DAY):
    d, flag = daily_average(series, steps_per_day)
    return d * steps_per_day, flag


def basin_relative_rmse(pred_series, ref_series, steps_per_day: int = STEPS_PER_DAY) -> float:
    p, _ = daily_sum(pred_series, steps_per_day)
    r, _ = daily_sum(ref_series, steps_per_day)
    if r.size == 0:
        raise DomainError("series shorter than one day")
    norm = float(np.mean(np.abs(r)))
    if norm == 0:
        raise DomainError("reference series is identically zero")
    return rmse(p, r) / norm


def synthetic_basins(land_mask, lats, n_basins: int = 4, min_pixels: int = 8) -> list[BasinMask]:
    """The largest connected land regions (longitude-periodic) as basins."""
    land = np.asarray(land_mask) > 0
    lab, n = ndimage.label(land)
    # merge labels that touch across the date line
    W = land.shape[1]
    for i in range(land.shape[0]):
        a, b = lab[i, 0], lab[i, W - 1]
        if a and b and a != b:
            lab[lab == b] = a
    ids, sizes = np.unique(lab[lab > 0], return_counts=True)
    order = np.lexsort((ids, -sizes))
    basins = []
    for j in order[:n_basins]:
        if sizes[j] < min_pixels:
            break
        basins.append(BasinMask.on_grid(f"basin{len(basins)}", (lab == ids[j]).astype(np.uint8), lats))
    return basins


def basin_table(pred: dict, ref: dict, basins, steps_per_day: int = STEPS_PER_DAY) -> list[dict]:
    """Relative RMSE of daily basin sums, one row per basin and variable."""
    rows = []
    for b in basins:
        for v in pred:
            ps = basin_series(pred[v], b)
            rs = basin_series(ref[v], b)
            try:
                val = basin_relative_rmse(ps, rs, steps_per_day)
            except DomainError:
                val = math.nan
            rows.append({"basin": b.basin_id, "var": v, "relative_rmse": val,
                         "pixels": int(b.mask.sum())})
    return rows


__all__ = ["RolloutResult", "rollout", "spatial_std", "std_ratio", "BasinMask", "basin_series",
           "daily_average", "daily_sum", "basin_relative_rmse", "synthetic_basins", "basin_table"]
