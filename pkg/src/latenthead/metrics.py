"""Verification metrics, energy spectra and the patch-artefact diagnostic.

Point metrics take optional per-row latitude weights and a pixel mask.  A
masked metric equals the same metric on the extracted included pixels.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .tensor_core import DomainError, ShapeError
from .transforms import log_precip

DRY_THRESHOLD = 0.25


class UndefinedMetricError(DomainError):
    pass


@dataclass(frozen=True)
class MetricConfig:
    fss_window: int = 11
    fss_thresholds: tuple = (1.0, 5.0)
    seeps_dry_threshold: float = DRY_THRESHOLD
    relative_normalizer: str = "mean_abs_ref"
    lat_weighted: bool = True

    def __post_init__(self):
        if self.fss_window < 1 or self.fss_window % 2 == 0:
            raise DomainError("fss window must be odd and >= 1")
        if any(t <= 0 for t in self.fss_thresholds):
            raise DomainError("fss thresholds must be positive")
        if self.relative_normalizer not in ("mean_abs_ref", "ref_std"):
            raise DomainError(f"unknown normalizer {self.relative_normalizer!r}")


def _pixel_weights(shape, weights=None, mask=None):
    if weights is None:
        w = np.ones(shape)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64)[:, None], shape)
    if mask is not None:
        w = w * np.broadcast_to(np.asarray(mask, dtype=np.float64), shape)
    if w.sum() <= 0:
        raise DomainError("no pixel left after masking")
    return w


def _pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {ref.shape}")
    return pred, ref


def _wmean(x, w):
    return float((w * x).sum() / w.sum())


def mae(pred, ref, weights=None, mask=None) -> float:
    pred, ref = _pair(pred, ref)
    return _wmean(np.abs(pred - ref), _pixel_weights(pred.shape, weights, mask))


def rmse(pred, ref, weights=None, mask=None) -> float:
    pred, ref = _pair(pred, ref)
    return math.sqrt(_wmean((pred - ref) ** 2, _pixel_weights(pred.shape, weights, mask)))


def bias(pred, ref, weights=None, mask=None) -> float:
    pred, ref = _pair(pred, ref)
    return _wmean(pred - ref, _pixel_weights(pred.shape, weights, mask))


def pcc(pred, ref, mask=None) -> float:
    pred, ref = _pair(pred, ref)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask) > 0, pred.shape)
        if not m.any():
            raise DomainError("no pixel left after masking")
        pred, ref = pred[m], ref[m]
    a = pred - pred.mean()
    b = ref - ref.mean()
    den = math.sqrt(float((a * a).sum()) * float((b * b).sum()))
    if den == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant field")
    return float(np.clip((a * b).sum() / den, -1.0, 1.0))


# -- distributions ----------------------------------------------------------

def w1(pred_samples, ref_samples) -> float:
    """Wasserstein-1 distance between two empirical distributions."""
    p = np.sort(np.asarray(pred_samples, dtype=np.float64).ravel())
    r = np.sort(np.asarray(ref_samples, dtype=np.float64).ravel())
    if p.size == 0 or r.size == 0:
        raise DomainError("empty sample")
    if p.size == r.size:
        # |p_i - r_i| summed with the sign folded in, so fsum sees exact terms
        s = np.where(p >= r, 1.0, -1.0)
        return math.fsum(np.concatenate([s * p, -s * r])) / p.size
    x = np.concatenate([p, r])
    x.sort(kind="mergesort")
    fp = np.searchsorted(p, x[:-1], side="right") / p.size
    fr = np.searchsorted(r, x[:-1], side="right") / r.size
    return math.fsum(np.abs(fp - fr) * np.diff(x))


def w1_log(pred_samples, ref_samples, epsilon: float | None = None) -> float:
    kw = {} if epsilon is None else {"epsilon": epsilon}
    return w1(log_precip(pred_samples, **kw), log_precip(ref_samples, **kw))


# -- fraction skill score ---------------------------------------------------

def window_counts(field, alpha: float, window: int):
    """Pixels >= alpha in a window centred on every pixel, and each row's window size.

    Windows wrap in longitude and are cut at the first and last row. Returns
    ``(counts, sizes)`` with ``counts`` of shape (H, W) and ``sizes`` (H,).
    """
    f = np.asarray(field)
    if f.ndim != 2:
        raise ShapeError("fss expects a single (H, W) field")
    H, W = f.shape
    if window < 1 or window % 2 == 0:
        raise DomainError("window must be odd and >= 1")
    if window > min(H, W):
        raise DomainError(f"window {window} larger than the grid {H}x{W}")
    h = window // 2
    b = (f >= alpha).astype(np.int64)
    wrapped = np.concatenate([b[:, W - h:], b, b[:, :h]], axis=1)
    c = np.concatenate([np.zeros((H, 1), np.int64), np.cumsum(wrapped, axis=1)], axis=1)
    row = c[:, window:] - c[:, :W]
    c2 = np.concatenate([np.zeros((1, W), np.int64), np.cumsum(row, axis=0)], axis=0)
    lo = np.clip(np.arange(H) - h, 0, H)
    hi = np.clip(np.arange(H) + h + 1, 0, H)
    return c2[hi] - c2[lo], (hi - lo) * window


def window_fractions(field, alpha: float, window: int) -> np.ndarray:
    """Fraction of pixels >= alpha in the window around every pixel."""
    counts, sizes = window_counts(field, alpha, window)
    return counts / sizes[:, None]


def fss_from_fractions(f_pred, f_ref):
    """Returns ``(score, degenerate)``; both-empty fields score 1 and are flagged."""
    fp = np.asarray(f_pred, dtype=np.float64).ravel()
    fr = np.asarray(f_ref, dtype=np.float64).ravel()
    num = math.fsum((fp - fr) ** 2)
    den = math.fsum(fp ** 2) + math.fsum(fr ** 2)
    if den == 0.0:
        return 1.0, True
    return 1.0 - num / den, False


def fss(pred, ref, alpha: float, window: int = 11, return_flag: bool = False):
    """Fraction skill score, correctly rounded.

    Every window in a row has the same size n, so per row the sums of squared
    fraction gaps are integers over n^2 and the score is an exact rational.
    """
    pred, ref = _pair(pred, ref)
    cp, n = window_counts(pred, alpha, window)
    cr, _ = window_counts(ref, alpha, window)
    gap = ((cp - cr) ** 2).sum(axis=1)
    tot = (cp * cp + cr * cr).sum(axis=1)
    num = sum(Fraction(int(g), int(k) ** 2) for g, k in zip(gap, n))
    den = sum(Fraction(int(t), int(k) ** 2) for t, k in zip(tot, n))
    if den == 0:
        score, degenerate = 1.0, True
    else:
        score, degenerate = float(1 - num / den), False
    return (score, degenerate) if return_flag else score


# -- SEEPS --------------------------------------------------------------------

P1_RANGE = (0.03, 0.97)


def seeps_matrix(p1) -> np.ndarray:
    """Scoring matrices indexed ``[..., forecast, observed]`` (0 dry, 1 light, 2 heavy).

    Light and heavy rain split the wet events 2:1.  Any constant forecast has
    expected score 1 under the climatology.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    q = 1.0 / (1.0 - p1)
    z = np.zeros_like(p1)
    m = np.stack([
        np.stack([z, q, 4 * q], -1),
        np.stack([1 / p1, z, 3 * q], -1),
        np.stack([1 / p1 + 3 / (2 + p1), 3 / (2 + p1), z], -1),
    ], -2)
    return 0.5 * m


@dataclass
class SeepsClimatology:
    p1: np.ndarray                  # (H, W) probability of a dry step
    wet_threshold: np.ndarray       # (H, W) light/heavy boundary
    dry_threshold: float = DRY_THRESHOLD

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64)
        self.wet_threshold = np.asarray(self.wet_threshold, dtype=np.float64)
        if self.p1.shape != self.wet_threshold.shape:
            raise ShapeError("p1 and wet threshold grids differ")
        if np.any((self.p1 <= 0) | (self.p1 >= 1)):
            raise DomainError("p1 must lie strictly inside (0, 1)")
        if np.any(self.wet_threshold <= self.dry_threshold):
            raise DomainError("wet threshold must exceed the dry threshold")

    @property
    def matrix(self) -> np.ndarray:
        return seeps_matrix(self.p1)

    @property
    def valid(self) -> np.ndarray:
        return (self.p1 > P1_RANGE[0]) & (self.p1 < P1_RANGE[1])

    def categorize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.where(x < self.dry_threshold, 0, np.where(x < self.wet_threshold, 1, 2))

    @classmethod
    def from_series(cls, series, dry_threshold: float = DRY_THRESHOLD, clip: float = 1e-3):
        """Estimate from a ``(T, H, W)`` training series.

        The wet threshold is the 2/3 quantile of each pixel's wet values.  p1
        is clipped into (clip, 1 - clip); such pixels fall outside the valid
        range and are excluded from scoring anyway.
        """
        s = np.asarray(series, dtype=np.float64)
        wet = s >= dry_threshold
        p1 = np.clip(1.0 - wet.mean(axis=0), clip, 1 - clip)
        masked = np.where(wet, s, np.nan)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)    # all-dry pixels
            thr = np.nanquantile(masked, 2.0 / 3.0, axis=0)
        thr = np.where(np.isfinite(thr), thr, dry_threshold)
        thr = np.maximum(thr, np.nextafter(dry_threshold, np.inf))
        return cls(p1, thr, dry_threshold)


def seeps(pred, ref, clim: SeepsClimatology, weights=None) -> float:
    pred, ref = _pair(pred, ref)
    if pred.shape[-2:] != clim.p1.shape:
        raise ShapeError("climatology does not cover the grid")
    fc = clim.categorize(pred)
    ob = clim.categorize(ref)
    M = clim.matrix
    ii, jj = np.indices(clim.p1.shape)
    score = M[ii, jj, fc, ob]
    return _wmean(score, _pixel_weights(pred.shape, weights, clim.valid))


# -- derived scores -----------------------------------------------------------

def relative(metric_value: float, ref, normalizer: str = "mean_abs_ref", weights=None, mask=None) -> float:
    ref = np.asarray(ref, dtype=np.float64)
    w = _pixel_weights(ref.shape, weights, mask)
    if normalizer == "mean_abs_ref":
        n = _wmean(np.abs(ref), w)
    elif normalizer == "ref_std":
        m = _wmean(ref, w)
        n = math.sqrt(_wmean((ref - m) ** 2, w))
    else:
        raise DomainError(f"unknown normalizer {normalizer!r}")
    if n == 0:
        raise UndefinedMetricError("normalizer is zero")
    return metric_value / n


def energy_spectrum(fields, weights=None) -> np.ndarray:
    """Mean zonal power spectrum of ``(..., H, W)`` fields, length ``W//2 + 1``."""
    f = np.asarray(fields, dtype=np.float64)
    W = f.shape[-1]
    if W < 2:
        raise DomainError("need at least two longitudes")
    if weights is not None:
        f = f * np.asarray(weights, dtype=np.float64)[:, None]
    spec = np.abs(np.fft.rfft(f, axis=-1) / W) ** 2
    return spec.reshape(-1, spec.shape[-1]).mean(axis=0)


def _jump_ratio(x, P, eps):
    x = np.asarray(x, dtype=np.float64)
    H, W = x.shape[-2:]
    dx = np.abs(np.diff(x, axis=-1))            # between columns j, j+1
    dy = np.abs(np.diff(x, axis=-2))
    bx = (np.arange(1, W) % P) == 0
    by = (np.arange(1, H) % P) == 0
    boundary = np.concatenate([dx[..., bx].ravel(), dy[..., by, :].ravel()])
    interior = np.concatenate([dx[..., ~bx].ravel(), dy[..., ~by, :].ravel()])
    return (boundary.mean() + eps) / (interior.mean() + eps)


def patchiness(pred, ref, P: int, eps: float = 1e-12) -> float:
    """Boundary-to-interior jump ratio of ``pred`` relative to that of ``ref``."""
    pred, ref = _pair(pred, ref)
    if P < 2 or pred.shape[-1] <= P or pred.shape[-2] <= P:
        raise DomainError("need P >= 2 and a grid larger than one patch")
    return float(_jump_ratio(pred, P, eps) / _jump_ratio(ref, P, eps))


# -- reports ------------------------------------------------------------------

@dataclass
class MetricReport:
    values: dict
    config: dict
    n_samples: int
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [k for k, v in self.values.items() if not math.isfinite(v)]
        if bad:
            raise DomainError(f"non-finite metric values: {bad}")

    def to_dict(self) -> dict:
        return asdict(self)


METRIC_NAMES = ("mae", "rmse", "bias", "relative_mae", "pcc", "w1", "w1_log", "fss", "seeps",
                "patchiness")


def evaluate_fields(pred, ref, *, var_id: str = "", config: MetricConfig = MetricConfig(),
                    weights=None, mask=None, climatology: SeepsClimatology | None = None,
                    P: int | None = None, metrics=("all",)) -> MetricReport:
    """Per-sample metrics over ``(n, H, W)`` arrays, averaged over samples."""
    pred, ref = _pair(pred, ref)
    if pred.ndim == 2:
        pred, ref = pred[None], ref[None]
    want = set(metrics)
    unknown = want - set(METRIC_NAMES) - {"all"}
    if unknown:
        raise ValueError(f"unknown metrics: {', '.join(sorted(unknown))}")
    every = "all" in want

    def on(name):
        return every or name in want

    w = weights if config.lat_weighted else None
    per = {}
    flags = {}

    def add(name, value):
        per.setdefault(name, []).append(value)

    precip = var_id.startswith("precip") or climatology is not None
    for p, r in zip(pred, ref):
        if on("mae"):
            add("mae", mae(p, r, w, mask))
        if on("rmse"):
            add("rmse", rmse(p, r, w, mask))
        if on("bias"):
            add("bias", bias(p, r, w, mask))
        if on("relative_mae"):
            add("relative_mae", relative(mae(p, r, w, mask), r, config.relative_normalizer, w, mask))
        if on("pcc"):
            try:
                add("pcc", pcc(p, r, mask))
            except UndefinedMetricError:
                flags["pcc_undefined"] = flags.get("pcc_undefined", 0) + 1
        sel = (np.broadcast_to(np.asarray(mask) > 0, p.shape) if mask is not None
               else np.ones(p.shape, bool))
        if on("w1"):
            add("w1", w1(p[sel], r[sel]))
        if precip:
            if on("w1_log"):
                add("w1_log", w1_log(np.maximum(p[sel], 0), np.maximum(r[sel], 0)))
            if on("fss"):
                for a in config.fss_thresholds:
                    s, deg = fss(p, r, a, config.fss_window, return_flag=True)
                    add(f"fss_{a:g}", s)
                    if deg:
                        flags[f"fss_{a:g}_degenerate"] = flags.get(f"fss_{a:g}_degenerate", 0) + 1
            if on("seeps") and climatology is not None:
                add("seeps", seeps(p, r, climatology, w))
        if on("patchiness") and P:
            add("patchiness", patchiness(p, r, P))
    values = {k: float(np.mean(v)) for k, v in per.items()}
    return MetricReport(values, asdict(config), int(pred.shape[0]), flags)
