"""Deterministic synthetic planet with controllable coupling between variables.

Base variables (winds ``u``/``v``, humidity-like ``q``, temperature-like
``tmp``) play the role of the backbone's pretraining variables.  Derived
targets sit on three coupling tiers:

* ``evap_like``   exact function of the current base fields
* ``precip_like`` nonlinear function of base fields and their gradients
* ``runoff_like`` / ``storage_like``  driven by hidden states (soil store,
  persistent noise) that never appear as inputs

Transport is flux-form upwind on a C-grid built from a corner streamfunction,
so the flow is discretely non-divergent, tracer mass is conserved to round-off
and sub-stepping keeps every update a convex combination (positivity and a
discrete maximum principle hold for any wind speed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from pathlib import Path

from .tensor_core import (GridField, ShapeError, DomainError, Sidecar, TensorFileError, lat_weights,
                          read_json, read_tensor, regular_grid, write_json, write_tensor)

BASE_VARS = ("u", "v", "q", "tmp")
TARGET_VARS = ("evap_like", "precip_like", "runoff_like", "storage_like")
LAND_ONLY = ("runoff_like", "storage_like")
ATMOS_VARS = ("tmp_atm", "q_atm")
STATIC_VARS = ("land_mask", "sin_lat")

UNITS = {
    "u": "rad/step", "v": "rad/step", "q": "1", "tmp": "1",
    "tmp_atm": "1", "q_atm": "1",
    "evap_like": "mm/6h", "precip_like": "mm/6h", "runoff_like": "mm/6h",
    "storage_like": "1", "land_mask": "1", "sin_lat": "1",
}


@dataclass(frozen=True)
class WorldConfig:
    H: int = 32
    W: int = 64
    seed: int = 0
    dt: float = 1.0
    kappa: float = 2e-5
    rotation_speed: float = 0.05
    forcing_modes: int = 6
    mode_amplitude: float = 0.03
    coupling: dict = field(default_factory=lambda: {"storage_like": 0.1})
    n_steps: int = 2400
    n_train: int = 2000
    n_val: int = 200
    spinup: int = 200
    relax_rate: float = 0.05
    land_fraction: float = 0.3
    evap_coeff: float = 10.0
    precip_scale: float = 2000.0
    precip_gamma: float = 1.5
    soil_decay: float = 0.02
    soil_gain: float = 0.05
    soil_loss: float = 0.05
    soil_noise: float = 0.02
    soil_capacity: float = 1.0
    infiltration: float = 4.0
    noise_persistence: float = 0.95
    noise_modes: int = 12
    atm_levels: int = 4
    atm_anomaly: float = 0.1
    atm_persistence: float = 0.98

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ShapeError("zero-size grid")
        if self.kappa < 0:
            raise DomainError("diffusion must be nonnegative")
        for k, rho in self.coupling.items():
            if not 0.0 <= rho <= 1.0:
                raise DomainError(f"coupling for {k} outside [0, 1]")
        if not 0.0 <= self.relax_rate <= 1.0:
            raise DomainError("relax_rate must lie in [0, 1]")
        if not 0.0 <= self.noise_persistence < 1.0:
            raise DomainError("noise_persistence must lie in [0, 1)")
        if not 0.0 <= self.atm_persistence < 1.0:
            raise DomainError("atm_persistence must lie in [0, 1)")
        if self.atm_levels < 1 or self.atm_anomaly < 0:
            raise DomainError("need atm_levels >= 1 and a nonnegative atm_anomaly")
        if self.n_train + self.n_val >= self.n_steps:
            raise DomainError("n_train + n_val must leave room for a test split")

    @property
    def n_test(self) -> int:
        return self.n_steps - self.n_train - self.n_val

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown world config keys: {sorted(bad)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.__dataclass_fields__}


@dataclass(frozen=True)
class Geometry:
    lats: np.ndarray        # degrees, north to south
    lons: np.ndarray
    phi: np.ndarray         # cell centres, radians
    phi_edge: np.ndarray    # H+1 row edges, radians (north to south)
    lam: np.ndarray
    lam_corner: np.ndarray  # W corners, west edge of each column
    dphi: float
    dlam: float
    area: np.ndarray        # (H, 1), proportional to cos(phi)
    cos_edge: np.ndarray    # (H+1, 1)


def geometry(H: int, W: int) -> Geometry:
    lats, lons = regular_grid(H, W)
    dphi = math.pi / H
    dlam = 2 * math.pi / W
    phi = np.deg2rad(lats)
    phi_edge = math.pi / 2 - dphi * np.arange(H + 1)
    lam = np.deg2rad(lons)
    cos_edge = np.cos(phi_edge)
    cos_edge[0] = cos_edge[-1] = 0.0
    return Geometry(lats, lons, phi, phi_edge, lam, lam - dlam / 2, dphi, dlam,
                    (np.cos(phi) * dphi * dlam)[:, None], cos_edge[:, None])


@dataclass(frozen=True)
class Modes:
    """Fixed random parameters drawn once from the seed."""

    amp: np.ndarray
    m: np.ndarray
    n: np.ndarray
    theta: np.ndarray
    beta: np.ndarray
    omega: np.ndarray
    nu: np.ndarray
    land: np.ndarray
    noise_basis: np.ndarray  # (K, H, W)
    tmp_pattern: np.ndarray
    q_pattern: np.ndarray


@dataclass(frozen=True)
class WorldState:
    u: np.ndarray
    v: np.ndarray
    q: np.ndarray
    tmp: np.ndarray
    s: np.ndarray
    eta: np.ndarray
    eta_coef: np.ndarray
    step: int
    modes: Modes
    rng_state: dict
    atm_coef: np.ndarray | None = None   # (2, levels, K) AR(1) anomaly coefficients
    atm_anomaly: float = 0.0

    def base_fields(self) -> dict[str, np.ndarray]:
        return {"u": self.u, "v": self.v, "q": self.q, "tmp": self.tmp}


def _smooth_field(rng, geo: Geometry, n_terms: int, max_m: int = 4, max_n: int = 4):
    phi = geo.phi[:, None]
    lam = geo.lam[None, :]
    out = np.zeros((phi.size, lam.size))
    for _ in range(n_terms):
        m = rng.integers(0, max_m + 1)
        n = rng.integers(1, max_n + 1)
        out += rng.normal() * np.cos(m * lam + rng.uniform(0, 2 * np.pi)) \
            * np.cos(n * phi + rng.uniform(0, 2 * np.pi))
    return out


def _standardize(x):
    sd = x.std()
    return (x - x.mean()) / (sd if sd > 0 else 1.0)


def _draw_modes(config: WorldConfig, geo: Geometry, rng) -> Modes:
    k = config.forcing_modes
    amp = config.mode_amplitude * rng.uniform(0.5, 1.5, k)
    m = rng.integers(1, 5, k)
    n = rng.integers(1, 4, k)
    theta = rng.uniform(0, 2 * np.pi, k)
    beta = rng.uniform(0, 2 * np.pi, k)
    omega = rng.uniform(-0.15, 0.15, k)
    nu = rng.uniform(0.02, 0.08, k)

    land_noise = _standardize(_smooth_field(rng, geo, 10, 5, 5))
    thresh = np.quantile(land_noise, 1.0 - config.land_fraction)
    land = (land_noise > thresh).astype(np.float64)

    K = config.noise_modes
    basis = np.stack([_standardize(_smooth_field(rng, geo, 3, 5, 5)) for _ in range(K)])
    basis /= math.sqrt(K)
    tmp_pattern = _standardize(_smooth_field(rng, geo, 6))
    q_pattern = _standardize(_smooth_field(rng, geo, 6))
    return Modes(amp, m, n, theta, beta, omega, nu, land, basis, tmp_pattern, q_pattern)


def streamfunction(config: WorldConfig, geo: Geometry, modes: Modes, step: int) -> np.ndarray:
    """Streamfunction on the (H+1) x W cell corners."""
    phi = geo.phi_edge[:, None]
    lam = geo.lam_corner[None, :]
    psi = -config.rotation_speed * np.sin(phi) * np.ones_like(lam)
    c2 = np.cos(phi) ** 2
    for k in range(config.forcing_modes):
        a = modes.amp[k] * (1.0 + 0.3 * math.sin(modes.nu[k] * step + modes.beta[k]))
        psi = psi + a * c2 * np.cos(modes.m[k] * lam - modes.omega[k] * step + modes.theta[k]) \
            * np.cos(modes.n[k] * phi + modes.beta[k])
    psi[0] = psi[0].mean()
    psi[-1] = psi[-1].mean()
    return psi


def face_fluxes(psi: np.ndarray):
    """Volume fluxes through east faces (H, W) and north faces (H, W).

    Zonal: ``-(psi_north - psi_south)`` at the east corner column.
    Meridional: ``psi_east - psi_west`` along the north edge, positive northward.
    """
    east = np.roll(psi, -1, axis=1)
    fe = -(east[:-1] - east[1:])
    fn = east[:-1] - psi[:-1]
    return fe, fn


def cell_winds(psi: np.ndarray, geo: Geometry):
    fe, fn = face_fluxes(psi)
    ue = fe / geo.dphi
    u = 0.5 * (ue + np.roll(ue, 1, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        vn = np.where(geo.cos_edge[:-1] > 0, fn / (geo.cos_edge[:-1] * geo.dlam), 0.0)
    vs = np.vstack([vn[1:], np.zeros((1, vn.shape[1]))])
    v = 0.5 * (vn + vs)
    return u, v


def _transport(x, fe, fn, geo: Geometry, kappa: float, dt: float, n_sub: int | None = None):
    """Upwind advection + diffusion in flux form with automatic sub-stepping."""
    H, W = x.shape
    # diffusion conductances per face
    dz = kappa * geo.dphi / (np.cos(geo.phi)[:, None] * geo.dlam) * np.ones((1, W))
    dm = kappa * geo.cos_edge[:-1] * geo.dlam / geo.dphi * np.ones((1, W))
    fs = np.vstack([fn[1:], np.zeros((1, W))])      # flux through south face
    dms = np.vstack([dm[1:], np.zeros((1, W))])
    fw = np.roll(fe, 1, axis=1)
    dzw = np.roll(dz, 1, axis=1)
    outflow = (np.maximum(fe, 0) + np.maximum(-fw, 0) + np.maximum(fn, 0) + np.maximum(-fs, 0)
               + dz + dzw + dm + dms)
    if n_sub is None:
        c = float(np.max(outflow / geo.area)) * dt
        n_sub = max(1, math.ceil(c / 0.9))
    h = dt / n_sub
    for _ in range(n_sub):
        xe = np.roll(x, -1, axis=1)
        xn = np.vstack([x[:1], x[:-1]])
        Fe = np.where(fe >= 0, x, xe) * fe - dz * (xe - x)
        Fn = np.where(fn >= 0, x, xn) * fn - dm * (xn - x)
        Fw = np.roll(Fe, 1, axis=1)
        Fs = np.vstack([Fn[1:], np.zeros((1, W))])
        x = x - h * (Fe - Fw + Fn - Fs) / geo.area
    return x


def flux_divergence(x, psi, geo: Geometry):
    """Centred divergence of the tracer flux (x*u, x*v) per unit area."""
    fe, fn = face_fluxes(psi)
    xe = np.roll(x, -1, axis=1)
    xn = np.vstack([x[:1], x[:-1]])
    Fe = 0.5 * (x + xe) * fe
    Fn = 0.5 * (x + xn) * fn
    Fw = np.roll(Fe, 1, axis=1)
    Fs = np.vstack([Fn[1:], np.zeros((1, x.shape[1]))])
    return (Fe - Fw + Fn - Fs) / geo.area


def _tmp_equilibrium(config, geo, modes, step):
    phi = geo.phi[:, None]
    lam = geo.lam[None, :]
    season = 2 * np.pi * step / 400.0
    return (1.0 + 0.6 * np.cos(phi) ** 2 + 0.2 * modes.land
            + 0.25 * np.cos(phi) * np.cos(lam - season)
            + 0.1 * modes.tmp_pattern)


def _q_equilibrium(tmp, modes):
    return np.clip(0.5 * np.exp(0.8 * (tmp - 1.0)) * (1.0 - 0.3 * modes.land)
                   * (1.0 + 0.15 * modes.q_pattern), 0.0, None)


def init_world(config: WorldConfig) -> WorldState:
    geo = geometry(config.H, config.W)
    rng = np.random.default_rng(config.seed)
    modes = _draw_modes(config, geo, rng)
    psi = streamfunction(config, geo, modes, 0)
    u, v = cell_winds(psi, geo)
    tmp = _tmp_equilibrium(config, geo, modes, 0) + 0.1 * _standardize(_smooth_field(rng, geo, 6))
    tmp = np.clip(tmp, 0.05, None)
    q = _q_equilibrium(tmp, modes) * np.exp(0.1 * _standardize(_smooth_field(rng, geo, 6)))
    coef = rng.normal(size=config.noise_modes)
    eta = np.tensordot(coef, modes.noise_basis, axes=1)
    s = np.full((config.H, config.W), 0.5 * config.soil_capacity)
    atm_coef = rng.normal(size=(2, config.atm_levels, config.noise_modes))
    return WorldState(u, v, q, tmp, s, eta, coef, 0, modes, rng.bit_generator.state,
                      atm_coef, config.atm_anomaly)


def step_world(state: WorldState, config: WorldConfig) -> WorldState:
    for name, a in state.base_fields().items():
        if not np.all(np.isfinite(a)):
            raise DomainError(f"non-finite values in {name}")
    geo = geometry(config.H, config.W)
    modes = state.modes
    psi = streamfunction(config, geo, modes, state.step)
    fe, fn = face_fluxes(psi)
    fe, fn = fe * config.dt, fn * config.dt
    q = _transport(state.q, fe, fn, geo, config.kappa, 1.0)
    tmp = _transport(state.tmp, fe, fn, geo, config.kappa, 1.0)
    if config.relax_rate > 0:
        r = config.relax_rate
        tmp = tmp + r * (_tmp_equilibrium(config, geo, modes, state.step + 1) - tmp)
        q = q + r * (_q_equilibrium(tmp, modes) - q)

    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    a = config.noise_persistence
    coef = a * state.eta_coef + math.sqrt(1 - a * a) * rng.normal(size=state.eta_coef.shape)
    eta = np.tensordot(coef, modes.noise_basis, axes=1)
    b = config.atm_persistence
    atm_coef = b * state.atm_coef + math.sqrt(1 - b * b) * rng.normal(size=state.atm_coef.shape)

    targets = _targets(state, config, geo, psi)
    s = ((1 - config.soil_decay) * state.s + config.soil_gain * targets["precip_like"]
         - config.soil_loss * targets["evap_like"] + config.soil_noise * state.eta)
    s = np.clip(s, 0.0, None)

    psi1 = streamfunction(config, geo, modes, state.step + 1)
    u, v = cell_winds(psi1, geo)
    return WorldState(u, v, q, tmp, s, eta, coef, state.step + 1, modes, rng.bit_generator.state,
                      atm_coef, config.atm_anomaly)


def _targets(state: WorldState, config: WorldConfig, geo: Geometry, psi=None) -> dict:
    if psi is None:
        psi = streamfunction(config, geo, state.modes, state.step)
    land = state.modes.land
    speed = np.sqrt(state.u ** 2 + state.v ** 2)
    evap = config.evap_coeff * state.tmp * speed
    conv = np.maximum(0.0, -flux_divergence(state.q, psi, geo))
    precip = config.precip_scale * conv ** config.precip_gamma
    cap = config.infiltration * np.maximum(0.0, 1.0 - state.s / config.soil_capacity)
    runoff = np.maximum(0.0, precip - cap) * land
    rho = config.coupling.get("storage_like", 0.1)
    storage = (rho * _standardize(state.q) + (1 - rho) * state.eta) * land
    return {"evap_like": evap, "precip_like": precip, "runoff_like": runoff,
            "storage_like": storage}


def derive_targets(state: WorldState, config: WorldConfig, variables=TARGET_VARS) -> dict[str, GridField]:
    unknown = [v for v in variables if v not in TARGET_VARS]
    if unknown:
        raise KeyError(f"unknown target variables: {unknown}")
    for name, a in state.base_fields().items():
        if not np.all(np.isfinite(a)):
            raise DomainError(f"non-finite values in {name}")
    geo = geometry(config.H, config.W)
    t = _targets(state, config, geo)
    return {v: GridField(v, state.step, geo.lats, geo.lons, t[v], UNITS[v]) for v in variables}


def atmos_columns(state: WorldState) -> dict[str, np.ndarray]:
    """Vertical profiles, shape (levels, H, W): a lapse from the surface state plus
    slowly varying smooth anomalies of each level's own."""
    n_levels = state.atm_coef.shape[1]
    k = np.arange(n_levels)[:, None, None]
    speed = np.sqrt(state.u ** 2 + state.v ** 2)
    anom = state.atm_anomaly * np.tensordot(state.atm_coef, state.modes.noise_basis, axes=1)
    tmp_atm = state.tmp[None] - 0.2 * k * (1.0 + 5.0 * speed[None]) + anom[0]
    q_atm = state.q[None] * np.exp(-0.5 * k + anom[1])
    return {"tmp_atm": tmp_atm, "q_atm": q_atm}


@dataclass
class Dataset:
    """A trajectory held in memory: ``fields[var]`` is ``(n_steps, H, W)`` float32,
    atmospheric variables are ``(n_steps, L, H, W)``."""

    fields: dict
    static: dict
    lats: np.ndarray
    lons: np.ndarray
    n_train: int
    n_val: int
    config: dict = field(default_factory=dict)

    @property
    def n_steps(self) -> int:
        return next(iter(self.fields.values())).shape[0]

    @property
    def land_mask(self) -> np.ndarray:
        return self.static["land_mask"]

    def split_range(self, split: str) -> range:
        if split == "train":
            return range(0, self.n_train)
        if split == "val":
            return range(self.n_train, self.n_train + self.n_val)
        if split == "test":
            return range(self.n_train + self.n_val, self.n_steps)
        raise KeyError(split)

    def sample_times(self, split: str) -> np.ndarray:
        """Times t such that inputs (t-1, t) and target t+1 all lie in the split."""
        r = self.split_range(split)
        return np.arange(r.start + 1, r.stop - 1)


def generate(config: WorldConfig, progress=None) -> Dataset:
    state = init_world(config)
    for _ in range(config.spinup):
        state = step_world(state, config)
    n = config.n_steps
    H, W = config.H, config.W
    fields = {v: np.empty((n, H, W), np.float32) for v in BASE_VARS + TARGET_VARS}
    for v in ATMOS_VARS:
        fields[v] = np.empty((n, config.atm_levels, H, W), np.float32)
    geo = geometry(H, W)
    for t in range(n):
        for k, a in state.base_fields().items():
            fields[k][t] = a
        for k, a in atmos_columns(state).items():
            fields[k][t] = a
        for k, a in _targets(state, config, geo).items():
            fields[k][t] = a
        if progress is not None:
            progress(t)
        state = step_world(state, config)
    static = {"land_mask": state.modes.land.astype(np.float32),
              "sin_lat": np.repeat(np.sin(geo.phi)[:, None], W, axis=1).astype(np.float32)}
    return Dataset(fields, static, geo.lats, geo.lons, config.n_train, config.n_val,
                   config.to_dict())


# -- on-disk layout ------------------------------------------------------------
#
#   DIR/dataset.json                 sidecar (variables, units, lats, lons, step, times, splits)
#   DIR/fields/<var>/<t:06d>.lht     one tensor file per variable and step
#   DIR/static/<name>.lht

def save_fields(directory, fields: dict, times, lats, lons, extra: dict | None = None,
                static: dict | None = None):
    """Write ``fields[var]`` (``(n, ...)`` arrays aligned with ``times``) in dataset layout."""
    d = Path(directory)
    times = [int(t) for t in times]
    for v, arr in fields.items():
        if len(arr) != len(times):
            raise ShapeError(f"{v}: {len(arr)} steps but {len(times)} times")
        vd = d / "fields" / v
        vd.mkdir(parents=True, exist_ok=True)
        for t, a in zip(times, arr):
            write_tensor(vd / f"{t:06d}.lht", np.asarray(a, dtype=np.float32))
    for name, a in (static or {}).items():
        (d / "static").mkdir(parents=True, exist_ok=True)
        write_tensor(d / "static" / f"{name}.lht", a)
    side = Sidecar({v: UNITS.get(v, "1") for v in fields}, list(lats), list(lons),
                   extra={"times": times, "static": sorted(static or {}), **(extra or {})})
    write_json(d / "dataset.json", side.to_json())


def load_fields(directory, variables=None) -> tuple[dict, Sidecar]:
    d = Path(directory)
    if not (d / "dataset.json").is_file():
        raise TensorFileError(f"{d} has no dataset.json")
    side = Sidecar.from_json(read_json(d / "dataset.json"))
    times = side.extra["times"]
    out = {}
    for v in variables or side.variables:
        if v not in side.variables:
            raise KeyError(f"{d} holds no variable {v!r}")
        out[v] = np.stack([read_tensor(d / "fields" / v / f"{t:06d}.lht") for t in times])
    return out, side


def save_dataset(ds: Dataset, directory):
    save_fields(directory, ds.fields, range(ds.n_steps), ds.lats, ds.lons,
                {"n_train": ds.n_train, "n_val": ds.n_val, "world": ds.config}, ds.static)


def load_dataset(directory) -> Dataset:
    fields, side = load_fields(directory)
    if side.extra["times"] != list(range(len(side.extra["times"]))):
        raise TensorFileError("a dataset must hold every step from 0")
    static = {n: read_tensor(Path(directory) / "static" / f"{n}.lht") for n in side.extra["static"]}
    return Dataset(fields, static, np.asarray(side.lats), np.asarray(side.lons),
                   side.extra["n_train"], side.extra["n_val"], side.extra.get("world", {}))


def explained_variance(target: np.ndarray, features: list[np.ndarray]) -> float:
    """R^2 of an ordinary least-squares fit of ``target`` on ``features`` (plus intercept)."""
    y = np.asarray(target, dtype=np.float64).ravel()
    X = np.column_stack([np.ones_like(y)] + [np.asarray(f, np.float64).ravel() for f in features])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    var = y.var()
    return float(1.0 - resid.var() / var) if var > 0 else 0.0


def base_features(u, v, q, tmp, H: int | None = None, W: int | None = None) -> list[np.ndarray]:
    """Quadratic features of the base fields and of the humidity gradient."""
    gq_lat = np.gradient(q, axis=-2)
    gq_lon = 0.5 * (np.roll(q, -1, axis=-1) - np.roll(q, 1, axis=-1))
    raw = [u, v, q, tmp, np.sqrt(u * u + v * v), gq_lat, gq_lon]
    feats = list(raw)
    for i in range(len(raw)):
        for j in range(i, len(raw)):
            feats.append(raw[i] * raw[j])
    return feats


def world_lat_weights(config: WorldConfig) -> np.ndarray:
    return lat_weights(regular_grid(config.H, config.W)[0])


def with_overrides(config: WorldConfig, **kw) -> WorldConfig:
    return replace(config, **kw)
