"""Desk-scale encoder / processor / decoder forecaster with hand-written gradients.

Layout of one sample (B is the batch axis everywhere):

* surface input  ``(B, T, V_s, H, W)``  dynamic surface variables then statics
* atmos input    ``(B, T, V_a, L_atm, H, W)``
* tokens         ``(B, N, 1 + L_lat, E)`` with N = HW / P^2; level 0 is the surface
* latent         ``(B, N, 1 + L_lat, 2E)``

The processor is a stack of residual token-mixing (N x N) and channel-mixing
(2E x 2E) blocks with pre-activation ReLU.  Parameters live in a flat
``dict[str, ndarray]`` so the optimizer, checkpoints and gradient checks can
treat them uniformly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict, field

import numpy as np

from .tensor_core import ShapeError, patchify, unpatchify, save_checkpoint, load_checkpoint


@dataclass(frozen=True)
class BackboneConfig:
    T: int = 2
    H: int = 32
    W: int = 64
    P: int = 4
    E: int = 32
    n_surf: int = 4
    n_static: int = 2
    V_a: int = 2
    L_atm: int = 4
    L_lat: int = 3
    n_blocks: int = 2
    seed: int = 0
    new_vars: tuple = field(default=())

    def __post_init__(self):
        if self.H % self.P or self.W % self.P:
            raise ShapeError(f"patch size {self.P} must divide {self.H}x{self.W}")
        if self.E % 2:
            raise ShapeError("embedding dimension must be even")
        if self.L_lat > self.L_atm:
            raise ShapeError("latent levels cannot exceed atmospheric levels")
        object.__setattr__(self, "new_vars", tuple(self.new_vars))

    @property
    def V_s(self) -> int:
        return self.n_surf + self.n_static

    @property
    def N(self) -> int:
        return (self.H // self.P) * (self.W // self.P)

    @property
    def D(self) -> int:
        return 2 * self.E

    @property
    def levels(self) -> int:
        return 1 + self.L_lat

    @property
    def latent_shape(self) -> tuple:
        return (self.N, self.levels, self.D)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["new_vars"] = list(self.new_vars)
        return d


def param_shapes(cfg: BackboneConfig) -> dict[str, tuple]:
    P2 = cfg.P * cfg.P
    shapes = {
        "enc_surf_w": (cfg.T * cfg.V_s * P2, cfg.E),
        "enc_surf_b": (cfg.E,),
        "enc_atm_w": (cfg.T * cfg.V_a * P2, cfg.E),
        "enc_atm_b": (cfg.L_atm, cfg.E),
        "level_reduce": (cfg.L_lat, cfg.L_atm),
        "lift_w": (cfg.E, cfg.D),
        "lift_b": (cfg.D,),
    }
    for k in range(cfg.n_blocks):
        shapes[f"block{k}_tok_w"] = (cfg.N, cfg.N)
        shapes[f"block{k}_tok_b"] = (cfg.N,)
        shapes[f"block{k}_chan_w"] = (cfg.D, cfg.D)
        shapes[f"block{k}_chan_b"] = (cfg.D,)
    shapes.update({
        "level_expand": (cfg.L_atm, cfg.L_lat),
        "dec_surf_w": (cfg.D, cfg.n_surf * P2),
        "dec_surf_b": (cfg.n_surf * P2,),
        "dec_atm_w": (cfg.D, cfg.V_a * P2),
        "dec_atm_b": (cfg.L_atm, cfg.V_a * P2),
    })
    for v in cfg.new_vars:
        shapes[f"new_enc_w/{v}"] = (cfg.T * P2, cfg.E)
        shapes[f"new_enc_b/{v}"] = (cfg.E,)
        shapes[f"new_dec_w/{v}"] = (cfg.D, P2)
        shapes[f"new_dec_b/{v}"] = (P2,)
    return shapes


# fan-in used for the uniform(+-1/sqrt(fan_in)) init of each parameter
def _fan_in(name: str, cfg: BackboneConfig, shape: tuple) -> int:
    base = name.split("/")[0]
    if base.endswith("_b"):
        partner = {"enc_surf_b": "enc_surf_w", "enc_atm_b": "enc_atm_w", "lift_b": "lift_w",
                   "dec_surf_b": "dec_surf_w", "dec_atm_b": "dec_atm_w",
                   "new_enc_b": "new_enc_w", "new_dec_b": "new_dec_w"}
        if base in partner:
            return param_shapes(cfg)[partner[base] + name[len(base):]][0]
        if "tok" in base:
            return cfg.N
        return cfg.D
    if base in ("level_reduce", "level_expand"):
        return shape[1]
    if "tok_w" in base:
        return cfg.N
    return shape[0]


def init_params(cfg: BackboneConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) init, seeded."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        bound = 1.0 / math.sqrt(_fan_in(name, cfg, shape))
        params[name] = rng.uniform(-bound, bound, size=shape)
    # token mixing starts small so the untrained processor is close to identity
    for k in range(cfg.n_blocks):
        params[f"block{k}_tok_w"] *= 0.1
    return params


def add_new_variables(params: dict, cfg: BackboneConfig, new_vars, seed: int = 0):
    """Extend a backbone with a linear encoder/decoder per new surface variable."""
    new_cfg = BackboneConfig(**{**cfg.to_dict(), "new_vars": tuple(cfg.new_vars) + tuple(new_vars)})
    rng = np.random.default_rng(seed)
    out = {k: np.array(v, copy=True) for k, v in params.items()}
    for name, shape in param_shapes(new_cfg).items():
        if name in out:
            continue
        bound = 1.0 / math.sqrt(_fan_in(name, new_cfg, shape))
        out[name] = rng.uniform(-bound, bound, size=shape)
        if name.startswith("new_enc"):
            # new inputs enter gently so the pretrained latent is not disrupted
            out[name] *= 0.1
    return out, new_cfg


def relu(x):
    return np.maximum(x, 0.0)


def _surf_features(cfg, surf):
    B = surf.shape[0]
    p = patchify(surf, cfg.P)                       # (B, T, V_s, N, P2)
    return p.transpose(0, 3, 1, 2, 4).reshape(B, cfg.N, -1)


def _atm_features(cfg, atm):
    B = atm.shape[0]
    p = patchify(atm, cfg.P)                        # (B, T, V_a, L, N, P2)
    return p.transpose(0, 4, 3, 1, 2, 5).reshape(B, cfg.N, cfg.L_atm, -1)


def _new_features(cfg, new):
    B = new.shape[0]
    p = patchify(new, cfg.P)                        # (B, T, n_new, N, P2)
    return p.transpose(0, 2, 3, 1, 4).reshape(B, len(cfg.new_vars), cfg.N, -1)


def _check_inputs(cfg, batch):
    surf, atm = batch["surf"], batch["atm"]
    if surf.shape[1:] != (cfg.T, cfg.V_s, cfg.H, cfg.W):
        raise ShapeError(f"surface input {surf.shape[1:]} != {(cfg.T, cfg.V_s, cfg.H, cfg.W)}")
    if atm.shape[1:] != (cfg.T, cfg.V_a, cfg.L_atm, cfg.H, cfg.W):
        raise ShapeError(f"atmos input {atm.shape[1:]} != {(cfg.T, cfg.V_a, cfg.L_atm, cfg.H, cfg.W)}")
    if cfg.new_vars:
        new = batch.get("new")
        if new is None or new.shape[1:] != (cfg.T, len(cfg.new_vars), cfg.H, cfg.W):
            raise ShapeError("new-variable input missing or mis-shaped")


def encode(batch: dict, params: dict, cfg: BackboneConfig, cache: dict | None = None) -> np.ndarray:
    """Patch-embed surface and atmospheric inputs; returns tokens (B, N, 1+L_lat, E)."""
    _check_inputs(cfg, batch)
    xs = _surf_features(cfg, batch["surf"])
    xa = _atm_features(cfg, batch["atm"])
    ts = xs @ params["enc_surf_w"] + params["enc_surf_b"]
    xn = None
    if cfg.new_vars:
        xn = _new_features(cfg, batch["new"])
        for i, v in enumerate(cfg.new_vars):
            ts = ts + xn[:, i] @ params[f"new_enc_w/{v}"] + params[f"new_enc_b/{v}"]
    ta = xa @ params["enc_atm_w"] + params["enc_atm_b"]
    tr = np.einsum("kl,bnle->bnke", params["level_reduce"], ta)
    tokens = np.concatenate([ts[:, :, None], tr], axis=2)
    if cache is not None:
        cache.update(xs=xs, xa=xa, xn=xn, ta=ta, tokens=tokens)
    return tokens


def process(tokens: np.ndarray, params: dict, cfg: BackboneConfig, cache: dict | None = None) -> np.ndarray:
    """Lift E -> 2E then residual token/channel mixing; returns the latent."""
    B, N, L, _ = tokens.shape
    X = tokens @ params["lift_w"] + params["lift_b"]
    blocks = []
    for k in range(cfg.n_blocks):
        A = relu(X)
        mix = np.matmul(params[f"block{k}_tok_w"], A.reshape(B, N, -1)).reshape(X.shape)
        Y = X + mix + params[f"block{k}_tok_b"][:, None, None]
        C = relu(Y)
        Xn = Y + C @ params[f"block{k}_chan_w"] + params[f"block{k}_chan_b"]
        blocks.append((X, A, Y, C))
        X = Xn
    if cache is not None:
        cache.update(blocks=blocks, latent=X)
    return X


def decode_native(latent: np.ndarray, params: dict, cfg: BackboneConfig,
                  cache: dict | None = None) -> dict[str, np.ndarray]:
    """Linear per-patch decoders. Returns ``surf`` (B, n_surf, H, W),
    ``atm`` (B, V_a, L_atm, H, W) and ``new`` (B, n_new, H, W) when present."""
    if latent.shape[1:] != cfg.latent_shape:
        raise ShapeError(f"latent shape {latent.shape[1:]} != {cfg.latent_shape}")
    B = latent.shape[0]
    P2 = cfg.P * cfg.P
    X0 = latent[:, :, 0]
    zs = X0 @ params["dec_surf_w"] + params["dec_surf_b"]
    zs = zs.reshape(B, cfg.N, cfg.n_surf, P2).transpose(0, 2, 1, 3)
    out = {"surf": unpatchify(zs, cfg.P, cfg.H, cfg.W)}
    Xe = np.einsum("lk,bnkd->bnld", params["level_expand"], latent[:, :, 1:])
    za = Xe @ params["dec_atm_w"] + params["dec_atm_b"]
    za = za.reshape(B, cfg.N, cfg.L_atm, cfg.V_a, P2).transpose(0, 3, 2, 1, 4)
    out["atm"] = unpatchify(za, cfg.P, cfg.H, cfg.W)
    if cfg.new_vars:
        zn = np.stack([X0 @ params[f"new_dec_w/{v}"] + params[f"new_dec_b/{v}"]
                       for v in cfg.new_vars], axis=1)
        out["new"] = unpatchify(zn, cfg.P, cfg.H, cfg.W)
    if cache is not None:
        cache.update(Xe=Xe)
    return out


def forward(batch: dict, params: dict, cfg: BackboneConfig, keep_cache: bool = False):
    cache = {} if keep_cache else None
    tokens = encode(batch, params, cfg, cache)
    latent = process(tokens, params, cfg, cache)
    out = decode_native(latent, params, cfg, cache)
    return out, cache


def backward(cache: dict, grads_out: dict, params: dict, cfg: BackboneConfig,
             input_grads: bool = False) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every parameter, given d loss / d outputs.

    With ``input_grads`` the result also holds ``input/surf`` and ``input/atm``,
    the gradients w.r.t. the (normalised) batch inputs.
    """
    g = {}
    latent = cache["latent"]
    B = latent.shape[0]
    N, P2, D = cfg.N, cfg.P * cfg.P, cfg.D
    X0 = latent[:, :, 0].reshape(B * N, D)
    dX = np.zeros_like(latent)

    gs = patchify(grads_out["surf"], cfg.P).transpose(0, 2, 1, 3).reshape(B * N, cfg.n_surf * P2)
    g["dec_surf_w"] = X0.T @ gs
    g["dec_surf_b"] = gs.sum(axis=0)
    dX[:, :, 0] = (gs @ params["dec_surf_w"].T).reshape(B, N, D)

    ga = patchify(grads_out["atm"], cfg.P).transpose(0, 3, 2, 1, 4).reshape(B, N, cfg.L_atm, cfg.V_a * P2)
    Xe = cache["Xe"]
    g["dec_atm_w"] = Xe.reshape(-1, D).T @ ga.reshape(-1, cfg.V_a * P2)
    g["dec_atm_b"] = ga.sum(axis=(0, 1))
    dXe = ga @ params["dec_atm_w"].T
    g["level_expand"] = np.einsum("bnld,bnkd->lk", dXe, latent[:, :, 1:])
    dX[:, :, 1:] = np.einsum("lk,bnld->bnkd", params["level_expand"], dXe)

    if cfg.new_vars:
        gn = patchify(grads_out["new"], cfg.P)      # (B, n_new, N, P2)
        for i, v in enumerate(cfg.new_vars):
            gi = gn[:, i].reshape(B * N, P2)
            g[f"new_dec_w/{v}"] = X0.T @ gi
            g[f"new_dec_b/{v}"] = gi.sum(axis=0)
            dX[:, :, 0] += (gi @ params[f"new_dec_w/{v}"].T).reshape(B, N, D)

    for k in reversed(range(cfg.n_blocks)):
        Xk, A, Y, C = cache["blocks"][k]
        Wc = params[f"block{k}_chan_w"]
        g[f"block{k}_chan_w"] = C.reshape(-1, D).T @ dX.reshape(-1, D)
        g[f"block{k}_chan_b"] = dX.sum(axis=(0, 1, 2))
        dY = dX + (dX @ Wc.T) * (Y > 0)
        dYf = dY.reshape(B, N, -1)
        Af = A.reshape(B, N, -1)
        g[f"block{k}_tok_w"] = np.einsum("bnk,bmk->nm", dYf, Af)
        g[f"block{k}_tok_b"] = dY.sum(axis=(0, 2, 3))
        dA = np.matmul(params[f"block{k}_tok_w"].T, dYf).reshape(Xk.shape)
        dX = dY + dA * (Xk > 0)

    tokens = cache["tokens"]
    E = cfg.E
    g["lift_w"] = tokens.reshape(-1, E).T @ dX.reshape(-1, D)
    g["lift_b"] = dX.sum(axis=(0, 1, 2))
    dtok = dX @ params["lift_w"].T

    dts = dtok[:, :, 0].reshape(B * N, E)
    dtr = dtok[:, :, 1:]
    g["level_reduce"] = np.einsum("bnke,bnle->kl", dtr, cache["ta"])
    dta = np.einsum("kl,bnke->bnle", params["level_reduce"], dtr)
    xa = cache["xa"]
    g["enc_atm_w"] = xa.reshape(-1, xa.shape[-1]).T @ dta.reshape(-1, E)
    g["enc_atm_b"] = dta.sum(axis=(0, 1))
    xs = cache["xs"]
    g["enc_surf_w"] = xs.reshape(B * N, -1).T @ dts
    g["enc_surf_b"] = dts.sum(axis=0)
    if cfg.new_vars:
        xn = cache["xn"]
        for i, v in enumerate(cfg.new_vars):
            g[f"new_enc_w/{v}"] = xn[:, i].reshape(B * N, -1).T @ dts
            g[f"new_enc_b/{v}"] = dts.sum(axis=0)
    if input_grads:
        if cfg.new_vars:
            raise NotImplementedError("input gradients only for the base variables")
        T, V_s, V_a, L = cfg.T, cfg.V_s, cfg.V_a, cfg.L_atm
        dxs = (dts @ params["enc_surf_w"].T).reshape(B, N, T, V_s, P2).transpose(0, 2, 3, 1, 4)
        g["input/surf"] = unpatchify(dxs, cfg.P, cfg.H, cfg.W)
        dxa = (dta @ params["enc_atm_w"].T).reshape(B, N, L, T, V_a, P2).transpose(0, 3, 4, 2, 1, 5)
        g["input/atm"] = unpatchify(dxa, cfg.P, cfg.H, cfg.W)
    return g


def params_hash(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        a = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class Backbone:
    """Parameters, normalisation statistics and frozen flag of a forecaster.

    ``norm`` maps variable name to ``(mean, std)``; atmospheric entries hold
    per-level arrays.  All fields handed to :meth:`forecast_step` and returned
    by it are in physical units.
    """

    def __init__(self, cfg: BackboneConfig, params: dict, norm: dict,
                 surf_vars, atm_vars, static: np.ndarray, frozen: bool = False):
        self.cfg = cfg
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.norm = norm
        self.surf_vars = tuple(surf_vars)
        self.atm_vars = tuple(atm_vars)
        self.static = np.asarray(static, dtype=np.float64)   # (n_static, H, W), normalised
        self.frozen = False
        if frozen:
            self.freeze()

    def freeze(self):
        for a in self.params.values():
            a.setflags(write=False)
        self.frozen = True

    def unfrozen_copy(self) -> "Backbone":
        return Backbone(self.cfg, {k: np.array(v, copy=True) for k, v in self.params.items()},
                        dict(self.norm), self.surf_vars, self.atm_vars, self.static, frozen=False)

    def param_count(self) -> int:
        return int(sum(a.size for a in self.params.values()))

    def hash(self) -> str:
        return params_hash(self.params)

    # -- normalisation ----------------------------------------------------
    def _stat(self, v):
        m, s = self.norm[v]
        return np.asarray(m, dtype=np.float64), np.asarray(s, dtype=np.float64)

    def normalize_surf(self, fields):
        """``fields``: (..., n_surf, H, W) physical -> normalised."""
        out = np.empty(np.shape(fields), dtype=np.float64)
        for i, v in enumerate(self.surf_vars):
            m, s = self._stat(v)
            out[..., i, :, :] = (fields[..., i, :, :] - m) / s
        return out

    def denormalize_surf(self, fields):
        out = np.empty(np.shape(fields), dtype=np.float64)
        for i, v in enumerate(self.surf_vars):
            m, s = self._stat(v)
            out[..., i, :, :] = fields[..., i, :, :] * s + m
        return out

    def normalize_atm(self, fields):
        """``fields``: (..., V_a, L, H, W)."""
        out = np.empty(np.shape(fields), dtype=np.float64)
        for i, v in enumerate(self.atm_vars):
            m, s = self._stat(v)
            out[..., i, :, :, :] = (fields[..., i, :, :, :] - m[:, None, None]) / s[:, None, None]
        return out

    def denormalize_atm(self, fields):
        out = np.empty(np.shape(fields), dtype=np.float64)
        for i, v in enumerate(self.atm_vars):
            m, s = self._stat(v)
            out[..., i, :, :, :] = fields[..., i, :, :, :] * s[:, None, None] + m[:, None, None]
        return out

    def make_batch(self, surf_hist, atm_hist, new_hist=None) -> dict:
        """Assemble a normalised batch from physical histories.

        ``surf_hist``: (B, T, n_surf, H, W); ``atm_hist``: (B, T, V_a, L, H, W);
        ``new_hist``: (B, T, n_new, H, W) already normalised by the caller.
        """
        surf = self.normalize_surf(surf_hist)
        B, T = surf.shape[:2]
        st = np.broadcast_to(self.static, (B, T) + self.static.shape)
        batch = {"surf": np.concatenate([surf, st], axis=2), "atm": self.normalize_atm(atm_hist)}
        if new_hist is not None:
            batch["new"] = np.asarray(new_hist, dtype=np.float64)
        return batch

    # -- model ---------------------------------------------------------------
    def forward(self, batch, keep_cache=False):
        return forward(batch, self.params, self.cfg, keep_cache)

    def latent(self, batch) -> np.ndarray:
        return process(encode(batch, self.params, self.cfg), self.params, self.cfg)

    def forecast_step(self, surf_hist, atm_hist):
        """Physical (B, T, ...) histories -> physical fields at the next step."""
        batch = self.make_batch(surf_hist, atm_hist)
        out, _ = self.forward(batch)
        return self.denormalize_surf(out["surf"]), self.denormalize_atm(out["atm"])

    # -- persistence -----------------------------------------------------------
    def save(self, directory):
        norm = {k: [np.asarray(m).tolist(), np.asarray(s).tolist()] for k, (m, s) in self.norm.items()}
        tensors = dict(self.params)
        tensors["static"] = self.static
        save_checkpoint(directory, tensors, {
            "kind": "backbone", "config": self.cfg.to_dict(), "norm": norm,
            "surf_vars": list(self.surf_vars), "atm_vars": list(self.atm_vars),
            "frozen": self.frozen,
        })

    @classmethod
    def load(cls, directory) -> "Backbone":
        tensors, meta = load_checkpoint(directory)
        static = tensors.pop("static")
        cfg_d = dict(meta["config"])
        cfg_d["new_vars"] = tuple(cfg_d.get("new_vars", ()))
        cfg = BackboneConfig(**cfg_d)
        norm = {k: (np.asarray(m), np.asarray(s)) for k, (m, s) in meta["norm"].items()}
        return cls(cfg, tensors, norm, meta["surf_vars"], meta["atm_vars"], static,
                   frozen=meta["frozen"])
