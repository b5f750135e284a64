"""Loss, schedule, optimizer, the three training modes and analytic cost accounting.

Modes:

``pretrain``  next-step forecasting of the base variables; the result is frozen.
``decoder``   backbone frozen, one MLP head per new variable on the surface latent.
``finetune``  every backbone weight trainable, new variables added as inputs and
              outputs through a linear encoder and decoder each.
"""

from __future__ import annotations

import logging
import math
import time
from pathlib import Path
from dataclasses import dataclass, field, asdict

import numpy as np

from . import backbone as bb
from .heads import MlpHead, _forward_cache, default_dims, head_backward, head_forward, init_head, param_count
from .synthworld import ATMOS_VARS, BASE_VARS, LAND_ONLY, Dataset
from .tensor_core import DomainError, lat_weights, read_json, unpatchify, write_json
from .transforms import inv_log_precip, log_precip

log = logging.getLogger(__name__)

LOG_SPACE_VARS = ("precip_like",)
DEFAULT_WARMUP = {"pretrain": 100, "decoder": 100, "finetune": 500}


class TrainingError(RuntimeError):
    """Raised on non-finite gradients or loss; carries the last finite parameters."""

    def __init__(self, msg, last_good=None, step=None):
        super().__init__(msg)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainConfig:
    mode: str = "decoder"
    lr_max: float = 5e-4
    lr_min: float = 5e-5
    warmup_steps: int | None = None
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    loss_weights: dict = field(default_factory=dict)
    head_variant: str = "literal"
    latent_cache: bool = True
    input_noise: float = 0.0        # std of Gaussian noise on normalised dynamic inputs
    rollout_steps: int = 1          # unrolled steps in the pretrain rollout phase
    rollout_epochs: int = 0         # epochs of that phase, run at lr_min after the main epochs


    def __post_init__(self):
        if self.mode not in DEFAULT_WARMUP:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.warmup_steps is None:
            self.warmup_steps = DEFAULT_WARMUP[self.mode]
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if self.warmup_steps < 0:
            raise ValueError("warmup must be nonnegative")
        if self.rollout_steps < 1 or self.rollout_epochs < 0:
            raise ValueError("rollout_steps must be >= 1 and rollout_epochs >= 0")
        if self.input_noise < 0:
            raise ValueError("input_noise must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss -------------------------------------------------------------------

def wmae_loss(pred, ref, weights, mask=None):
    """Latitude-weighted (optionally masked) MAE and its gradient w.r.t. ``pred``.

    ``weights`` has shape (H,) and broadcasts over the last two axes; the mask
    broadcasts against ``pred``.  The subgradient at exact ties is 0.
    """
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    w = np.asarray(weights, dtype=np.float64)[:, None]
    wm = np.broadcast_to(w, pred.shape)
    if mask is not None:
        wm = wm * np.asarray(mask, dtype=np.float64)
    denom = wm.sum()
    if denom <= 0:
        raise DomainError("empty mask: no pixel carries weight")
    diff = pred - ref
    loss = float((wm * np.abs(diff)).sum() / denom)
    return loss, wm * np.sign(diff) / denom


def lr_schedule(step: int, total_steps: int, config: TrainConfig) -> float:
    warm = config.warmup_steps
    if total_steps <= warm:
        raise ValueError(f"total steps {total_steps} must exceed warmup {warm}")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warm:
        return config.lr_max * (step + 1) / warm
    frac = (step - warm) / (total_steps - warm)
    return config.lr_min + (config.lr_max - config.lr_min) * 0.5 * (1.0 + math.cos(math.pi * frac))


# -- optimizer --------------------------------------------------------------

@dataclass
class OptState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_opt_state(params: dict) -> OptState:
    return OptState({k: np.zeros_like(a) for k, a in params.items()},
                    {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params: dict, grads: dict, state: OptState, lr: float):
    """In-place Adam update of every parameter that has a gradient."""
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient in {bad} at step {state.step}", step=state.step)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- data plumbing ----------------------------------------------------------

def sample_times(ds: Dataset, split: str, T: int = 2) -> np.ndarray:
    r = ds.split_range(split)
    return np.arange(r.start + T - 1, r.stop - 1)


def _history(arr, times, T):
    idx = np.asarray(times)[:, None] + np.arange(-T + 1, 1)[None, :]
    return arr[idx]


def surf_history(ds: Dataset, times, T=2, surf_vars=BASE_VARS):
    return np.stack([_history(ds.fields[v], times, T) for v in surf_vars], axis=2).astype(np.float64)


def atm_history(ds: Dataset, times, T=2, atm_vars=ATMOS_VARS):
    return np.stack([_history(ds.fields[v], times, T) for v in atm_vars], axis=2).astype(np.float64)


def compute_norm(ds: Dataset, surf_vars=BASE_VARS, atm_vars=ATMOS_VARS) -> dict:
    r = ds.split_range("train")
    norm = {}
    for v in surf_vars:
        a = ds.fields[v][r.start:r.stop].astype(np.float64)
        norm[v] = (float(a.mean()), float(a.std()) or 1.0)
    for v in atm_vars:
        a = ds.fields[v][r.start:r.stop].astype(np.float64)
        s = a.std(axis=(0, 2, 3))
        norm[v] = (a.mean(axis=(0, 2, 3)), np.where(s > 0, s, 1.0))
    return norm


def static_channels(ds: Dataset) -> np.ndarray:
    land = ds.static["land_mask"].astype(np.float64)
    return np.stack([(land - land.mean()) / (land.std() or 1.0),
                     ds.static["sin_lat"].astype(np.float64)])


def target_stats(ds: Dataset, var: str, log_space: bool, land_only: bool, with_max: bool = False):
    """Mean and std (and optionally the normalised maximum) over the train split."""
    r = ds.split_range("train")
    a = ds.fields[var][r.start:r.stop].astype(np.float64)
    if log_space:
        a = log_precip(a)
    if land_only:
        a = a[:, ds.land_mask > 0]
    mean, std = float(a.mean()), float(a.std()) or 1.0
    if with_max:
        return mean, std, (float(a.max()) - mean) / std
    return mean, std


def _total_steps(n: int, tcfg: TrainConfig) -> int:
    total = math.ceil(n / tcfg.batch_size) * tcfg.epochs
    if tcfg.epochs and total <= tcfg.warmup_steps:
        raise ValueError(f"{tcfg.mode}: {total} optimizer steps do not exceed warmup {tcfg.warmup_steps}")
    return total


def _perturb(batch: dict, n_dynamic: int, sigma: float, rng, P: int = 1) -> dict:
    """Noise on the dynamic input channels; statics stay exact.

    Three scales, each with std ``sigma``: white noise per pixel, a constant
    per patch and a constant per channel.  The coarse parts perturb the
    directions (patch-boundary jumps, channel means) that barely vary in the
    data, so the model learns to damp them.
    """
    if sigma <= 0:
        return batch

    def noise(shape):
        *lead, H, W = shape
        x = rng.standard_normal(shape)
        x += np.kron(rng.standard_normal((*lead, H // P, W // P)), np.ones((P, P)))
        x += rng.standard_normal((*lead, 1, 1))
        return sigma * x

    s = batch["surf"][:, :, :n_dynamic]
    s += noise(s.shape)
    batch["atm"] += noise(batch["atm"].shape)
    return batch


def _batches(n: int, batch_size: int, rng) -> list:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainResult:
    mode: str
    history: list                   # (step, split, loss)
    samples_per_second: float
    wall_seconds: float
    total_steps: int
    extra: dict = field(default_factory=dict)

    def val_losses(self) -> list:
        return [loss for _, split, loss in self.history if split == "val"]


# -- backbone pretraining ---------------------------------------------------

def _base_targets(bbn: bb.Backbone, ds, times):
    ts = np.asarray(times) + 1
    surf = np.stack([ds.fields[v][ts] for v in bbn.surf_vars], axis=1).astype(np.float64)
    atm = np.stack([ds.fields[v][ts] for v in bbn.atm_vars], axis=1).astype(np.float64)
    return bbn.normalize_surf(surf), bbn.normalize_atm(atm)


def _base_loss(out, ts, ta, w):
    n_s = ts.shape[1]
    n_a = ta.shape[1] * ta.shape[2]
    ls, gs = wmae_loss(out["surf"], ts, w)
    la, ga = wmae_loss(out["atm"], ta, w)
    tot = n_s + n_a
    return (n_s * ls + n_a * la) / tot, {"surf": gs * n_s / tot, "atm": ga * n_a / tot}, tot


def _shift_in(batch: dict, out: dict, n_surf: int) -> dict:
    """Next-step batch: drop the oldest input, append the forecast (statics copied)."""
    last = batch["surf"][:, -1:].copy()
    last[:, 0, :n_surf] = out["surf"]
    return {"surf": np.concatenate([batch["surf"][:, 1:], last], axis=1),
            "atm": np.concatenate([batch["atm"][:, 1:], out["atm"][:, None]], axis=1)}


def rollout_loss_and_grads(model: bb.Backbone, batch: dict, targets: list, w):
    """Mean one-step loss over an unrolled forecast, with gradients through the feedback.

    ``targets`` holds ``(surf, atm)`` normalised targets for each unrolled step.
    """
    cfg = model.cfg
    K = len(targets)
    steps = []
    total = 0.0
    for k in range(K):
        out, cache = model.forward(batch, keep_cache=True)
        loss, gout, _ = _base_loss(out, *targets[k], w)
        total += loss / K
        steps.append((cache, gout))
        if k < K - 1:
            batch = _shift_in(batch, out, cfg.n_surf)
    grads = {}
    din_s = din_a = None                # gradient w.r.t. the inputs of step k + 1
    for k in reversed(range(K)):
        cache, gout = steps[k]
        go = {"surf": gout["surf"] / K, "atm": gout["atm"] / K}
        if din_s is not None:
            go["surf"] = go["surf"] + din_s[:, -1, :cfg.n_surf]
            go["atm"] = go["atm"] + din_a[:, -1]
        g = bb.backward(cache, go, model.params, cfg, input_grads=k > 0)
        if k > 0:
            gs, ga = g.pop("input/surf"), g.pop("input/atm")
            if din_s is not None:
                gs[:, 1:] += din_s[:, :-1]
                ga[:, 1:] += din_a[:, :-1]
            din_s, din_a = gs, ga
        for name, a in g.items():
            grads[name] = grads[name] + a if name in grads else a
    return total, grads


def build_backbone(ds: Dataset, cfg: bb.BackboneConfig) -> bb.Backbone:
    norm = compute_norm(ds)
    return bb.Backbone(cfg, bb.init_params(cfg), norm, BASE_VARS, ATMOS_VARS, static_channels(ds))


def _eval_chunks(times, size=64):
    return [times[i:i + size] for i in range(0, len(times), size)]


def pretrain(ds: Dataset, cfg: bb.BackboneConfig, tcfg: TrainConfig, freeze: bool = True):
    """Next-step forecasting on the base variables. Returns ``(backbone, result)``."""
    model = build_backbone(ds, cfg)
    w = lat_weights(ds.lats)
    T = cfg.T
    train_t = sample_times(ds, "train", T)
    val_t = sample_times(ds, "val", T)

    def val_loss():
        tot = 0.0
        for ch in _eval_chunks(val_t):
            out, _ = model.forward(model.make_batch(surf_history(ds, ch, T), atm_history(ds, ch, T)))
            l, _, _ = _base_loss(out, *_base_targets(model, ds, ch), w)
            tot += l * len(ch)
        return tot / len(val_t)

    params = model.params
    opt = init_opt_state(params)
    rng = np.random.default_rng(tcfg.seed)
    noise_rng = np.random.default_rng([tcfg.seed, 1])
    total = _total_steps(len(train_t), tcfg)
    history = [(0, "val", val_loss())]
    step = 0
    t0 = time.perf_counter()
    last_good = {k: a.copy() for k, a in params.items()}
    for epoch in range(tcfg.epochs):
        for idx in _batches(len(train_t), tcfg.batch_size, rng):
            ch = train_t[idx]
            batch = model.make_batch(surf_history(ds, ch, T), atm_history(ds, ch, T))
            _perturb(batch, cfg.n_surf, tcfg.input_noise, noise_rng, cfg.P)
            out, cache = model.forward(batch, keep_cache=True)
            loss, gout, _ = _base_loss(out, *_base_targets(model, ds, ch), w)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step}", last_good, step)
            grads = bb.backward(cache, gout, params, cfg)
            lr = lr_schedule(step, total, tcfg)
            adam_step(params, grads, opt, lr)
            history.append((step, "train", loss))
            step += 1
        for k, a in params.items():
            last_good[k][...] = a
        history.append((step, "val", val_loss()))
        log.info("pretrain epoch %d val %.4f", epoch, history[-1][2])

    K = tcfg.rollout_steps
    if tcfg.rollout_epochs and K > 1:
        r = ds.split_range("train")
        roll_t = np.arange(r.start + T - 1, r.stop - K)
        for epoch in range(tcfg.rollout_epochs):
            for idx in _batches(len(roll_t), tcfg.batch_size, rng):
                ch = roll_t[idx]
                batch = model.make_batch(surf_history(ds, ch, T), atm_history(ds, ch, T))
                _perturb(batch, cfg.n_surf, tcfg.input_noise, noise_rng, cfg.P)
                targets = [_base_targets(model, ds, ch + k) for k in range(K)]
                loss, grads = rollout_loss_and_grads(model, batch, targets, w)
                if not math.isfinite(loss):
                    raise TrainingError(f"loss diverged at step {step}", last_good, step)
                adam_step(params, grads, opt, tcfg.lr_min)
                history.append((step, "train", loss))
                step += 1
            for k, a in params.items():
                last_good[k][...] = a
            history.append((step, "val", val_loss()))
            log.info("pretrain rollout epoch %d val %.4f", epoch, history[-1][2])
    wall = time.perf_counter() - t0
    if freeze:
        model.freeze()
    return model, TrainResult("pretrain", history, len(train_t) * tcfg.epochs / max(wall, 1e-9),
                              wall, total)


# -- frozen-backbone decoder heads -----------------------------------------

def surface_latents(model: bb.Backbone, ds: Dataset, times, chunk=64, noise: float = 0.0,
                    rng=None) -> np.ndarray:
    """Surface-level latents; ``noise > 0`` perturbs the normalised inputs first."""
    cfg = model.cfg
    out = np.empty((len(times), cfg.N, cfg.D))
    for i in range(0, len(times), chunk):
        ch = times[i:i + chunk]
        batch = model.make_batch(surf_history(ds, ch, cfg.T), atm_history(ds, ch, cfg.T))
        if noise > 0:
            _perturb(batch, cfg.n_surf, noise, rng, cfg.P)
        lat = model.latent(batch)
        out[i:i + len(ch)] = lat[:, :, 0]
    return out


def make_heads(model: bb.Backbone, ds: Dataset, var_ids, variant="literal", seed=0) -> dict:
    cfg = model.cfg
    heads = {}
    for i, v in enumerate(var_ids):
        log_space = v in LOG_SPACE_VARS
        land_only = v in LAND_ONLY
        mean, std, zmax = target_stats(ds, v, log_space, land_only, with_max=True)
        heads[v] = init_head(v, default_dims(cfg.E, cfg.P, variant), (cfg.H, cfg.W), seed=seed + i,
                             log_space=log_space, land_only=land_only, mean=mean, std=std,
                             out_max=zmax if log_space else None)
    return heads


def _head_targets(head: MlpHead, ds, times):
    return head.encode_target(ds.fields[head.var_id][np.asarray(times) + 1].astype(np.float64))


def train_decoders(model: bb.Backbone, ds: Dataset, var_ids, tcfg: TrainConfig):
    """Train one MLP head per variable on the frozen surface latent."""
    if not model.frozen:
        raise ValueError("decoder training requires a frozen backbone")
    w = lat_weights(ds.lats)
    land = ds.land_mask.astype(np.float64)
    T = model.cfg.T
    train_t = sample_times(ds, "train", T)
    val_t = sample_times(ds, "val", T)
    heads = make_heads(model, ds, var_ids, tcfg.head_variant, tcfg.seed)

    t0 = time.perf_counter()
    noise_rng = np.random.default_rng([tcfg.seed, 1])
    if tcfg.latent_cache:
        # with noise on, each sample keeps one fixed perturbed copy
        lat_train = surface_latents(model, ds, train_t, noise=tcfg.input_noise, rng=noise_rng)
        def get_latent(idx):
            return lat_train[idx]
    else:
        def get_latent(idx):
            return surface_latents(model, ds, train_t[idx], noise=tcfg.input_noise, rng=noise_rng)
    lat_val = surface_latents(model, ds, val_t)
    targ_train = {v: _head_targets(h, ds, train_t) for v, h in heads.items()}
    targ_val = {v: _head_targets(h, ds, val_t) for v, h in heads.items()}

    def head_loss(h, x, y):
        return wmae_loss(head_forward(x, h), y, w, land if h.land_only else None)[0]

    def val_loss():
        return {v: head_loss(h, lat_val, targ_val[v]) for v, h in heads.items()}

    params = {v: h.params() for v, h in heads.items()}
    opts = {v: init_opt_state(p) for v, p in params.items()}
    rng = np.random.default_rng(tcfg.seed)
    total = _total_steps(len(train_t), tcfg)
    history = []
    per_var = {v: [] for v in heads}

    def record_val(step):
        vl = val_loss()
        for v, l in vl.items():
            per_var[v].append(l)
        history.append((step, "val", float(np.mean(list(vl.values())))))

    record_val(0)
    step = 0
    for epoch in range(tcfg.epochs):
        for idx in _batches(len(train_t), tcfg.batch_size, rng):
            x = get_latent(idx)
            lr = lr_schedule(step, total, tcfg)
            losses = []
            for v, h in heads.items():
                cache = _forward_cache(x, h)
                H, W = h.grid
                pred = unpatchify(cache[0][-1], h.P, H, W)
                loss, g = wmae_loss(pred, targ_train[v][idx], w, land if h.land_only else None)
                if not math.isfinite(loss):
                    raise TrainingError(f"{v}: loss diverged at step {step}", heads, step)
                grads, _ = head_backward(x, h, g, cache)
                adam_step(params[v], grads, opts[v], lr)
                losses.append(loss)
            history.append((step, "train", float(np.mean(losses))))
            step += 1
        record_val(step)
        log.info("decoder epoch %d val %s", epoch, {v: round(l[-1], 4) for v, l in per_var.items()})
    wall = time.perf_counter() - t0
    for v, h in heads.items():
        h.set_params(params[v])
    return heads, TrainResult("decoder", history, len(train_t) * tcfg.epochs / max(wall, 1e-9),
                              wall, total, {"val_per_var": per_var})


# -- full fine-tuning with new variables as inputs and outputs -------------

@dataclass
class FinetunedModel:
    backbone: bb.Backbone
    new_vars: tuple
    new_norm: dict                 # var -> (mean, std) in (log-)target space
    land_only: dict
    out_max: dict = field(default_factory=dict)   # log-space caps, normalised

    def encode_new(self, ds: Dataset, var: str, times):
        a = ds.fields[var][np.asarray(times)].astype(np.float64)
        if var in LOG_SPACE_VARS:
            a = log_precip(a)
        m, s = self.new_norm[var]
        return (a - m) / s

    def new_history(self, ds: Dataset, times):
        T = self.backbone.cfg.T
        idx = np.asarray(times)[:, None] + np.arange(-T + 1, 1)[None, :]
        return np.stack([self.encode_new(ds, v, idx) for v in self.new_vars], axis=2)

    def batch(self, ds, times):
        T = self.backbone.cfg.T
        return self.backbone.make_batch(surf_history(ds, times, T), atm_history(ds, times, T),
                                        self.new_history(ds, times))

    def save(self, directory):
        self.backbone.save(directory)
        write_json(Path(directory) / "finetune.json", {
            "new_vars": list(self.new_vars),
            "new_norm": {v: list(ms) for v, ms in self.new_norm.items()},
            "land_only": self.land_only, "out_max": self.out_max})

    @classmethod
    def load(cls, directory) -> "FinetunedModel":
        meta = read_json(Path(directory) / "finetune.json")
        return cls(bb.Backbone.load(directory), tuple(meta["new_vars"]),
                   {v: tuple(ms) for v, ms in meta["new_norm"].items()}, meta["land_only"],
                   meta["out_max"])

    def predict_new(self, ds, times) -> dict:
        """Physical-unit predictions of the new variables at ``times + 1``."""
        out, _ = self.backbone.forward(self.batch(ds, times))
        res = {}
        for i, v in enumerate(self.new_vars):
            m, s = self.new_norm[v]
            z = out["new"][:, i]
            if v in self.out_max:
                z = np.minimum(z, self.out_max[v])
            y = z * s + m
            res[v] = inv_log_precip(np.maximum(y, 0.0)) if v in LOG_SPACE_VARS else y
        return res


def finetune(base: bb.Backbone, ds: Dataset, new_vars, tcfg: TrainConfig):
    """Train every backbone weight plus a linear encoder/decoder per new variable."""
    w = lat_weights(ds.lats)
    land = ds.land_mask.astype(np.float64)
    src = base.unfrozen_copy()
    params, cfg = bb.add_new_variables(src.params, src.cfg, new_vars, seed=tcfg.seed)
    model = bb.Backbone(cfg, params, src.norm, src.surf_vars, src.atm_vars, src.static)
    stats = {v: target_stats(ds, v, v in LOG_SPACE_VARS, v in LAND_ONLY, with_max=True) for v in new_vars}
    new_norm = {v: st[:2] for v, st in stats.items()}
    caps = {v: st[2] for v, st in stats.items() if v in LOG_SPACE_VARS}
    ft = FinetunedModel(model, tuple(new_vars), new_norm, {v: v in LAND_ONLY for v in new_vars}, caps)
    T = cfg.T
    train_t = sample_times(ds, "train", T)
    val_t = sample_times(ds, "val", T)
    new_w = {v: float(tcfg.loss_weights.get(v, 1.0)) for v in new_vars}

    def loss_and_grads(times, keep_cache):
        batch = ft.batch(ds, times)
        out, cache = model.forward(batch, keep_cache=keep_cache)
        l_base, g, n_base = _base_loss(out, *_base_targets(model, ds, times), w)
        tgt = np.stack([ft.encode_new(ds, v, np.asarray(times) + 1) for v in new_vars], axis=1)
        denom = n_base + sum(new_w.values())
        total = l_base * n_base
        gnew = np.zeros_like(out["new"])
        per_var = {}
        for i, v in enumerate(new_vars):
            lv, gv = wmae_loss(out["new"][:, i], tgt[:, i], w, land if ft.land_only[v] else None)
            per_var[v] = lv
            total += new_w[v] * lv
            gnew[:, i] = gv * new_w[v] / denom
        g = {"surf": g["surf"] * n_base / denom, "atm": g["atm"] * n_base / denom, "new": gnew}
        return total / denom, g, cache, per_var

    def val_loss():
        acc = 0.0
        for ch in _eval_chunks(val_t):
            l, _, _, _ = loss_and_grads(ch, False)
            acc += l * len(ch)
        return acc / len(val_t)

    opt = init_opt_state(params)
    rng = np.random.default_rng(tcfg.seed)
    total = _total_steps(len(train_t), tcfg)
    history = [(0, "val", val_loss())]
    step = 0
    t0 = time.perf_counter()
    last_good = {k: a.copy() for k, a in params.items()}
    for epoch in range(tcfg.epochs):
        for idx in _batches(len(train_t), tcfg.batch_size, rng):
            loss, gout, cache, _ = loss_and_grads(train_t[idx], True)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at step {step}", last_good, step)
            grads = bb.backward(cache, gout, params, cfg)
            adam_step(params, grads, opt, lr_schedule(step, total, tcfg))
            history.append((step, "train", loss))
            step += 1
        for k, a in params.items():
            last_good[k][...] = a
        history.append((step, "val", val_loss()))
        log.info("finetune epoch %d val %.4f", epoch, history[-1][2])
    wall = time.perf_counter() - t0
    return ft, TrainResult("finetune", history, len(train_t) * tcfg.epochs / max(wall, 1e-9),
                           wall, total)


# -- analytic cost model ----------------------------------------------------

@dataclass
class CostReport:
    mode: str
    flops_per_step: float
    trainable_params: int
    frozen_params: int
    peak_activation_floats: int
    memory_floats: int
    samples_per_second: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def linear_flops(rows: int, d_in: int, d_out: int) -> int:
    return 2 * rows * d_in * d_out


def backbone_forward_flops(cfg: bb.BackboneConfig, decode: bool = True) -> dict:
    """Per-sample forward FLOPs of each stage (2 per multiply-add)."""
    N, E, D, P2 = cfg.N, cfg.E, cfg.D, cfg.P * cfg.P
    L = cfg.levels
    f = {
        "encode": (linear_flops(N, cfg.T * cfg.V_s * P2, E)
                   + linear_flops(N * cfg.L_atm, cfg.T * cfg.V_a * P2, E)
                   + linear_flops(N * E, cfg.L_atm, cfg.L_lat)
                   + len(cfg.new_vars) * linear_flops(N, cfg.T * P2, E)),
        "lift": linear_flops(N * L, E, D),
        "blocks": cfg.n_blocks * (linear_flops(N, N, L * D) + linear_flops(N * L, D, D)),
    }
    if decode:
        f["decode"] = (linear_flops(N, D, cfg.n_surf * P2)
                       + linear_flops(N * D, cfg.L_lat, cfg.L_atm)
                       + linear_flops(N * cfg.L_atm, D, cfg.V_a * P2)
                       + len(cfg.new_vars) * linear_flops(N, D, P2))
    return f


def backbone_activation_floats(cfg: bb.BackboneConfig) -> int:
    N, E, D, L = cfg.N, cfg.E, cfg.D, cfg.levels
    P2 = cfg.P * cfg.P
    inputs = N * (cfg.T * cfg.V_s * P2 + cfg.L_atm * cfg.T * cfg.V_a * P2 + len(cfg.new_vars) * cfg.T * P2)
    enc = N * cfg.L_atm * E + N * L * E
    blocks = cfg.n_blocks * 4 * N * L * D
    dec = N * cfg.L_atm * D + N * L * D
    return inputs + enc + blocks + dec


def flop_count(cfg: bb.BackboneConfig, mode: str, *, head_dims=None, n_heads: int = 4,
               n_new: int = 4, batch_size: int = 8, epochs: int = 10,
               latent_cache: bool = True) -> CostReport:
    """Analytic training cost per optimizer step.

    Trainable maps cost forward + 2x forward for the backward pass; frozen maps
    cost one forward.  With ``latent_cache`` the frozen encoder/processor runs
    once per sample for the whole run, so its cost is spread over ``epochs``.
    """
    base_params = sum(int(np.prod(s)) for s in bb.param_shapes(
        bb.BackboneConfig(**{**cfg.to_dict(), "new_vars": ()})).values())
    if mode in ("pretrain", "finetune"):
        c = cfg
        if mode == "finetune" and not cfg.new_vars:
            c = bb.BackboneConfig(**{**cfg.to_dict(), "new_vars": tuple(f"new{i}" for i in range(n_new))})
        fwd = sum(backbone_forward_flops(c).values())
        trainable = sum(int(np.prod(s)) for s in bb.param_shapes(c).values())
        act = backbone_activation_floats(c)
        return CostReport(mode, float(3 * fwd * batch_size), trainable, 0, act * batch_size,
                          trainable + act * batch_size)
    if mode != "decoder":
        raise ValueError(f"unknown mode {mode!r}")
    dims = head_dims or default_dims(cfg.E, cfg.P)
    N = cfg.N
    head_fwd = n_heads * sum(linear_flops(N, a, b) for a, b in zip(dims[:-1], dims[1:]))
    frozen_fwd = sum(backbone_forward_flops(cfg, decode=False).values())
    if latent_cache:
        frozen_fwd = frozen_fwd / max(epochs, 1)
    trainable = n_heads * param_count(dims)
    act = n_heads * N * sum(dims)
    return CostReport("decoder", float((frozen_fwd + 3 * head_fwd) * batch_size), trainable,
                      base_params, act * batch_size, trainable + base_params + act * batch_size)
