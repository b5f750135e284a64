"""Per-variable MLP decoder heads reading the surface level of a frozen latent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor_core import ShapeError, patchify, unpatchify, save_checkpoint, load_checkpoint
from .transforms import EPSILON, inv_log_precip, log_precip


def param_count(dims) -> int:
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("need at least an input and an output size")
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def default_dims(E: int, P: int, variant: str = "literal") -> list[int]:
    """Layer sizes for a head on a 2E-wide latent.

    ``literal``: hidden layers E, E/2, E/2.  ``compact``: E/2, E/2, which gives
    roughly 330k parameters at E=512, P=4 instead of roughly 726k.
    """
    if variant == "literal":
        return [2 * E, E, E // 2, E // 2, P * P]
    if variant == "compact":
        return [2 * E, E // 2, E // 2, P * P]
    raise ValueError(f"unknown head variant {variant!r}")


@dataclass
class MlpHead:
    var_id: str
    dims: list
    weights: list
    biases: list
    grid: tuple                  # (H, W)
    log_space: bool = False
    land_only: bool = False
    mean: float = 0.0            # target normalisation (after the log transform)
    std: float = 1.0
    epsilon: float = EPSILON
    out_max: float | None = None # cap on log-space outputs (training maximum, normalised)

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.dims) - 1:
            raise ShapeError("one weight matrix and bias per layer expected")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ShapeError(f"layer {i} has shapes {w.shape}/{b.shape}, dims say {self.dims[i:i + 2]}")
        P = int(round(np.sqrt(self.dims[-1])))
        if P * P != self.dims[-1]:
            raise ShapeError("output width must be a square patch size")
        self.grid = tuple(int(g) for g in self.grid)

    @property
    def P(self) -> int:
        return int(round(np.sqrt(self.dims[-1])))

    @property
    def n_params(self) -> int:
        return param_count(self.dims)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"w{i}"] = w
            out[f"b{i}"] = b
        return out

    def set_params(self, params: dict):
        n = len(self.weights)
        self.weights = [params[f"w{i}"] for i in range(n)]
        self.biases = [params[f"b{i}"] for i in range(n)]

    # physical <-> normalised target space
    def encode_target(self, x):
        y = log_precip(x, self.epsilon) if self.log_space else np.asarray(x, dtype=np.float64)
        return (y - self.mean) / self.std

    def decode_output(self, z):
        z = np.asarray(z)
        if self.log_space and self.out_max is not None:
            z = np.minimum(z, self.out_max)
        y = z * self.std + self.mean
        if self.log_space:
            # negative log-space outputs would map below zero precipitation
            return inv_log_precip(np.maximum(y, 0.0), self.epsilon)
        return y

    def predict(self, latent_surface):
        """Physical-unit prediction from a ``(..., N, 2E)`` latent surface level."""
        return self.decode_output(head_forward(latent_surface, self))


def init_head(var_id: str, dims, grid, seed: int = 0, **kw) -> MlpHead:
    rng = np.random.default_rng(seed)
    ws, bs = [], []
    for a, b in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(a)
        ws.append(rng.uniform(-bound, bound, size=(a, b)))
        bs.append(rng.uniform(-bound, bound, size=(b,)))
    return MlpHead(var_id, list(dims), ws, bs, tuple(grid), **kw)


def _forward_cache(x, head: MlpHead):
    if x.shape[-1] != head.dims[0]:
        raise ShapeError(f"latent width {x.shape[-1]} != head input {head.dims[0]}")
    acts = [x]
    pre = []
    h = x
    n = len(head.weights)
    for i, (w, b) in enumerate(zip(head.weights, head.biases)):
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < n - 1 else z
        acts.append(h)
    return acts, pre


def head_forward(latent_surface, head: MlpHead) -> np.ndarray:
    """``(..., N, 2E)`` surface latent -> ``(..., H, W)`` field (normalised units)."""
    x = np.asarray(latent_surface, dtype=np.float64)
    acts, _ = _forward_cache(x, head)
    H, W = head.grid
    return unpatchify(acts[-1], head.P, H, W)


def head_backward(latent_surface, head: MlpHead, upstream, cache=None):
    """Gradients of ``sum(upstream * head_forward(latent))``.

    Returns ``(param_grads, latent_grad)`` with param grads keyed like
    :meth:`MlpHead.params`.
    """
    x = np.asarray(latent_surface, dtype=np.float64)
    acts, pre = cache if cache is not None else _forward_cache(x, head)
    H, W = head.grid
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape[-2:] != (H, W) or upstream.shape[:-2] != x.shape[:-2]:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match output")
    d = patchify(upstream, head.P)
    grads = {}
    n = len(head.weights)
    for i in reversed(range(n)):
        if i < n - 1:
            d = d * (pre[i] > 0)
        a = acts[i]
        grads[f"w{i}"] = a.reshape(-1, a.shape[-1]).T @ d.reshape(-1, d.shape[-1])
        grads[f"b{i}"] = d.reshape(-1, d.shape[-1]).sum(axis=0)
        d = d @ head.weights[i].T
    return grads, d


def save_heads(directory, heads: dict):
    tensors, meta = {}, {}
    for v, h in heads.items():
        for k, a in h.params().items():
            tensors[f"{v}/{k}"] = a
        meta[v] = {"dims": h.dims, "grid": list(h.grid), "log_space": h.log_space,
                   "land_only": h.land_only, "mean": h.mean, "std": h.std, "epsilon": h.epsilon, "out_max": h.out_max}
    save_checkpoint(directory, tensors, {"kind": "heads", "heads": meta})


def load_heads(directory) -> dict[str, MlpHead]:
    tensors, meta = load_checkpoint(directory)
    out = {}
    for v, m in meta["heads"].items():
        n = len(m["dims"]) - 1
        out[v] = MlpHead(v, m["dims"], [tensors[f"{v}/w{i}"] for i in range(n)],
                         [tensors[f"{v}/b{i}"] for i in range(n)], tuple(m["grid"]),
                         m["log_space"], m["land_only"], m["mean"], m["std"], m["epsilon"],
                         m.get("out_max"))
    return out
