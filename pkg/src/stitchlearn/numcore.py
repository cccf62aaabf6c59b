"""Dense numeric core: token-bag MLP with manual backprop, SGD-M, LR schedule.

All tensors are float64 numpy arrays in row-major order. The backbone pools a
bag of token vectors by mean and pushes the pooled vector through affine+relu
layers; a branch head is one affine+relu stage followed by an affine output
stage producing logits. Forward passes return caches that make the reverse
pass exact, so every gradient here can be checked against central finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ACTIVATIONS = ("relu", "identity")


def as_f64(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


@dataclass
class Layer:
    """One affine stage: out = act(x @ weight.T + bias)."""

    weight: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = as_f64(self.weight)
        self.bias = as_f64(self.bias)
        if self.weight.ndim != 2 or self.bias.ndim != 1:
            raise ValueError("layer weight must be 2-D and bias 1-D")
        if self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError("bias length must equal weight output dimension")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.isfinite(self.weight).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MlpParams:
    """Ordered affine stages with chained dimensions.

    A stage may also be an exact integer multiple wide, which is how a
    concat-stitch head sizes its output stage for K stacked features; a
    plain forward through such params fails at the mismatched stage.
    """

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("MlpParams needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if b.in_dim % a.out_dim != 0:
                raise ValueError(
                    f"layer dimensions do not chain: {a.out_dim} -> {b.in_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def param_arrays(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            out.append(layer.bias)
        return out


@dataclass
class MlpCache:
    """Per-layer (input, pre-activation) pairs from one batched forward."""

    inputs: list[np.ndarray]
    pres: list[np.ndarray]
    batch: int


@dataclass
class BagCache:
    """Forward cache for a single token bag through the backbone."""

    mlp: MlpCache
    n_tokens: int
    token_dim: int


def mlp_forward(x: np.ndarray, params: MlpParams) -> tuple[np.ndarray, MlpCache]:
    """Batched forward: x is (B, in_dim); returns (out (B, out_dim), cache)."""
    x = as_f64(x)
    if x.ndim != 2:
        raise ValueError("mlp_forward expects a 2-D batch")
    if x.shape[1] != params.in_dim:
        raise ValueError(
            f"input width {x.shape[1]} does not match layer width {params.in_dim}"
        )
    inputs, pres = [], []
    for layer in params.layers:
        inputs.append(x)
        pre = x @ layer.weight.T + layer.bias
        pres.append(pre)
        x = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return x, MlpCache(inputs=inputs, pres=pres, batch=x.shape[0])


def mlp_backward(
    grad_out: np.ndarray, params: MlpParams, cache: MlpCache
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Exact reverse pass. Returns ([(dW, db) per layer], grad wrt input)."""
    g = as_f64(grad_out)
    if g.ndim != 2 or g.shape != (cache.batch, params.out_dim):
        raise ValueError("stale or mismatched cache: gradient shape does not match")
    if len(cache.inputs) != len(params.layers):
        raise ValueError("stale or mismatched cache: layer count differs")
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[i]
        x, pre = cache.inputs[i], cache.pres[i]
        if x.shape != (cache.batch, layer.in_dim):
            raise ValueError("stale or mismatched cache: input shape differs")
        dpre = g * (pre > 0.0) if layer.activation == "relu" else g
        grads[i] = (dpre.T @ x, dpre.sum(axis=0))
        g = dpre @ layer.weight
    return grads, g


def backbone_forward(
    tokens: Sequence[np.ndarray] | np.ndarray, params: MlpParams
) -> tuple[np.ndarray, BagCache]:
    """Mean-pool one token bag, then run the backbone MLP.

    tokens is an (n, d) array or a list of d-vectors, n >= 1.
    """
    bag = as_f64(tokens)
    if bag.ndim == 1:
        bag = bag[None, :]
    if bag.size == 0 or bag.shape[0] == 0:
        raise ValueError("degenerate sample: empty token bag")
    pooled = bag.mean(axis=0)
    out, cache = mlp_forward(pooled[None, :], params)
    return out[0], BagCache(mlp=cache, n_tokens=bag.shape[0], token_dim=bag.shape[1])


def branch_forward(
    hidden: np.ndarray, head: MlpParams
) -> tuple[np.ndarray, np.ndarray, MlpCache]:
    """Run a branch head; returns (intermediate, logits, cache).

    The intermediate is the output of the first head stage and is the vector
    the feature-level stitch modes operate on.
    """
    h = as_f64(hidden)
    if h.ndim != 1:
        raise ValueError("branch_forward expects a 1-D hidden vector")
    if h.shape[0] != head.in_dim:
        raise ValueError(
            f"hidden width {h.shape[0]} does not match head width {head.in_dim}"
        )
    out, cache = mlp_forward(h[None, :], head)
    first = cache.pres[0]
    inter = (
        np.maximum(first, 0.0) if head.layers[0].activation == "relu" else first
    )
    return inter[0], out[0], cache


def backward(
    grad_logits: np.ndarray,
    backbone: MlpParams,
    bag_cache: BagCache,
    head: MlpParams,
    head_cache: MlpCache,
) -> tuple[
    list[tuple[np.ndarray, np.ndarray]],
    list[tuple[np.ndarray, np.ndarray]],
    np.ndarray,
]:
    """Full single-sample reverse pass from logits down to the token inputs.

    Returns (backbone grads, head grads, token gradient of shape (n, d)).
    The mean-pool gradient is split equally among the bag's tokens.
    """
    g = as_f64(grad_logits)
    if g.ndim != 1:
        raise ValueError("grad_logits must be 1-D")
    head_grads, ghidden = mlp_backward(g[None, :], head, head_cache)
    bb_grads, gpooled = mlp_backward(ghidden, backbone, bag_cache.mlp)
    per_token = gpooled[0] / bag_cache.n_tokens
    token_grad = np.tile(per_token, (bag_cache.n_tokens, 1))
    return bb_grads, head_grads, token_grad


@dataclass
class OptimState:
    """SGD momentum buffers, one per parameter array (fixed order)."""

    momentum_buffers: list[np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 1e-4

    @classmethod
    def for_params(
        cls, params: list[np.ndarray], momentum: float = 0.9, weight_decay: float = 1e-4
    ) -> "OptimState":
        return cls(
            momentum_buffers=[np.zeros_like(p) for p in params],
            momentum=momentum,
            weight_decay=weight_decay,
        )


def sgd_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimState,
    lr: float,
) -> tuple[list[np.ndarray], OptimState]:
    """One in-place SGD-with-momentum update.

    buffer <- momentum * buffer + (grad + weight_decay * param)
    param  <- param - lr * buffer
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.momentum_buffers):
        raise ValueError("params, grads and momentum buffers must align")
    for p, g, buf in zip(params, grads, state.momentum_buffers):
        if p.shape != g.shape:
            raise ValueError("gradient shape does not mirror parameter shape")
        if not np.isfinite(g).all():
            raise FloatingPointError("diverged: non-finite gradient")
        buf *= state.momentum
        buf += g
        if state.weight_decay:
            buf += state.weight_decay * p
        p -= lr * buf
    return params, state


@dataclass
class LrSchedule:
    """Linear warm-up followed by step decay at fixed epochs."""

    base_lr: float
    warmup_iters: int = 100
    warmup_ratio: float = 1.0 / 3.0
    decay_epochs: tuple[int, ...] = (5, 7)
    decay_factor: float = 0.1
    total_epochs: int = 8

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")
        self.decay_epochs = tuple(sorted(int(e) for e in self.decay_epochs))


def lr_at(schedule: LrSchedule, iteration: int, epoch: int) -> float:
    """Learning rate at a global iteration / epoch pair.

    Warm-up interpolates per-iteration from base_lr * warmup_ratio up to
    base_lr on the closed interval [0, warmup_iters]; afterwards the rate is
    base_lr times decay_factor to the power of the number of passed decay
    epochs.
    """
    if iteration < schedule.warmup_iters:
        frac = iteration / schedule.warmup_iters
        return schedule.base_lr * (
            schedule.warmup_ratio + (1.0 - schedule.warmup_ratio) * frac
        )
    passed = sum(1 for e in schedule.decay_epochs if epoch >= e)
    return schedule.base_lr * schedule.decay_factor**passed


def init_mlp(
    dims: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
) -> MlpParams:
    """He-style initialisation; relu layers get sqrt(2/fan_in) scale."""
    if len(dims) != len(activations) + 1:
        raise ValueError("need one activation per layer")
    layers = []
    for din, dout, act in zip(dims[:-1], dims[1:], activations):
        scale = np.sqrt((2.0 if act == "relu" else 1.0) / din)
        w = rng.normal(0.0, scale, size=(dout, din))
        layers.append(Layer(weight=w, bias=np.zeros(dout), activation=act))
    return MlpParams(layers=layers)
