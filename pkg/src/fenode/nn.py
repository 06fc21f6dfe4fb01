"""Minimal MLP stack with hand-written reverse mode, Adam and gradient clipping.

Parameters live in one flat float64 vector per network.  Layer ``l`` occupies
``fan_in * fan_out`` weights (row-major, ``y = x @ W + b``) followed by
``fan_out`` biases.  Every routine also accepts a *stack* of networks with the
same architecture: a ``(k, P)`` array of flat vectors evaluated with batched
matmuls, which is how the k basis functions are run together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

ACTIVATIONS = ("tanh",)


def check_sizes(sizes: Sequence[int]) -> tuple[int, ...]:
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 3:
        raise ConfigError(f"need at least one hidden layer, got sizes {sizes}")
    if any(s < 1 for s in sizes):
        raise ConfigError(f"all layer sizes must be >= 1, got {sizes}")
    return sizes


def param_count(sizes: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))


def unflatten(flat: np.ndarray, sizes: Sequence[int]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views ``(W, b)`` per layer into ``flat`` (shape ``(..., P)``)."""
    if flat.shape[-1] != param_count(sizes):
        raise ShapeError(f"flat length {flat.shape[-1]} does not match sizes {tuple(sizes)}")
    lead = flat.shape[:-1]
    layers = []
    off = 0
    for a, b in zip(sizes[:-1], sizes[1:]):
        W = flat[..., off:off + a * b].reshape(*lead, a, b)
        off += a * b
        bias = flat[..., off:off + b]
        off += b
        layers.append((W, bias))
    return layers


def flatten_grads(grads: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    lead = grads[0][0].shape[:-2]
    parts = []
    for gW, gb in grads:
        parts.append(gW.reshape(*lead, -1))
        parts.append(gb.reshape(*lead, -1))
    return np.concatenate(parts, axis=-1)


@dataclass
class ParamVector:
    """Flat parameters of one MLP (or a ``(k, P)`` stack of them)."""

    flat: np.ndarray
    sizes: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        self.sizes = check_sizes(self.sizes)
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape[-1] != param_count(self.sizes):
            raise ShapeError(
                f"flat length {self.flat.shape[-1]} != {param_count(self.sizes)} for sizes {self.sizes}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def layers(self):
        return unflatten(self.flat, self.sizes)

    def copy(self) -> "ParamVector":
        return ParamVector(self.flat.copy(), self.sizes, self.activation)


def mlp_init(layer_sizes: Sequence[int], seed: int, count: int | None = None) -> ParamVector:
    """Glorot-uniform weights, zero biases; ``count`` stacks independent networks."""
    sizes = check_sizes(layer_sizes)
    rng = np.random.default_rng(seed)
    n = 1 if count is None else count
    flat = np.zeros((n, param_count(sizes)))
    for W, _ in unflatten(flat, sizes):
        fan_in, fan_out = W.shape[-2:]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        W[...] = rng.uniform(-limit, limit, size=W.shape)
    return ParamVector(flat[0] if count is None else flat, sizes)


# --- batched forward / backward on lists of layers ---------------------------

def forward_layers(layers, x: np.ndarray):
    """Run the network on ``x`` of shape ``(..., B, in)``.

    Returns the output and the list of layer inputs/activations needed by
    :func:`backward_layers`.
    """
    hs = [x]
    h = x
    last = len(layers) - 1
    for i, (W, b) in enumerate(layers):
        z = h @ W
        z += b[..., None, :]
        h = np.tanh(z, out=z) if i < last else z
        hs.append(h)
    return h, hs


def backward_layers(layers, hs, g: np.ndarray, param_grads: bool = True):
    """Pull the output cotangent ``g`` back through the network.

    Returns ``(grads, g_in)`` where ``grads`` is a list of ``(gW, gb)`` (or None
    when ``param_grads`` is False) and ``g_in`` is the input cotangent.
    """
    last = len(layers) - 1
    grads = [None] * len(layers) if param_grads else None
    for i in range(last, -1, -1):
        W, _ = layers[i]
        if i < last:
            y = hs[i + 1]
            g = g * (1.0 - y * y)
        if param_grads:
            h = hs[i]
            gW = np.swapaxes(h, -1, -2) @ g
            gb = g.sum(axis=-2)
            grads[i] = (gW, gb)
        g = g @ np.swapaxes(W, -1, -2)
    return grads, g


def _as_batch(p: ParamVector, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (p.in_dim,):
        raise ShapeError(f"input has trailing dim {x.shape[-1:]} but network expects {p.in_dim}")
    single = x.ndim == 1
    return (x[None, :] if single else x), single


def mlp_forward(p: ParamVector, x) -> np.ndarray:
    xb, single = _as_batch(p, x)
    y, _ = forward_layers(p.layers(), xb)
    return y[..., 0, :] if single else y


def backward(p: ParamVector, x, cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``cotangent . mlp_forward(p, x)`` w.r.t. parameters and input."""
    xb, single = _as_batch(p, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape[-1:] != (p.out_dim,):
        raise ShapeError(f"cotangent trailing dim {cot.shape[-1:]} != output dim {p.out_dim}")
    if single:
        cot = cot[None, :]
    layers = p.layers()
    _, hs = forward_layers(layers, xb)
    grads, gx = backward_layers(layers, hs, cot)
    return flatten_grads(grads), (gx[..., 0, :] if single else gx)


# --- optimisation -------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    extra: dict = field(default_factory=dict)


def adam_init(params: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    return AdamState(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64),
                     0, lr, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns new state and new parameters."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or state.m.shape != params.shape:
        raise ShapeError("Adam state, parameters and gradients must share a shape")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient passed to adam_step")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new_state = AdamState(m, v, t, state.lr, state.beta1, state.beta2, state.eps)
    return new_state, new_params


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_grad_norm(grads: Sequence[np.ndarray], max_norm: float) -> list[np.ndarray]:
    """Scale all gradients jointly so that their global L2 norm is <= max_norm."""
    if max_norm <= 0:
        raise ConfigError("max_norm must be positive")
    total = global_norm(grads)
    if total <= max_norm:
        return [np.asarray(g) for g in grads]
    scale = max_norm / total
    return [g * scale for g in grads]
