"""Fixed-step RK4 with a hand-written reverse pass, vector fields and rollouts.

A field exposes ``forward(x, u) -> (xdot, cache)`` and
``backward(cache, g) -> (param_grad | None, gx, gu)``; analytic fields get this
for free from ``__call__`` and ``vjp``.  Controls are zero-order held: ``u`` is
passed unchanged to every RK4 stage of every substep.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .nn import ParamVector, backward_layers, flatten_grads, forward_layers


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class VectorField:
    """Map ``(state, control) -> state derivative`` over batched arrays."""

    state_dim: int
    control_dim: int = 0
    analytic: bool = True

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def vjp(self, x: np.ndarray, u: np.ndarray, g: np.ndarray):
        raise NotImplementedError(f"{type(self).__name__} has no vector-Jacobian product")

    def forward(self, x, u):
        return self(x, u), (x, u)

    def backward(self, cache, g, param_grads: bool = True):
        x, u = cache
        gx, gu = self.vjp(x, u, g)
        return None, gx, gu


class ConstantField(VectorField):
    def __init__(self, value, control_dim: int = 0):
        self.value = np.asarray(value, dtype=np.float64)
        self.state_dim = self.value.shape[-1]
        self.control_dim = control_dim

    def __call__(self, x, u):
        return np.broadcast_to(self.value, np.broadcast_shapes(np.shape(x), self.value.shape)).copy()

    def vjp(self, x, u, g):
        return np.zeros(np.shape(x)), np.zeros(np.shape(u))


class LinearField(VectorField):
    """``xdot = x @ A.T``; handy closed-form test field."""

    def __init__(self, A, control_dim: int = 0):
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.state_dim = self.A.shape[0]
        self.control_dim = control_dim

    def __call__(self, x, u):
        return np.asarray(x) @ self.A.T

    def vjp(self, x, u, g):
        return g @ self.A, np.zeros(np.shape(u))


class MLPField(VectorField):
    """Network-backed field on the concatenated input ``[x, u, *extra]``.

    ``params`` may hold a single network or a ``(k, P)`` stack, in which case
    the output gains a leading ``k`` axis.  ``extra`` is a constant input block
    (broadcast against the batch), e.g. hidden parameters for the oracle.
    ``x_gain`` rescales the state block before it enters the network.
    """

    analytic = False

    def __init__(self, params: ParamVector, state_dim: int, control_dim: int,
                 extra: np.ndarray | None = None, x_gain: np.ndarray | None = None):
        self.params = params
        self.x_gain = None if x_gain is None else np.asarray(x_gain, dtype=np.float64)
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.extra = None if extra is None else np.asarray(extra, dtype=np.float64)
        n_extra = 0 if self.extra is None else self.extra.shape[-1]
        if params.in_dim != state_dim + control_dim + n_extra or params.out_dim != state_dim:
            raise ShapeError(
                f"network sizes {params.sizes} incompatible with state {state_dim}, "
                f"control {control_dim}, extra {n_extra}"
            )
        self._layers = params.layers()

    def _inputs(self, x, u):
        x = np.asarray(x, dtype=np.float64)
        if self.x_gain is not None:
            x = x * self.x_gain
        u = np.asarray(u, dtype=np.float64)
        blocks = [x, u] if self.extra is None else [x, u, self.extra]
        lead = np.broadcast_shapes(*(b.shape[:-1] for b in blocks))
        return np.concatenate([np.broadcast_to(b, lead + b.shape[-1:]) for b in blocks], axis=-1)

    def forward(self, x, u):
        inp = self._inputs(x, u)
        y, hs = forward_layers(self._layers, inp)
        return y, (hs, np.shape(x), np.shape(u))

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def backward(self, cache, g, param_grads: bool = True):
        hs, xs, us = cache
        grads, gin = backward_layers(self._layers, hs, g, param_grads)
        n, p = self.state_dim, self.control_dim
        gx = gin[..., :n] if self.x_gain is None else gin[..., :n] * self.x_gain
        gx = unbroadcast(gx, xs)
        gu = unbroadcast(gin[..., n:n + p], us)
        gp = flatten_grads(grads) if param_grads else None
        return gp, gx, gu

    def vjp(self, x, u, g):
        _, cache = self.forward(x, u)
        _, gx, gu = self.backward(cache, g, param_grads=False)
        return gx, gu


class CombinedField(VectorField):
    """``sum_i c_i g_i(x, u)`` plus an optional additive average field."""

    analytic = False

    def __init__(self, stack: MLPField, coefficients, avg: VectorField | None = None):
        self.stack = stack
        self.c = np.asarray(coefficients, dtype=np.float64)
        self.avg = avg
        self.state_dim = stack.state_dim
        self.control_dim = stack.control_dim

    def forward(self, x, u):
        y, cache = self.stack.forward(x, u)
        out = np.tensordot(self.c, y, axes=(0, 0))
        acache = None
        if self.avg is not None:
            ya, acache = self.avg.forward(x, u)
            out = out + ya
        return out, (cache, acache, np.shape(x))

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def backward(self, cache, g, param_grads: bool = False):
        scache, acache, xs = cache
        gy = self.c.reshape((-1,) + (1,) * g.ndim) * g
        _, gx, gu = self.stack.backward(scache, gy, param_grads=False)
        gx = unbroadcast(gx, xs)
        if self.avg is not None:
            _, gxa, gua = self.avg.backward(acache, g, param_grads=False)
            gx = gx + gxa
            gu = gu + gua
        return None, gx, gu

    def vjp(self, x, u, g):
        _, cache = self.forward(x, u)
        _, gx, gu = self.backward(cache, g)
        return gx, gu


class NormalizedField(VectorField):
    """Expose a field learned in normalized coordinates in raw units.

    With ``z = (x - mx) / sx`` and ``w = (u - mu) / su`` the raw derivative is
    ``sx * f(z, w)``.  RK4 commutes with this affine change of variables.
    """

    def __init__(self, inner: VectorField, state_mean, state_std, control_mean, control_std):
        self.inner = inner
        self.mx = np.asarray(state_mean, dtype=np.float64)
        self.sx = np.asarray(state_std, dtype=np.float64)
        self.mu = np.asarray(control_mean, dtype=np.float64)
        self.su = np.asarray(control_std, dtype=np.float64)
        self.state_dim = inner.state_dim
        self.control_dim = inner.control_dim
        self.analytic = inner.analytic

    def forward(self, x, u):
        z = (np.asarray(x) - self.mx) / self.sx
        w = (np.asarray(u) - self.mu) / self.su
        y, cache = self.inner.forward(z, w)
        return self.sx * y, cache

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def backward(self, cache, g, param_grads: bool = False):
        gp, gz, gw = self.inner.backward(cache, self.sx * g, param_grads)
        return gp, gz / self.sx, gw / self.su

    def vjp(self, x, u, g):
        _, cache = self.forward(x, u)
        _, gx, gu = self.backward(cache, g)
        return gx, gu


# --- RK4 ----------------------------------------------------------------------

@dataclass(frozen=True)
class IntegrationSpec:
    """Interval length ``dt`` (scalar or one per batch row) split into ``substeps``."""

    dt: float | np.ndarray
    substeps: int = 1

    def __post_init__(self):
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ConfigError(f"substeps must be a positive integer, got {self.substeps}")
        if not np.all(np.asarray(self.dt) > 0):
            raise ConfigError("dt must be positive")

    def step_size(self):
        h = np.asarray(self.dt, dtype=np.float64) / self.substeps
        return h[..., None] if h.ndim else float(h)


def _check_finite(x, substep):
    if not np.all(np.isfinite(x)):
        raise DivergenceError("non-finite state during RK4 integration", substep)


def rk4_forward(field: VectorField, x0, u, spec: IntegrationSpec, guard: bool = True):
    """Integrate and keep what :func:`rk4_backward` needs.  Returns ``(delta, tape)``."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != field.state_dim:
        raise ShapeError(f"state has dim {x0.shape[-1]}, field expects {field.state_dim}")
    if guard:
        _check_finite(x0, 0)
    h = spec.step_size()
    x = x0
    steps = []
    for s in range(spec.substeps):
        k1, c1 = field.forward(x, u)
        if k1.shape != x.shape:
            x = np.broadcast_to(x, k1.shape)
        k2, c2 = field.forward(x + (0.5 * h) * k1, u)
        k3, c3 = field.forward(x + (0.5 * h) * k2, u)
        k4, c4 = field.forward(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if guard:
            _check_finite(x, s)
        steps.append((c1, c2, c3, c4))
    tape = (steps, h, x0.shape, np.shape(u))
    return x - x0, tape


def rk4_backward(field: VectorField, tape, g_delta, param_grads: bool = True):
    """Reverse pass of :func:`rk4_forward` for cotangent ``g_delta`` on the delta.

    Returns ``(param_grad | None, g_x0, g_u)``.
    """
    steps, h, x0_shape, u_shape = tape
    g = np.asarray(g_delta, dtype=np.float64)
    gp_total = None
    gu_total = np.zeros(u_shape)

    def acc(gp, gu):
        nonlocal gp_total, gu_total
        if gp is not None:
            gp_total = gp if gp_total is None else gp_total + gp
        gu_total = gu_total + unbroadcast(gu, u_shape)

    for c1, c2, c3, c4 in reversed(steps):
        gx = g.copy()
        gk1 = (h / 6.0) * g
        gk2 = (h / 3.0) * g
        gk3 = (h / 3.0) * g
        gk4 = (h / 6.0) * g
        gp, gx4, gu = field.backward(c4, gk4, param_grads)
        acc(gp, gu)
        gx = gx + gx4
        gk3 = gk3 + h * gx4
        gp, gx3, gu = field.backward(c3, gk3, param_grads)
        acc(gp, gu)
        gx = gx + gx3
        gk2 = gk2 + (0.5 * h) * gx3
        gp, gx2, gu = field.backward(c2, gk2, param_grads)
        acc(gp, gu)
        gx = gx + gx2
        gk1 = gk1 + (0.5 * h) * gx2
        gp, gx1, gu = field.backward(c1, gk1, param_grads)
        acc(gp, gu)
        g = gx + gx1
    # delta = x_end - x0
    gx0 = unbroadcast(g - np.asarray(g_delta), x0_shape)
    return gp_total, gx0, gu_total


def rk4_delta(field: VectorField, x0, u, spec: IntegrationSpec, guard: bool = True) -> np.ndarray:
    """``x(t0 + dt) - x(t0)`` by ``spec.substeps`` classical RK4 steps with ``u`` held."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape[-1] != field.state_dim:
        raise ShapeError(f"state has dim {x0.shape[-1]}, field expects {field.state_dim}")
    if guard:
        _check_finite(x0, 0)
    h = spec.step_size()
    x = x0
    for s in range(spec.substeps):
        k1 = field(x, u)
        k2 = field(x + (0.5 * h) * k1, u)
        k3 = field(x + (0.5 * h) * k2, u)
        k4 = field(x + h * k3, u)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if guard:
            _check_finite(x, s)
    return x - x0


def rollout(predict_step: Callable, x0, controls: Sequence, dts: Sequence) -> np.ndarray:
    """Re-grounded multi-step prediction.

    ``x[j+1] = x[j] + predict_step(x[j], controls[j], dts[j])``; returns the
    stacked states ``x[0..T]``.  ``x0`` may carry a batch axis, in which case
    ``controls[j]`` and ``dts[j]`` are per-row.
    """
    if len(controls) != len(dts):
        raise ShapeError(f"{len(controls)} controls but {len(dts)} time steps")
    x = np.asarray(x0, dtype=np.float64)
    out = [x]
    for j in range(len(dts)):
        try:
            x = x + predict_step(x, controls[j], dts[j])
        except DivergenceError as err:
            raise DivergenceError("rollout diverged", j) from err
        if not np.all(np.isfinite(x)):
            raise DivergenceError("rollout diverged", j)
        out.append(x)
    return np.stack(out)
