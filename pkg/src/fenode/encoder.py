"""Function encoder whose basis functions are neural ODEs.

Everything learned lives in normalized coordinates: ``z = (x - mean) / std``
for states, likewise for controls, and deltas are ``dx / std``.  The public
functions take and return raw units; the Gram matrix and coefficients are
normalized-space quantities.

Model modes
-----------
``fe_node``            sum_i c_i G_i, G_i = RK4 integral of g_i
``fe_node_residuals``  F_avg delta + sum_i c_i G_i
``fe_direct``          sum_i c_i g_i(x, u, dt), no integration
``node_baseline``      one neural ODE, coefficient fixed at 1
``oracle_baseline``    one neural ODE that also sees the hidden parameters
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Normalizer, TrajectoryDataset
from .errors import ConfigError, NumericError, ShapeError
from .integrate import (CombinedField, IntegrationSpec, MLPField, NormalizedField, VectorField,
                        rk4_backward, rk4_delta, rk4_forward)
from .nn import ParamVector, backward_layers, flatten_grads, forward_layers, mlp_init, param_count

MODES = ("fe_node", "fe_node_residuals", "fe_direct", "node_baseline", "oracle_baseline")
FE_MODES = ("fe_node", "fe_node_residuals", "fe_direct")


class FixedAverage(VectorField):
    """A known raw-unit vector field used as F_avg, seen in normalized coordinates."""

    analytic = True

    def __init__(self, raw_field: VectorField, normalizer: Normalizer):
        self.raw = raw_field
        self.norm = normalizer
        self.state_dim = raw_field.state_dim
        self.control_dim = raw_field.control_dim

    def _raw(self, z, w):
        n = self.norm
        return z * n.state_std + n.state_mean, w * n.control_std + n.control_mean

    def __call__(self, z, w):
        x, u = self._raw(z, w)
        return self.raw(x, u) / self.norm.state_std

    def vjp(self, z, w, g):
        x, u = self._raw(z, w)
        gx, gu = self.raw.vjp(x, u, g / self.norm.state_std)
        return gx * self.norm.state_std, gu * self.norm.control_std


def architecture(mode: str, state_dim: int, control_dim: int, hidden_sizes: Sequence[int],
                 hidden_dim: int = 0) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Layer sizes of the basis networks and of the average network."""
    n_in = state_dim + control_dim
    basis_in = n_in + (hidden_dim if mode == "oracle_baseline" else 0) + (1 if mode == "fe_direct" else 0)
    hidden = tuple(int(h) for h in hidden_sizes)
    return (basis_in, *hidden, state_dim), (n_in, *hidden, state_dim)


@dataclass
class EncoderModel:
    mode: str
    state_dim: int
    control_dim: int
    hidden_sizes: tuple[int, ...]
    basis: np.ndarray                     # (k, P) flat basis-network parameters
    normalizer: Normalizer
    avg: np.ndarray | None = None         # (P,) F_avg parameters, residuals mode only
    hidden_dim: int = 0                   # extra oracle inputs
    volume: float = 1.0
    config: dict = field(default_factory=dict)
    avg_field: VectorField | None = None  # fixed prior-knowledge F_avg (not persisted)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.basis = np.atleast_2d(np.asarray(self.basis, dtype=np.float64))
        if self.basis.shape[1] != param_count(self.sizes):
            raise ShapeError(f"basis parameters do not match architecture {self.sizes}")
        if self.mode in ("node_baseline", "oracle_baseline") and self.k != 1:
            raise ConfigError(f"{self.mode} uses exactly one network")
        if self.mode == "oracle_baseline" and self.hidden_dim < 1:
            raise ConfigError("oracle_baseline needs hidden_dim >= 1")
        has_avg = self.avg is not None or self.avg_field is not None
        if (self.mode == "fe_node_residuals") != has_avg:
            raise ConfigError("average-function parameters are present exactly in fe_node_residuals mode")
        if self.avg is not None:
            self.avg = np.asarray(self.avg, dtype=np.float64)
            if self.avg.shape != (param_count(self.avg_sizes),):
                raise ShapeError("average-function parameters do not match architecture")
        if not self.volume > 0:
            raise ConfigError("volume must be positive")

    @property
    def k(self) -> int:
        return self.basis.shape[0]

    @property
    def sizes(self) -> tuple[int, ...]:
        return architecture(self.mode, self.state_dim, self.control_dim, self.hidden_sizes, self.hidden_dim)[0]

    @property
    def avg_sizes(self) -> tuple[int, ...]:
        return architecture(self.mode, self.state_dim, self.control_dim, self.hidden_sizes, self.hidden_dim)[1]

    @property
    def uses_coefficients(self) -> bool:
        return self.mode in FE_MODES

    def basis_params(self, i: int | None = None) -> ParamVector:
        return ParamVector(self.basis if i is None else self.basis[i], self.sizes)

    def avg_network(self) -> VectorField | None:
        if self.avg_field is not None:
            return self.avg_field
        if self.avg is None:
            return None
        return MLPField(ParamVector(self.avg, self.avg_sizes), self.state_dim, self.control_dim,
                        x_gain=self.normalizer.input_gain)

    def basis_field(self, hidden=None, i: int | None = None) -> MLPField:
        """Normalized-space field of the basis stack (or of basis ``i`` alone)."""
        if self.mode == "fe_direct":
            raise ConfigError("fe_direct basis functions are not vector fields")
        extra = None
        if self.mode == "oracle_baseline":
            if hidden is None:
                raise ConfigError("oracle_baseline needs the hidden parameters")
            extra = self.normalizer.hidden(np.asarray(hidden, dtype=np.float64))
        return MLPField(self.basis_params(i), self.state_dim, self.control_dim, extra,
                        self.normalizer.input_gain)

    def as_field(self, c: "Coefficients") -> NormalizedField:
        """Raw-unit vector field ``sum_i c_i g_i (+ F_avg)`` (the combined field)."""
        check_coefficients(self, c)
        inner = CombinedField(self.basis_field(c.hidden), c.values, self.avg_network())
        n = self.normalizer
        return NormalizedField(inner, n.state_mean, n.state_std, n.control_mean, n.control_std)


def init_model(mode: str, state_dim: int, control_dim: int, k: int, hidden_sizes: Sequence[int],
               normalizer: Normalizer, seed: int = 0, hidden_dim: int = 0, volume: float = 1.0,
               fixed_avg: VectorField | None = None) -> EncoderModel:
    if k < 1:
        raise ConfigError(f"basis count k must be >= 1, got {k}")
    if mode in ("node_baseline", "oracle_baseline"):
        k = 1
    basis_sizes, avg_sizes = architecture(mode, state_dim, control_dim, hidden_sizes, hidden_dim)
    ss = np.random.SeedSequence(seed)
    basis_seed, avg_seed = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    basis = mlp_init(basis_sizes, basis_seed, count=k).flat
    avg = None
    avg_field = None
    if mode == "fe_node_residuals":
        if fixed_avg is not None:
            avg_field = FixedAverage(fixed_avg, normalizer)
        else:
            avg = mlp_init(avg_sizes, avg_seed).flat
    return EncoderModel(mode, state_dim, control_dim, tuple(hidden_sizes), basis, normalizer, avg,
                        hidden_dim if mode == "oracle_baseline" else 0, volume, {}, avg_field)


@dataclass
class Coefficients:
    values: np.ndarray
    estimator: str = "inner_product"
    m: int = 0
    hidden: np.ndarray | None = None   # oracle mode: the true hidden parameters

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.values)):
            raise NumericError("coefficients must be finite")


def check_coefficients(model: EncoderModel, c: Coefficients):
    if c.values.shape != (model.k,):
        raise ConfigError(f"{len(c.values)} coefficients for a model with k={model.k}")
    if model.mode == "oracle_baseline" and c.hidden is None:
        raise ConfigError("oracle_baseline coefficients must carry the hidden parameters")


def unit_coefficients(model: EncoderModel, hidden=None) -> Coefficients:
    return Coefficients(np.ones(model.k), "fixed", 0, None if hidden is None else np.asarray(hidden, float))


# --- basis evaluation in normalized space -----------------------------------

def basis_forward(model: EncoderModel, z, w, dt, substeps: int = 1, hidden=None, tape: bool = False):
    """All basis deltas ``G`` of shape ``(k, B, n)`` for normalized inputs.

    With ``tape`` the second return value can be passed to :func:`basis_backward`.
    """
    z = np.asarray(z, dtype=np.float64)
    if model.mode == "fe_direct":
        dt_col = np.broadcast_to(np.asarray(dt, dtype=np.float64), z.shape[:-1])[..., None]
        inp = np.concatenate([z * model.normalizer.input_gain, np.asarray(w, dtype=np.float64), dt_col], axis=-1)
        layers = model.basis_params().layers()
        G, hs = forward_layers(layers, inp)
        return G, (layers, hs)
    fld = model.basis_field(hidden)
    z0 = np.broadcast_to(z, (model.k,) + z.shape)
    spec = IntegrationSpec(dt, substeps)
    if tape:
        G, t = rk4_forward(fld, z0, w, spec)
        return G, (fld, t)
    return rk4_delta(fld, z0, w, spec), None


def basis_backward(model: EncoderModel, tape, gG) -> np.ndarray:
    """Gradient of ``<gG, G>`` w.r.t. the ``(k, P)`` basis parameters."""
    if model.mode == "fe_direct":
        layers, hs = tape
        grads, _ = backward_layers(layers, hs, gG)
        return flatten_grads(grads)
    fld, t = tape
    gp, _, _ = rk4_backward(fld, t, gG)
    return gp


def avg_forward(model: EncoderModel, z, w, dt, substeps: int = 1) -> np.ndarray:
    fld = model.avg_network()
    if fld is None:
        return np.zeros(np.shape(z))
    return rk4_delta(fld, z, w, IntegrationSpec(dt, substeps))


def _normalized_terms(model: EncoderModel, d: TrajectoryDataset, substeps: int):
    if len(d) == 0:
        raise ConfigError("empty dataset")
    if d.state_dim != model.state_dim or d.control_dim != model.control_dim:
        raise ShapeError(f"dataset dims ({d.state_dim}, {d.control_dim}) do not match model "
                         f"({model.state_dim}, {model.control_dim})")
    n = model.normalizer
    z, w = n.states(d.states), n.controls(d.controls)
    hidden = d.hidden_vector if model.mode == "oracle_baseline" else None
    G, _ = basis_forward(model, z, w, d.dts, substeps, hidden)
    target = n.deltas(d.deltas) - avg_forward(model, z, w, d.dts, substeps)
    return G, target


# --- coefficient estimation --------------------------------------------------

def _fixed_if_baseline(model: EncoderModel, d: TrajectoryDataset, estimator: str):
    if model.uses_coefficients:
        return None
    if len(d) == 0:
        raise ConfigError("empty dataset")
    hidden = d.hidden_vector if model.mode == "oracle_baseline" else None
    c = unit_coefficients(model, hidden)
    c.estimator, c.m = estimator, len(d)
    return c


def estimate_coefficients_ip(model: EncoderModel, d: TrajectoryDataset, V: float | None = None,
                             substeps: int = 1) -> Coefficients:
    """Monte-Carlo inner product ``c_i = (V/m) sum_j <dz_j - r_j, G_i(z_j, u_j, dt_j)>``."""
    fixed = _fixed_if_baseline(model, d, "inner_product")
    if fixed is not None:
        return fixed
    V = model.volume if V is None else V
    G, target = _normalized_terms(model, d, substeps)
    c = (V / len(d)) * np.einsum("bn,kbn->k", target, G)
    return Coefficients(c, "inner_product", len(d))


def gram_matrix(model: EncoderModel, d: TrajectoryDataset, V: float | None = None,
                substeps: int = 1) -> np.ndarray:
    """Empirical ``<G_i, G_l>`` over ``d`` (normalized space), exactly symmetric."""
    if not model.uses_coefficients:
        raise ConfigError(f"{model.mode} has no basis to diagnose")
    V = model.volume if V is None else V
    G, _ = _normalized_terms(model, d, substeps)
    return _gram(G, V)


def _gram(G, V):
    flat = G.reshape(G.shape[0], -1)
    gram = (V / G.shape[1]) * (flat @ flat.T)
    return 0.5 * (gram + gram.T)


def normalized_gram(gram: np.ndarray) -> np.ndarray:
    d = np.sqrt(np.diag(gram))
    return gram / np.outer(d, d)


def mean_offdiagonal(gram: np.ndarray) -> float:
    k = gram.shape[0]
    if k < 2:
        return 0.0
    ng = normalized_gram(gram)
    return float(np.abs(ng[~np.eye(k, dtype=bool)]).mean())


def estimate_coefficients_ls(model: EncoderModel, d: TrajectoryDataset, ridge: float = 1e-6,
                             V: float | None = None, substeps: int = 1) -> Coefficients:
    """Solve ``(Gram + ridge I) c = b`` with ``b`` the inner-product estimate."""
    if ridge < 0:
        raise ConfigError("ridge must be >= 0")
    fixed = _fixed_if_baseline(model, d, "least_squares")
    if fixed is not None:
        return fixed
    V = model.volume if V is None else V
    G, target = _normalized_terms(model, d, substeps)
    gram = _gram(G, V)
    b = (V / len(d)) * np.einsum("bn,kbn->k", target, G)
    A = gram + ridge * np.eye(model.k)
    if ridge == 0 and (not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e14):
        raise NumericError("Gram matrix is singular; use a ridge > 0")
    try:
        c = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as err:
        raise NumericError("Gram matrix is singular; use a ridge > 0") from err
    return Coefficients(c, "least_squares", len(d))


def identify(model: EncoderModel, d: TrajectoryDataset, estimator: str = "least_squares",
             ridge: float = 1e-6, substeps: int = 1) -> Coefficients:
    if estimator == "least_squares":
        return estimate_coefficients_ls(model, d, ridge, substeps=substeps)
    if estimator == "inner_product":
        return estimate_coefficients_ip(model, d, substeps=substeps)
    raise ConfigError(f"unknown estimator {estimator!r}")


# --- prediction ----------------------------------------------------------------

def predict_delta(model: EncoderModel, c: Coefficients, x, u, dt, substeps: int = 1,
                  combined: bool = False) -> np.ndarray:
    """Raw-unit state change over ``dt`` (rows of ``x``/``u``, scalar or per-row ``dt``)."""
    check_coefficients(model, c)
    if not np.all(np.asarray(dt) > 0):
        raise ConfigError("dt must be positive")
    if combined:
        return rk4_delta(model.as_field(c), x, u, IntegrationSpec(dt, substeps))
    n = model.normalizer
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x, u = x[None], u.reshape(1, -1)
    z, w = n.states(x), n.controls(u)
    G, _ = basis_forward(model, z, w, dt, substeps, c.hidden)
    dz = np.tensordot(c.values, G, axes=(0, 0)) + avg_forward(model, z, w, dt, substeps)
    out = dz * n.state_std
    return out[0] if single else out


def integrate_basis(model: EncoderModel, i: int, x0, u, spec: IntegrationSpec) -> np.ndarray:
    """Raw-unit delta of basis ``i`` alone: ``std * G_i(z0, w, dt)``."""
    if not 0 <= i < model.k:
        raise ConfigError(f"basis index {i} out of range for k={model.k}")
    n = model.normalizer
    fld = model.basis_field(i=i) if model.mode != "oracle_baseline" else None
    if fld is None:
        raise ConfigError("integrate_basis is defined for coefficient-based modes")
    return n.state_std * rk4_delta(fld, n.states(x0), n.controls(u), spec)


def integrate_combined(model: EncoderModel, c: Coefficients, x0, u, spec: IntegrationSpec) -> np.ndarray:
    """One RK4 integration of the summed field instead of k separate ones."""
    return rk4_delta(model.as_field(c), x0, u, spec)


def model_predictor(model: EncoderModel, c: Coefficients, substeps: int = 1, combined: bool = False):
    def predict(x, u, dt):
        return predict_delta(model, c, x, u, dt, substeps, combined)
    return predict
