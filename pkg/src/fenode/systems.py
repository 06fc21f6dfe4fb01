"""Ground-truth dynamics families and trajectory generation.

Every dataset draws its hidden parameter, initial state, time steps and policy
noise up front from its own stream ``default_rng([seed, index])``; the
trajectories are then integrated together as one batch.  All field arithmetic
is elementwise across rows, so generating ``n`` datasets or a prefix of them
gives bit-identical results for the shared indices.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Normalizer, TrajectoryDataset
from .errors import ConfigError, NumericError
from .integrate import IntegrationSpec, VectorField, rk4_delta

log = logging.getLogger(__name__)

GRAVITY = 9.81
QUAD_ARM = 0.1
QUAD_NOMINAL_MASS = 1.0
QUAD_T_MAX = 15.0


class VanDerPolField(VectorField):
    """``xdot = y``, ``ydot = mu (1 - x^2) y - x``.  ``mu`` may be a column of per-row values."""

    state_dim = 2
    control_dim = 0

    def __init__(self, mu):
        self.mu = np.asarray(mu, dtype=np.float64)

    def __call__(self, x, u=None):
        x = np.asarray(x)
        p, q = x[..., 0], x[..., 1]
        mu = self.mu[..., 0] if self.mu.ndim else self.mu
        return np.stack([q, mu * (1.0 - p * p) * q - p], axis=-1)

    def vjp(self, x, u, g):
        x = np.asarray(x)
        p, q = x[..., 0], x[..., 1]
        mu = self.mu[..., 0] if self.mu.ndim else self.mu
        g0, g1 = g[..., 0], g[..., 1]
        gx = np.stack([g1 * (-2.0 * mu * p * q - 1.0), g0 + g1 * mu * (1.0 - p * p)], axis=-1)
        return gx, np.zeros(np.shape(u) if u is not None else x.shape[:-1] + (0,))


class Quad2DField(VectorField):
    """Planar birotor.

    State ``(px, pz, theta, vx, vz, omega)``, control ``(T1, T2)`` rotor thrusts
    clamped to ``[0, t_max]``.  Inertia is ``mass * arm**2 / 2``.
    """

    state_dim = 6
    control_dim = 2

    def __init__(self, mass, arm: float = QUAD_ARM, t_max: float = QUAD_T_MAX, gravity: float = GRAVITY):
        self.mass = np.asarray(mass, dtype=np.float64)
        if np.any(self.mass <= 0):
            raise ConfigError("mass must be positive")
        self.arm = arm
        self.t_max = t_max
        self.gravity = gravity

    def _m(self):
        return self.mass[..., 0] if self.mass.ndim else self.mass

    def __call__(self, x, u):
        x = np.asarray(x)
        u = np.clip(np.asarray(u, dtype=np.float64), 0.0, self.t_max)
        m = self._m()
        th, vx, vz, om = x[..., 2], x[..., 3], x[..., 4], x[..., 5]
        t1, t2 = u[..., 0], u[..., 1]
        total = t1 + t2
        inertia = m * self.arm ** 2 / 2.0
        return np.stack([
            vx, vz, om,
            -total * np.sin(th) / m,
            total * np.cos(th) / m - self.gravity,
            self.arm * (t2 - t1) / inertia,
        ], axis=-1)

    def vjp(self, x, u, g):
        x = np.asarray(x)
        u = np.asarray(u, dtype=np.float64)
        inside = (u >= 0.0) & (u <= self.t_max)
        uc = np.clip(u, 0.0, self.t_max)
        m = self._m()
        th = x[..., 2]
        total = uc[..., 0] + uc[..., 1]
        s, c = np.sin(th), np.cos(th)
        ga_x, ga_z, ga_w = g[..., 3], g[..., 4], g[..., 5]
        zeros = np.zeros_like(th)
        gx = np.stack([
            zeros, zeros,
            ga_x * (-total * c / m) + ga_z * (-total * s / m),
            g[..., 0], g[..., 1], g[..., 2],
        ], axis=-1)
        k_rot = 2.0 / (m * self.arm)
        common = ga_x * (-s / m) + ga_z * (c / m)
        gu = np.stack([common - ga_w * k_rot, common + ga_w * k_rot], axis=-1) * inside
        return gx, gu


class ConstantFamilyField(VectorField):
    """``f_a(x) = (a, -a)``: the toy family used for fast end-to-end checks."""

    state_dim = 2
    control_dim = 0

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)

    def __call__(self, x, u=None):
        x = np.asarray(x)
        a = self.a[..., 0] if self.a.ndim else self.a
        a = np.broadcast_to(a, x.shape[:-1])
        return np.stack([a, -a], axis=-1)

    def vjp(self, x, u, g):
        return np.zeros(np.shape(x)), np.zeros(np.shape(u))


def vdp_field(mu) -> VanDerPolField:
    return VanDerPolField(mu)


def quad2d_field(mass, **kwargs) -> Quad2DField:
    return Quad2DField(mass, **kwargs)


@dataclass(frozen=True)
class DynamicsFamily:
    name: str
    param_name: str
    low: float
    high: float
    state_dim: int
    control_dim: int
    init_low: tuple[float, ...]
    init_high: tuple[float, ...]

    def __post_init__(self):
        if not self.low < self.high:
            raise ConfigError(f"hidden-parameter range must satisfy low < high, got [{self.low}, {self.high}]")
        if len(self.init_low) != self.state_dim or len(self.init_high) != self.state_dim:
            raise ConfigError("initial-state box must match the state dimension")

    def field(self, value) -> VectorField:
        if self.name == "van_der_pol":
            return VanDerPolField(value)
        if self.name == "quad2d":
            return Quad2DField(value)
        if self.name == "constant_field":
            return ConstantFamilyField(value)
        raise ConfigError(f"unknown family {self.name!r}")


def make_family(name: str, low: float | None = None, high: float | None = None) -> DynamicsFamily:
    if name == "van_der_pol":
        spec = ("mu", 0.1, 3.0, 2, 0, (-2.5, -2.5), (2.5, 2.5))
    elif name == "quad2d":
        spec = ("mass", 0.5, 1.5, 6, 2, (-0.5, -0.5, -0.1, -0.5, -0.5, -0.5), (0.5, 0.5, 0.1, 0.5, 0.5, 0.5))
    elif name == "constant_field":
        spec = ("a", -1.0, 1.0, 2, 0, (-1.0, -1.0), (1.0, 1.0))
    else:
        raise ConfigError(f"unknown family {name!r}")
    pname, lo, hi, n, p, ilo, ihi = spec
    return DynamicsFamily(name, pname, lo if low is None else low, hi if high is None else high, n, p, ilo, ihi)


@dataclass
class GenConfig:
    n_datasets: int = 10
    steps: int = 100
    dt: float = 0.01
    dt_jitter: float = 0.0
    substeps: int = 10
    seed: int = 0
    policy: str = "none"
    init_low: tuple[float, ...] | None = None
    init_high: tuple[float, ...] | None = None
    param_values: list[float] | None = None
    waypoint_every: int = 20
    noise_frac: float = 0.1
    u_low: float = 0.0
    u_high: float = QUAD_T_MAX

    def __post_init__(self):
        if self.steps < 2:
            raise ConfigError("steps must be >= 2")
        if self.dt <= 0 or not 0 <= self.dt_jitter < 1:
            raise ConfigError("dt must be positive and dt_jitter in [0, 1)")
        if self.substeps < 4:
            raise ConfigError("ground-truth substeps must be >= 4")
        if self.n_datasets < 1:
            raise ConfigError("n_datasets must be >= 1")
        if self.policy not in ("none", "random_uniform", "pd_waypoint"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if self.param_values is not None and len(self.param_values) != self.n_datasets:
            raise ConfigError("param_values must list one value per dataset")


WAYPOINT_BOX = ((-1.0, -0.5), (1.0, 1.5))


def pd_waypoint_controls(x, waypoint, noise, mass_est: float = QUAD_NOMINAL_MASS,
                         arm: float = QUAD_ARM, t_max: float = QUAD_T_MAX):
    """PD thrust law steering a planar quadrotor towards ``waypoint`` (rows)."""
    px, pz, th, vx, vz, om = (x[:, i] for i in range(6))
    ax = 2.0 * (waypoint[:, 0] - px) - 2.0 * vx
    az = 2.0 * (waypoint[:, 1] - pz) - 2.0 * vz
    total = np.clip(mass_est * (az + GRAVITY), 0.3 * mass_est * GRAVITY, 2.0 * mass_est * GRAVITY)
    th_des = np.clip(np.arctan2(-ax, az + GRAVITY), -0.4, 0.4)
    alpha = 60.0 * (th_des - th) - 15.0 * om
    diff = alpha * mass_est * arm / 2.0
    u = np.stack([0.5 * (total - diff), 0.5 * (total + diff)], axis=-1) + noise
    return np.clip(u, 0.0, t_max)


def generate_datasets(family: DynamicsFamily, cfg: GenConfig) -> list[TrajectoryDataset]:
    n_sets, T = cfg.n_datasets, cfg.steps - 1
    n, p = family.state_dim, family.control_dim
    lo = np.asarray(cfg.init_low if cfg.init_low is not None else family.init_low, dtype=np.float64)
    hi = np.asarray(cfg.init_high if cfg.init_high is not None else family.init_high, dtype=np.float64)
    if lo.shape != (n,) or hi.shape != (n,):
        raise ConfigError("initial-state box must match the state dimension")
    if p and cfg.policy == "none":
        raise ConfigError(f"family {family.name} has controls; choose a data-collection policy")

    params = np.empty(n_sets)
    x0 = np.empty((n_sets, n))
    dts = np.empty((n_sets, T))
    rand_u = np.zeros((n_sets, T, p))
    n_way = -(-T // cfg.waypoint_every)
    waypoints = np.zeros((n_sets, n_way, 2))
    for i in range(n_sets):
        rng = np.random.default_rng([cfg.seed, i])
        params[i] = rng.uniform(family.low, family.high) if cfg.param_values is None else cfg.param_values[i]
        x0[i] = rng.uniform(lo, hi)
        if cfg.dt_jitter > 0:
            dts[i] = rng.uniform(cfg.dt * (1 - cfg.dt_jitter), cfg.dt * (1 + cfg.dt_jitter), size=T)
        else:
            dts[i] = cfg.dt
        if cfg.policy == "random_uniform":
            rand_u[i] = rng.uniform(cfg.u_low, cfg.u_high, size=(T, p))
        elif cfg.policy == "pd_waypoint":
            waypoints[i] = rng.uniform(WAYPOINT_BOX[0], WAYPOINT_BOX[1], size=(n_way, 2))
            rand_u[i] = rng.normal(0.0, cfg.noise_frac * QUAD_NOMINAL_MASS * GRAVITY / 2, size=(T, p))

    fld = family.field(params[:, None])
    xs = np.empty((n_sets, T + 1, n))
    us = np.zeros((n_sets, T, p))
    xs[:, 0] = x0
    alive = np.full(n_sets, T)
    x = x0.copy()
    for j in range(T):
        if cfg.policy == "pd_waypoint":
            u = pd_waypoint_controls(x, waypoints[:, j // cfg.waypoint_every], rand_u[:, j])
        else:
            u = rand_u[:, j]
        us[:, j] = u
        with np.errstate(all="ignore"):
            x = x + rk4_delta(fld, x, u, IntegrationSpec(dts[:, j], cfg.substeps), guard=False)
        bad = ~np.all(np.isfinite(x), axis=1) & (alive == T)
        if np.any(bad):
            for i in np.flatnonzero(bad):
                log.warning("dataset %d diverged at step %d; truncating", i, j)
            alive[bad] = j
            x[bad] = 0.0
        xs[:, j + 1] = x

    out = []
    for i in range(n_sets):
        m = alive[i]
        if m < 2:
            raise NumericError(f"dataset {i} diverged after {m} tuples; need at least 2")
        out.append(TrajectoryDataset(xs[i, :m], us[i, :m], xs[i, 1:m + 1], dts[i, :m],
                                     family.name, {family.param_name: float(params[i])}))
    return out


def fit_normalizer(datasets, floor: float = 1e-8, scale: str = "state") -> Normalizer:
    """Pooled mean and population std over all states (controls and hidden params too).

    ``scale="rate"`` measures states and deltas in units of the pooled std of
    ``dx / dt`` instead, which balances the loss across state dimensions whose
    rates of change differ by orders of magnitude.  Network inputs stay
    standardized through ``input_gain``.
    """
    if scale not in ("state", "rate"):
        raise ConfigError(f"unknown normalizer scale {scale!r}")
    datasets = list(datasets)
    if not datasets or sum(len(d) for d in datasets) == 0:
        raise ConfigError("need at least one tuple to fit a normalizer")
    xs = np.concatenate([d.states for d in datasets])
    us = np.concatenate([d.controls for d in datasets])
    hs = np.stack([d.hidden_vector for d in datasets])
    std = np.maximum(xs.std(0), floor)
    gain = None
    if scale == "rate":
        rates = np.concatenate([d.deltas / d.dts[:, None] for d in datasets])
        rate_std = np.maximum(rates.std(0), floor)
        std, gain = rate_std, rate_std / std
    return Normalizer(xs.mean(0), std, us.mean(0), np.maximum(us.std(0), floor),
                      hs.mean(0), np.maximum(hs.std(0), floor), gain)
