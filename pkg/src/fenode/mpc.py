"""Sampling plus gradient-refinement MPC for the planar quadrotor.

Candidates are Gaussian thrust sequences around hover.  Each is rolled out
through a differentiable raw-unit vector field (the identified model's combined
field, or any analytic field), refined by Adam on the controls with gradients
of the trajectory cost, and clamped to the action bounds.  The lowest cost seen
for any candidate at any iterate is returned.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import Coefficients, EncoderModel, identify, unit_coefficients
from .errors import ConfigError, DivergenceError, PlanningError
from .integrate import IntegrationSpec, VectorField, rk4_backward, rk4_delta, rk4_forward
from .systems import GRAVITY, QUAD_NOMINAL_MASS, QUAD_T_MAX, GenConfig, generate_datasets, make_family

log = logging.getLogger(__name__)


@dataclass
class CostWeights:
    goal: float = 1.0
    attitude: float = 0.05
    velocity: float = 0.02
    thrust_diff: float = 0.1

    def __post_init__(self):
        if min(self.goal, self.attitude, self.velocity, self.thrust_diff) < 0:
            raise ConfigError("cost weights must be >= 0")


@dataclass
class MpcConfig:
    horizon: int = 10
    samples: int = 32
    iterations: int = 10
    episode_steps: int = 100
    warm_start: bool = True
    dt: float = 0.05
    u_low: float = 0.0
    u_high: float = QUAD_T_MAX
    weights: CostWeights = field(default_factory=CostWeights)
    step_size: float = 1e-2          # Adam learning rate as a fraction of the action range
    sample_std: float = 0.3          # fraction of hover thrust
    hover_mass: float = QUAD_NOMINAL_MASS
    model_substeps: int = 1
    true_substeps: int = 10
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = CostWeights(**self.weights)
        if self.horizon < 1 or self.samples < 1 or self.iterations < 0 or self.episode_steps < 0:
            raise ConfigError("horizon >= 1, samples >= 1, iterations >= 0, episode_steps >= 0 required")
        if not self.u_low < self.u_high or self.dt <= 0 or self.step_size < 0 or self.sample_std < 0:
            raise ConfigError("invalid action bounds, dt, step size or sample std")

    @property
    def hover(self) -> float:
        return self.hover_mass * GRAVITY / 2.0


def _cost_terms(states, controls, goal, w: CostWeights):
    pos = states[..., :2] - goal[:2]
    th = states[..., 2]
    vel = states[..., 3:5]
    td = controls[..., 1] - controls[..., 0]
    per_step = (w.goal * np.sum(pos * pos, -1) + w.attitude * th * th
                + w.velocity * np.sum(vel * vel, -1) + w.thrust_diff * td * td)
    return per_step, pos, th, vel, td


def trajectory_cost(states, controls, goal, weights: CostWeights | None = None):
    """Summed stage cost; ``states[t]`` is the state reached after ``controls[t]``.

    Leading batch axes are kept: ``(..., H, 6)`` states give ``(...)`` costs.
    """
    states, controls = np.asarray(states, dtype=np.float64), np.asarray(controls, dtype=np.float64)
    if states.shape[:-1] != controls.shape[:-1]:
        raise ConfigError("states and controls must have the same length")
    per_step, *_ = _cost_terms(states, controls, np.asarray(goal, dtype=np.float64), weights or CostWeights())
    return per_step.sum(-1)


def _cost_grads(states, controls, goal, w: CostWeights):
    _, pos, th, vel, td = _cost_terms(states, controls, goal, w)
    gx = np.zeros_like(states)
    gx[..., :2] = 2 * w.goal * pos
    gx[..., 2] = 2 * w.attitude * th
    gx[..., 3:5] = 2 * w.velocity * vel
    gu = np.zeros_like(controls)
    gu[..., 0] = -2 * w.thrust_diff * td
    gu[..., 1] = 2 * w.thrust_diff * td
    return gx, gu


def _resolve_field(model, c: Coefficients | None) -> VectorField:
    if isinstance(model, EncoderModel):
        if c is None:
            if model.uses_coefficients:
                raise ConfigError("model needs identified coefficients for planning")
            c = unit_coefficients(model)
        return model.as_field(c)
    return model


def _rollout_with_grad(fld, x0, U, goal, cfg: MpcConfig, need_grad: bool):
    """Costs ``(S,)`` for candidates ``U (S, H, p)`` and, optionally, dcost/dU."""
    S, H, _ = U.shape
    spec = IntegrationSpec(cfg.dt, cfg.model_substeps)
    xs = np.empty((S, H, x0.shape[-1]))
    tapes = []
    x = np.broadcast_to(x0, (S, x0.shape[-1]))
    with np.errstate(all="ignore"):
        for t in range(H):
            d, tape = rk4_forward(fld, x, U[:, t], spec, guard=False)
            x = x + d
            xs[:, t] = x
            tapes.append(tape)
        cost = trajectory_cost(xs, U, goal, cfg.weights)
        ok = np.isfinite(cost)
        cost = np.where(ok, cost, np.inf)
        if not need_grad:
            return cost, None
        gxs, gU = _cost_grads(xs, U, goal, cfg.weights)
        g = np.zeros((S, x0.shape[-1]))
        for t in reversed(range(H)):
            g = g + gxs[:, t]
            _, gx, gu = rk4_backward(fld, tapes[t], g, param_grads=False)
            gU[:, t] += gu
            g = g + gx
    gU[~ok] = 0.0
    gU[~np.isfinite(gU)] = 0.0
    return cost, gU


def _sample_candidates(cfg: MpcConfig, rng: np.random.Generator) -> np.ndarray:
    U = cfg.hover + cfg.sample_std * cfg.hover * rng.standard_normal((cfg.samples, cfg.horizon, 2))
    return np.clip(U, cfg.u_low, cfg.u_high)


def shift_plan(plan: np.ndarray) -> np.ndarray:
    """Drop the executed action and repeat the last one."""
    return np.concatenate([plan[1:], plan[-1:]], axis=0)


@dataclass
class PlanResult:
    controls: np.ndarray        # (H, p)
    cost: float                 # predicted cost of ``controls``
    sample_costs: np.ndarray    # predicted costs of the raw candidates before refinement


def plan_detailed(model, c: Coefficients | None, x0, goal, cfg: MpcConfig, warm=None,
                  rng: np.random.Generator | None = None) -> PlanResult:
    fld = _resolve_field(model, c)
    x0 = np.asarray(x0, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    U = _sample_candidates(cfg, rng)
    if warm is not None:
        warm = np.asarray(warm, dtype=np.float64)
        if warm.shape != (cfg.horizon, 2):
            raise ConfigError(f"warm plan must have shape ({cfg.horizon}, 2)")
        U = np.concatenate([U, np.clip(warm, cfg.u_low, cfg.u_high)[None]], axis=0)
    lr = cfg.step_size * (cfg.u_high - cfg.u_low)
    m = np.zeros_like(U)
    v = np.zeros_like(U)
    b1, b2, eps = 0.9, 0.999, 1e-8
    best_cost = np.full(len(U), np.inf)
    best_U = U.copy()
    sample_costs = None
    for it in range(cfg.iterations + 1):
        refine = it < cfg.iterations
        cost, g = _rollout_with_grad(fld, x0, U, goal, cfg, refine)
        if sample_costs is None:
            sample_costs = cost.copy()
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_U[better] = U[better]
        if not refine:
            break
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        U = np.clip(U - lr * mhat / (np.sqrt(vhat) + eps), cfg.u_low, cfg.u_high)
    if not np.any(np.isfinite(best_cost)):
        raise PlanningError("every candidate diverged during planning")
    j = int(np.argmin(best_cost))
    return PlanResult(best_U[j].copy(), float(best_cost[j]), sample_costs)


def plan(model, c: Coefficients | None, x0, goal, cfg: MpcConfig, warm=None,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """Best control sequence ``(horizon, 2)`` for reaching ``goal`` from ``x0``."""
    return plan_detailed(model, c, x0, goal, cfg, warm, rng).controls


@dataclass
class EpisodeLog:
    states: np.ndarray          # (T+1, n) true states
    controls: np.ndarray        # (T, p) applied controls
    costs: np.ndarray           # (T,) predicted cost of each chosen plan
    wall_time: np.ndarray       # (T,) seconds spent planning
    goal: np.ndarray
    dt: float
    aborted_at: int | None = None

    def __len__(self):
        return len(self.controls)

    @property
    def defined(self) -> bool:
        return len(self) > 0

    def distances(self) -> np.ndarray:
        """Distance to goal after each applied step."""
        return np.linalg.norm(self.states[1:, :2] - self.goal[:2], axis=1)

    @property
    def final_distance(self) -> float:
        return float(self.distances()[-1]) if self.defined else float("nan")

    @property
    def mean_distance(self) -> float:
        return float(self.distances().mean()) if self.defined else float("nan")

    def tail_distance(self, last: int = 20) -> float:
        return float(self.distances()[-last:].mean()) if self.defined else float("nan")

    def slew_increments(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.controls, axis=0), axis=1) / self.dt

    @property
    def slew_rate(self) -> float:
        inc = self.slew_increments()
        return float(inc.mean()) if inc.size else float("nan")

    def summary(self) -> dict:
        return {"steps": len(self), "final_distance": self.final_distance,
                "mean_distance": self.mean_distance, "slew_rate": self.slew_rate,
                "aborted": self.aborted_at is not None}


def run_episode(true_field: VectorField, model, c: Coefficients | None, x0, goal,
                cfg: MpcConfig) -> EpisodeLog:
    """Closed loop: plan, apply the first action to ``true_field``, repeat."""
    x = np.asarray(x0, dtype=np.float64).copy()
    goal = np.asarray(goal, dtype=np.float64)
    rng = np.random.default_rng(cfg.seed)
    states, controls, costs, walls = [x.copy()], [], [], []
    warm = None
    aborted = None
    true_spec = IntegrationSpec(cfg.dt, cfg.true_substeps)
    for t in range(cfg.episode_steps):
        t0 = time.perf_counter()
        res = plan_detailed(model, c, x, goal, cfg, warm if cfg.warm_start else None, rng)
        walls.append(time.perf_counter() - t0)
        u = res.controls[0]
        try:
            x = x + rk4_delta(true_field, x[None], u[None], true_spec)[0]
        except DivergenceError:
            log.warning("true state diverged at step %d; aborting episode", t)
            aborted = t
            walls.pop()
            break
        controls.append(u.copy())
        costs.append(res.cost)
        states.append(x.copy())
        warm = shift_plan(res.controls)
    p = 2
    return EpisodeLog(np.array(states), np.array(controls).reshape(-1, p), np.array(costs),
                      np.array(walls), goal, cfg.dt, aborted)


def episode_rows(log_: EpisodeLog) -> tuple[list[str], list[list]]:
    """Columns and rows for an episode CSV: step, state after the step, control, cost, slew increment."""
    n = log_.states.shape[1]
    inc = np.concatenate([[0.0], log_.slew_increments()]) if log_.defined else np.zeros(0)
    cols = ["step"] + [f"x{i}" for i in range(n)] + ["u0", "u1", "cost", "slew_increment"]
    rows = [[t, *log_.states[t + 1], *log_.controls[t], log_.costs[t], inc[t]] for t in range(len(log_))]
    return cols, rows


def identify_online(model: EncoderModel, mass: float, n_tuples: int, dt: float, seed: int,
                    estimator: str = "least_squares") -> Coefficients:
    """Coefficients from ``n_tuples`` exploration tuples flown at ``mass``."""
    d = generate_datasets(make_family("quad2d"),
                          GenConfig(n_datasets=1, steps=n_tuples + 1, dt=dt, policy="pd_waypoint",
                                    seed=seed, param_values=[float(mass)]))[0]
    return identify(model, d, estimator)
