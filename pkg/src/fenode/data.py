"""Trajectory datasets: ``(x_j, u_j, x_{j+1}, dt_j)`` tuples under one hidden parameter."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class TrajectoryDataset:
    states: np.ndarray        # (N, n)
    controls: np.ndarray      # (N, p), p may be 0
    next_states: np.ndarray   # (N, n)
    dts: np.ndarray           # (N,)
    family: str = ""
    hidden: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.dts = np.asarray(self.dts, dtype=np.float64).reshape(-1)
        n_rows = self.states.shape[0]
        controls = np.asarray(self.controls, dtype=np.float64)
        if controls.ndim != 2:
            controls = controls.reshape(n_rows, -1) if n_rows else np.zeros((0, 0))
        if controls.shape[0] != n_rows:
            raise ShapeError("one control row per tuple required")
        self.controls = controls
        if self.states.ndim != 2 or self.next_states.shape != self.states.shape:
            raise ShapeError("states and next_states must be (N, n) arrays of equal shape")
        if self.dts.shape[0] != n_rows:
            raise ShapeError("one dt per tuple required")
        if np.any(self.dts <= 0):
            raise ConfigError("all dt must be positive")

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.shape[1]

    @property
    def deltas(self) -> np.ndarray:
        return self.next_states - self.states

    @property
    def hidden_vector(self) -> np.ndarray:
        return np.array([self.hidden[k] for k in sorted(self.hidden)], dtype=np.float64)

    def slice(self, start: int = 0, stop: int | None = None) -> "TrajectoryDataset":
        sl = np.s_[start:stop]
        return TrajectoryDataset(self.states[sl], self.controls[sl], self.next_states[sl],
                                 self.dts[sl], self.family, dict(self.hidden))

    def head(self, m: int) -> "TrajectoryDataset":
        return self.slice(0, m)

    def is_chained(self) -> bool:
        return bool(np.array_equal(self.next_states[:-1], self.states[1:]))

    def scaled(self, factor: float) -> "TrajectoryDataset":
        """Same inputs, deltas multiplied by ``factor`` (for linearity checks)."""
        return TrajectoryDataset(self.states, self.controls, self.states + factor * self.deltas,
                                 self.dts, self.family, dict(self.hidden))


@dataclass
class Normalizer:
    """Per-dimension affine statistics for states, controls and hidden parameters.

    ``states`` and ``deltas`` use ``state_std``.  Networks see the normalized
    state multiplied by ``input_gain`` (ones unless the scale was fitted from
    rates), so their inputs stay standardized whatever the output scale.
    """

    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray
    hidden_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hidden_std: np.ndarray = field(default_factory=lambda: np.zeros(0))
    input_gain: np.ndarray | None = None

    def __post_init__(self):
        if self.input_gain is None:
            self.input_gain = np.ones(np.size(self.state_std))
        for name in ("state_mean", "state_std", "control_mean", "control_std", "hidden_mean", "hidden_std",
                     "input_gain"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        if np.any(self.state_std <= 0) or np.any(self.control_std <= 0) or np.any(self.hidden_std <= 0):
            raise ConfigError("normalizer std entries must be positive")
        if self.input_gain.shape != self.state_std.shape or np.any(self.input_gain <= 0):
            raise ConfigError("input_gain must be positive with one entry per state")

    @classmethod
    def identity(cls, state_dim: int, control_dim: int = 0, hidden_dim: int = 0) -> "Normalizer":
        return cls(np.zeros(state_dim), np.ones(state_dim), np.zeros(control_dim), np.ones(control_dim),
                   np.zeros(hidden_dim), np.ones(hidden_dim))

    def states(self, x):
        return (np.asarray(x) - self.state_mean) / self.state_std

    def deltas(self, dx):
        return np.asarray(dx) / self.state_std

    def controls(self, u):
        return (np.asarray(u) - self.control_mean) / self.control_std

    def hidden(self, h):
        return (np.asarray(h) - self.hidden_mean) / self.hidden_std
