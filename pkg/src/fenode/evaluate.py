"""Rollout error versus prediction horizon."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import TrajectoryDataset
from .encoder import EncoderModel, identify, model_predictor
from .errors import ConfigError, DivergenceError
from .integrate import IntegrationSpec, VectorField, rk4_delta

log = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def field_predictor(field: VectorField, substeps: int = 10) -> Predictor:
    def predict(x, u, dt):
        return rk4_delta(field, x, u, IntegrationSpec(dt, substeps))
    return predict


def zero_predictor(x, u, dt):
    return np.zeros_like(x)


@dataclass
class EvalResult:
    horizons: list[int]
    mse: np.ndarray          # (n_datasets, n_horizons); inf where the rollout diverged, nan if skipped
    skipped: int = 0
    diverged: int = 0

    def mean(self) -> np.ndarray:
        return np.nanmean(self.mse, axis=0)


def rollout_mse(predict: Predictor, d: TrajectoryDataset, horizons: Sequence[int]) -> np.ndarray:
    """Mean over start indices of ``|x_hat[j+h] - x[j+h]|^2`` for each horizon.

    Every start index shares the same re-grounded rollout up to the largest
    horizon, so all horizons are averaged over the same starts.
    """
    H = max(horizons)
    starts = np.arange(len(d) - H + 1)
    x = d.states[starts]
    out = {}
    for s in range(H):
        rows = starts + s
        x = x + predict(x, d.controls[rows], d.dts[rows])
        if not np.all(np.isfinite(x)):
            raise DivergenceError("evaluation rollout diverged", s)
        if s + 1 in horizons:
            err = x - d.next_states[rows]
            out[s + 1] = float(np.mean(np.sum(err * err, axis=1)))
    return np.array([out[h] for h in horizons])


def evaluate(predictors: Predictor | Sequence[Predictor], datasets: Sequence[TrajectoryDataset],
             horizons: Sequence[int]) -> EvalResult:
    """Rollout MSE for each dataset; ``predictors`` is one callable or one per dataset.

    Horizons longer than a dataset are skipped (counted, reported as nan).
    """
    horizons = [int(h) for h in horizons]
    if not horizons or min(horizons) < 1:
        raise ConfigError("horizons must be >= 1")
    datasets = list(datasets)
    if callable(predictors):
        predictors = [predictors] * len(datasets)
    if len(predictors) != len(datasets):
        raise ConfigError("need one predictor per dataset")
    mse = np.full((len(datasets), len(horizons)), np.nan)
    skipped = diverged = 0
    for i, (pred, d) in enumerate(zip(predictors, datasets)):
        usable = [h for h in horizons if h <= len(d)]
        skipped += len(horizons) - len(usable)
        if not usable:
            continue
        cols = [horizons.index(h) for h in usable]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                mse[i, cols] = rollout_mse(pred, d, usable)
        except DivergenceError:
            diverged += 1
            mse[i, cols] = np.inf
    if skipped:
        log.warning("skipped %d (dataset, horizon) pairs longer than the data", skipped)
    return EvalResult(horizons, mse, skipped, diverged)


def zero_shot_mse(model: EncoderModel, datasets: Sequence[TrajectoryDataset], m: int,
                  horizons: Sequence[int], estimator: str = "least_squares", ridge: float = 1e-6,
                  eval_start: int | None = None, substeps: int = 1) -> EvalResult:
    """Identify coefficients on each dataset's first ``m`` tuples, then roll out on the rest.

    ``eval_start`` pins the evaluation window (``m`` by default) so that sweeps
    over ``m`` score the same tuples.  Datasets too short for ``m`` are skipped.
    """
    start = m if eval_start is None else eval_start
    if start < m:
        raise ConfigError("evaluation must start after the identification tuples")
    horizons = [int(h) for h in horizons]
    mse = np.full((len(datasets), len(horizons)), np.nan)
    skipped = diverged = 0
    for i, d in enumerate(datasets):
        if m > len(d) or start >= len(d):
            skipped += 1
            continue
        c = identify(model, d.head(m), estimator, ridge, substeps)
        r = evaluate(model_predictor(model, c, substeps), [d.slice(start)], horizons)
        mse[i] = r.mse[0]
        skipped += r.skipped
        diverged += r.diverged
    if skipped:
        log.warning("skipped %d datasets or horizons that exceed the available tuples", skipped)
    return EvalResult(horizons, mse, skipped, diverged)


def true_field_mse(family, datasets: Sequence[TrajectoryDataset], horizons: Sequence[int],
                   substeps: int, start: int = 0) -> EvalResult:
    """Reference rows from the generating field itself."""
    preds = [field_predictor(family.field(d.hidden[family.param_name]), substeps) for d in datasets]
    return evaluate(preds, [d.slice(start) for d in datasets], horizons)


def _quartiles(values: np.ndarray) -> tuple[float, float, float]:
    # quantiles that pick observed values stay defined when some runs diverged (inf)
    method = "linear" if np.all(np.isfinite(values)) else "inverted_cdf"
    q1, med, q3 = np.quantile(values, [0.25, 0.5, 0.75], method=method)
    return float(med), float(q1), float(q3)


@dataclass
class ResultTable:
    """Median and quartiles of rollout MSE per (method, hidden value, horizon).

    Rows pool every trajectory (and seed) that shares those keys; ``extra``
    columns (such as ``k`` or ``m`` in ablations) become part of the key.
    """

    extra_columns: tuple[str, ...] = ()
    rows: list = field(default_factory=list)
    _pool: dict = field(default_factory=dict, repr=False)

    def add(self, method: str, params: Sequence[float], result: EvalResult, **extra):
        if tuple(sorted(extra)) != tuple(sorted(self.extra_columns)):
            raise ConfigError(f"expected extra columns {self.extra_columns}")
        for p, row in zip(params, result.mse):
            for h, v in zip(result.horizons, row):
                if np.isnan(v):
                    continue
                key = (method, *(extra[c] for c in self.extra_columns), float(p), int(h))
                self._pool.setdefault(key, []).append(float(v))

    def finalize(self) -> list[dict]:
        self.rows = []
        for key in self._pool:
            vals = np.array(self._pool[key])
            med, q1, q3 = _quartiles(vals)
            row = {"method": key[0]}
            row.update(zip(self.extra_columns, key[1:-2]))
            row.update({"param": key[-2], "horizon": key[-1], "median": med, "q1": q1, "q3": q3,
                        "count": len(vals)})
            self.rows.append(row)
        return self.rows

    def columns(self) -> list[str]:
        return ["method", *self.extra_columns, "param", "horizon", "median", "q1", "q3", "count"]

    def lookup(self, method: str, param: float, horizon: int, **extra) -> dict:
        for r in self.rows or self.finalize():
            if (r["method"] == method and r["param"] == param and r["horizon"] == horizon
                    and all(r[c] == v for c, v in extra.items())):
                return r
        raise KeyError((method, param, horizon, extra))
