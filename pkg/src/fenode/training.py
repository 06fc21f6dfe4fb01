"""Offline training of the basis (and average) networks.

One update draws ``functions_per_update`` datasets and ``batch_size`` tuples
from each.  For every drawn function the coefficients are estimated from its
own tuples by the inner-product rule and the loss is the squared error of the
coefficient-weighted basis deltas.  Gradients flow through both the prediction
and the coefficient estimate, and are accumulated over all drawn functions
before one clipped Adam step.

Residuals mode alternates two losses: the average network is first fit to the
raw deltas, then the basis is trained on ``delta - F_avg delta`` with F_avg
held fixed (no basis loss reaches it).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import TrajectoryDataset
from .encoder import (EncoderModel, _gram, basis_backward, basis_forward, init_model, mean_offdiagonal)
from .errors import ConfigError, DivergenceError, NumericError
from .integrate import IntegrationSpec, VectorField, rk4_backward, rk4_delta, rk4_forward
from .nn import adam_init, adam_step, clip_grad_norm, global_norm
from .systems import fit_normalizer

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 1000
    lr: float = 1e-3
    clip: float = 1.0
    functions_per_update: int = 50
    batch_size: int = 100
    volume: float = 1.0
    substeps: int = 1
    seed: int = 0
    coef_split: bool = False
    gram_every: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.clip <= 0 or self.volume <= 0:
            raise ConfigError("lr, clip and volume must be positive")
        if self.functions_per_update < 1 or self.batch_size < 2 or self.steps < 0 or self.substeps < 1:
            raise ConfigError("functions_per_update >= 1, batch_size >= 2, steps >= 0, substeps >= 1 required")


@dataclass
class Arch:
    mode: str = "fe_node"
    k: int = 11
    hidden: tuple[int, ...] = (64, 64)
    normalize: str = "state"   # "rate": scale by the std of dx/dt, see fit_normalizer

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        if self.k < 1:
            raise ConfigError(f"basis count k must be >= 1, got {self.k}")
        if self.normalize not in ("state", "rate"):
            raise ConfigError(f"unknown normalize option {self.normalize!r}")


@dataclass
class _Batch:
    z: np.ndarray        # (F, B, n)
    w: np.ndarray        # (F, B, p)
    dt: np.ndarray       # (F, B)
    target: np.ndarray   # (F, B, n) normalized deltas
    hidden: np.ndarray   # (F, h) normalized hidden parameters

    def rows(self):
        F, B, n = self.z.shape
        return (self.z.reshape(F * B, n), self.w.reshape(F * B, -1), self.dt.reshape(F * B))


class _Corpus:
    """Pre-normalized copy of the training datasets for fast batch sampling."""

    def __init__(self, datasets: Sequence[TrajectoryDataset], model: EncoderModel):
        n = model.normalizer
        self.z = [n.states(d.states) for d in datasets]
        self.w = [n.controls(d.controls) for d in datasets]
        self.dt = [d.dts for d in datasets]
        self.target = [n.deltas(d.deltas) for d in datasets]
        self.hidden = [n.hidden(d.hidden_vector) for d in datasets]
        self.min_len = min(len(d) for d in datasets)

    def sample(self, rng: np.random.Generator, n_funcs: int, batch: int) -> _Batch:
        F = min(n_funcs, len(self.z))
        B = min(batch, self.min_len)
        idx = rng.choice(len(self.z), size=F, replace=False)
        rows = [rng.choice(len(self.z[i]), size=B, replace=False) for i in idx]
        return _Batch(
            np.stack([self.z[i][r] for i, r in zip(idx, rows)]),
            np.stack([self.w[i][r] for i, r in zip(idx, rows)]),
            np.stack([self.dt[i][r] for i, r in zip(idx, rows)]),
            np.stack([self.target[i][r] for i, r in zip(idx, rows)]),
            np.stack([self.hidden[i] for i in idx]),
        )


def _basis_rows(model: EncoderModel, batch: _Batch, substeps: int):
    """Basis deltas for every row of the batch, shaped ``(k, F, B, n)``, plus tape."""
    F, B, n = batch.z.shape
    z, w, dt = batch.rows()
    hidden = None
    if model.mode == "oracle_baseline":
        # per-row hidden inputs: broadcast each function's parameters over its rows
        hidden = np.repeat(batch.hidden, B, axis=0) * model.normalizer.hidden_std + model.normalizer.hidden_mean
    G, tape = basis_forward(model, z, w, dt, substeps, hidden, tape=True)
    return G.reshape(model.k, F, B, n), tape


def fe_loss_and_grad(model: EncoderModel, batch: _Batch, residual: np.ndarray | None,
                     V: float, substeps: int = 1, split: bool = False):
    """Loss and basis-parameter gradient for one batch of functions.

    ``residual`` replaces the raw targets (residuals mode).  Returns
    ``(loss, grad (k, P), coefficients (F, k))``.
    """
    R = batch.target if residual is None else residual
    G, tape = _basis_rows(model, batch, substeps)
    k, F, B, n = G.shape
    if not model.uses_coefficients:
        e = R - G[0]
        loss = float(np.sum(e * e) / (F * B))
        gG = (-2.0 / (F * B)) * e[None]
        coeffs = np.ones((F, 1))
    else:
        if split:
            h = B // 2
            ex, q = slice(0, h), slice(h, B)
        else:
            ex = q = slice(0, B)
        R_ex, G_ex = R[:, ex], G[:, :, ex]
        R_q, G_q = R[:, q], G[:, :, q]
        b_ex, b_q = R_ex.shape[1], R_q.shape[1]
        coeffs = (V / b_ex) * np.einsum("fbn,kfbn->fk", R_ex, G_ex)
        pred = np.einsum("fk,kfbn->fbn", coeffs, G_q)
        e = R_q - pred
        loss = float(np.sum(e * e) / (F * b_q))
        gpred = (-2.0 / (F * b_q)) * e
        gc = np.einsum("fbn,kfbn->fk", gpred, G_q)
        gG = np.zeros_like(G)
        gG[:, :, q] += np.einsum("fk,fbn->kfbn", coeffs, gpred)
        gG[:, :, ex] += (V / b_ex) * np.einsum("fk,fbn->kfbn", gc, R_ex)
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    grad = basis_backward(model, tape, gG.reshape(k, F * B, n))
    return loss, grad, coeffs


def avg_loss_and_grad(model: EncoderModel, batch: _Batch, substeps: int = 1):
    """Squared error of the average network against the raw normalized deltas."""
    F, B, n = batch.z.shape
    z, w, dt = batch.rows()
    fld = model.avg_network()
    A, tape = rk4_forward(fld, z, w, IntegrationSpec(dt, substeps))
    e = batch.target.reshape(F * B, n) - A
    loss = float(np.sum(e * e) / (F * B))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss")
    gp, _, _ = rk4_backward(fld, tape, (-2.0 / (F * B)) * e)
    return loss, gp


def _avg_deltas(model: EncoderModel, batch: _Batch, substeps: int) -> np.ndarray:
    F, B, n = batch.z.shape
    z, w, dt = batch.rows()
    return rk4_delta(model.avg_network(), z, w, IntegrationSpec(dt, substeps)).reshape(F, B, n)


def probe_offdiagonal(model: EncoderModel, probe: _Batch, V: float, substeps: int = 1) -> float:
    """Mean |off-diagonal| of the normalized Gram matrix over a fixed probe batch."""
    G, _ = _basis_rows(model, probe, substeps)
    k = G.shape[0]
    return mean_offdiagonal(_gram(G.reshape(k, -1, G.shape[-1]), V))


def train(datasets: Sequence[TrajectoryDataset], cfg: TrainConfig, arch: Arch,
          history: list | None = None, fixed_avg: VectorField | None = None,
          model: EncoderModel | None = None) -> EncoderModel:
    """Fit a model of ``arch.mode`` on ``datasets``; appends per-step rows to ``history``."""
    datasets = list(datasets)
    if len(datasets) < 2:
        raise ConfigError("training needs at least two datasets")
    dims = {(d.state_dim, d.control_dim) for d in datasets}
    if len(dims) != 1:
        raise ConfigError("all datasets must share state and control dimensions")
    n, p = dims.pop()
    if model is None:
        norm = fit_normalizer(datasets, scale=arch.normalize)
        hidden_dim = len(datasets[0].hidden_vector)
        model = init_model(arch.mode, n, p, arch.k, arch.hidden, norm, seed=cfg.seed,
                           hidden_dim=hidden_dim, volume=cfg.volume, fixed_avg=fixed_avg)
    elif (model.state_dim, model.control_dim) != (n, p):
        raise ConfigError("model dimensions do not match the datasets")
    model.config = {"train": dict(vars(cfg)), "arch": {"mode": arch.mode, "k": model.k,
                                                       "hidden": list(model.hidden_sizes),
                                                       "normalize": arch.normalize}}
    corpus = _Corpus(datasets, model)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    probe = corpus.sample(np.random.default_rng(np.random.SeedSequence([cfg.seed, 2])),
                          cfg.functions_per_update, cfg.batch_size)
    V = model.volume
    basis_opt = adam_init(model.basis, cfg.lr)
    train_avg = model.mode == "fe_node_residuals" and model.avg is not None
    avg_opt = adam_init(model.avg, cfg.lr) if train_avg else None

    def log_gram(step):
        if cfg.gram_every and model.uses_coefficients and model.mode != "fe_direct" and history is not None:
            if step % cfg.gram_every == 0 or step == cfg.steps:
                history.append({"step": step, "gram_offdiag": probe_offdiagonal(model, probe, V, cfg.substeps)})

    log_gram(0)
    for step in range(cfg.steps):
        batch = corpus.sample(rng, cfg.functions_per_update, cfg.batch_size)
        row = {"step": step + 1}
        try:
            residual = None
            if model.mode == "fe_node_residuals":
                if train_avg:
                    loss1, g_avg = avg_loss_and_grad(model, batch, cfg.substeps)
                    (g_avg,) = clip_grad_norm([g_avg], cfg.clip)
                    avg_opt, model.avg = adam_step(avg_opt, model.avg, g_avg)
                    row["avg_loss"] = loss1
                residual = batch.target - _avg_deltas(model, batch, cfg.substeps)
            loss, grad, _ = fe_loss_and_grad(model, batch, residual, V, cfg.substeps, cfg.coef_split)
        except NumericError as err:
            raise DivergenceError(f"training diverged: {err}", step + 1) from err
        row["loss"] = loss
        row["grad_norm"] = global_norm([grad])
        (grad,) = clip_grad_norm([grad], cfg.clip)
        basis_opt, model.basis = adam_step(basis_opt, model.basis, grad)
        if history is not None:
            history.append(row)
        log_gram(step + 1)
        if (step + 1) % 100 == 0:
            log.info("step %d loss %.3e", step + 1, loss)
    return model


def train_residuals(datasets: Sequence[TrajectoryDataset], cfg: TrainConfig, arch: Arch,
                    history: list | None = None, fixed_avg: VectorField | None = None) -> EncoderModel:
    """Residuals method; ``fixed_avg`` (raw units) skips learning the average function."""
    arch = Arch("fe_node_residuals", arch.k, arch.hidden)
    return train(datasets, cfg, arch, history, fixed_avg)
