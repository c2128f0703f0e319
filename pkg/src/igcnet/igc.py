"""Iterative G-computation: detached pseudo-outcome generation, pooled
regression on factual histories, CAPO prediction, the biased ablation and
MC-dropout uncertainty.

Shapes: a batch of B trajectories padded to T steps gives T' = T - tau start
positions.  Head ``delta`` reads ``(Z_{t+delta}, A_{t+delta})`` and is
trained on target ``G_{t+delta+1}``; the last head's target is the factual
``Y_{t+tau}``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractError, Tensor, no_grad, ops
from .backbone import HistoryBatch, make_batch
from .rng import stream
from .training import (
    LossResult,
    SequenceModel,
    TrainConfig,
    fit,
    head_losses,
    masked_mse,
    query_batch,
    valid_starts,
)


@dataclass
class PseudoOutcomes:
    """Regression targets in standardized units.

    ``targets[i, t, d]`` is the target of head ``d`` at start ``t``, i.e.
    ``G_{t+d+1}``; ``targets[..., tau-1, :]`` is the factual ``Y_{t+tau}``.
    Plain arrays, so they can never join a differentiation graph.
    """

    targets: np.ndarray  # (B, T', tau, d_y)
    mask: np.ndarray  # (B, T', tau)

    @property
    def detached(self) -> bool:
        return True


class IgcModel(SequenceModel):
    kind = "igc"

    def build_heads(self) -> None:
        d_in = self.cfg.backbone.d_z + self.d_a
        self.heads = [self.head(f"heads.{d}", d_in, self.d_y) for d in range(self.cfg.tau)]

    @property
    def tau(self) -> int:
        return self.cfg.tau

    # -- training ---------------------------------------------------------

    def a_bar_for_epoch(self, epoch: int) -> np.ndarray:
        if self.cfg.a_policy == "resampled":
            return stream(self.cfg.seed, "a_bar", epoch).integers(0, 2, (self.tau, self.d_a)).astype(np.float64)
        return self.cfg.a_bar_array(self.d_a)

    def factual_predictions(self, batch: HistoryBatch, training: bool, rng) -> Tensor:
        """Head ``d`` applied to factual ``(Z_{t+d}, A_{t+d})``: (B, T', tau, d_y)."""
        Tp = batch.T - self.tau
        Z = self.encode(batch, training=training, rng=rng)
        preds = []
        for d, head in enumerate(self.heads):
            z = ops.slice_(Z, (slice(None), slice(d, d + Tp)))
            preds.append(head(ops.concat([z, batch.a[:, d:d + Tp]], axis=-1)))
        return ops.stack(preds, axis=2)

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        if batch.T - self.tau <= 0:
            return LossResult(None)
        pseudo = generate_batch(self, batch, self.a_bar_for_epoch(epoch), self.corruption_std())
        if pseudo.mask.sum() == 0:
            return LossResult(None)
        pred = self.factual_predictions(batch, True, rng)
        loss = masked_mse(pred, pseudo.targets, pseudo.mask)
        return LossResult(loss, head_losses(pred.values, pseudo.targets, pseudo.mask))

    def corruption_std(self) -> float:
        """Corruption bias converted to standardized outcome units."""
        return float(self.cfg.corruption_bias) / float(np.mean(self.scaler.y_std))

    # -- inference --------------------------------------------------------

    def predict_batch(self, trajectories: Sequence, ts: Sequence[int], a_first: np.ndarray,
                      training: bool = False, rng=None) -> np.ndarray:
        """``g_0(z(h_t), a_t)`` for many queries; ``a_first`` is (n, d_a). Raw units."""
        batch = query_batch(self, trajectories, ts)
        with no_grad():
            Z = self.encode(batch, training=training, rng=rng).values
            z = Z[np.arange(batch.B), np.asarray(ts)]
            out = self.heads[0](np.concatenate([z, np.asarray(a_first, dtype=np.float64)], axis=-1)).values
        return self.scaler.y_inverse(out)


def _check_a_seq(model, a_seq) -> np.ndarray:
    a = np.asarray(a_seq, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(-1, model.d_a)
    if a.shape != (model.cfg.tau, model.d_a):
        raise ContractError(f"a_seq must have shape ({model.cfg.tau}, {model.d_a}), got {a.shape}")
    return a


def generate_batch(model: IgcModel, batch: HistoryBatch, a_bar: np.ndarray, bias: float = 0.0) -> PseudoOutcomes:
    """Generation step for every valid start in ``batch``, detached and in eval mode.

    One encoder pass per start ``t`` with ``A_t .. A_{t+tau-2}`` replaced by
    ``a_bar[:tau-1]`` yields ``Z^a_{t+d}`` for all ``d`` at once, since the
    encoder is causal.  ``bias`` (standardized units) is added to generated
    entries only, never to the factual final target.
    """
    tau, B, T = model.tau, batch.B, batch.T
    Tp = T - tau
    if Tp <= 0:
        raise ContractError(f"horizon tau={tau} overflows a batch of length {T}")
    mask = np.repeat(valid_starts(batch.lengths, T, tau)[:, :, None], tau, axis=2)
    targets = np.zeros((B, Tp, tau, model.d_y))
    targets[:, :, tau - 1] = batch.y[:, tau:tau + Tp]
    if tau == 1:
        return PseudoOutcomes(targets, mask)
    rows, starts = np.nonzero(mask[:, :, 0])
    if rows.size == 0:
        return PseudoOutcomes(targets, mask)
    L = int(starts.max()) + tau  # steps needed: up to t + tau - 1
    a = batch.a[rows, :L].copy()
    for k in range(tau - 1):
        a[np.arange(rows.size), starts + k] = a_bar[k]
    sub = HistoryBatch(batch.y[rows, :L], batch.x[rows, :L], a, batch.mask[rows, :L], np.minimum(batch.lengths[rows], L))
    with no_grad():
        Z = model.encode(sub, training=False).values
        for d in range(1, tau):
            z = Z[np.arange(rows.size), starts + d]
            inp = np.concatenate([z, np.broadcast_to(a_bar[d], (rows.size, model.d_a))], axis=-1)
            targets[rows, starts, d - 1] = model.heads[d](inp).values + bias
    return PseudoOutcomes(targets, mask)


def generation_step(model: IgcModel, trajectory, t: int, a_bar, corruption_bias: float = 0.0) -> np.ndarray:
    """Pseudo-outcomes ``G_{t+1} .. G_{t+tau}`` for one trajectory, raw units, (tau, d_y)."""
    a_bar = _check_a_seq(model, a_bar)
    if t < 0 or t + model.tau > trajectory.T - 1:
        raise ContractError(f"start {t} with tau={model.tau} overflows length {trajectory.T}")
    batch = make_batch([trajectory], model.scaler)
    bias = float(corruption_bias) / float(np.mean(model.scaler.y_std))
    pseudo = generate_batch(model, batch, a_bar, bias)
    return model.scaler.y_inverse(pseudo.targets[0, t])


def learning_loss(model: IgcModel, batch: HistoryBatch, pseudo: PseudoOutcomes, training: bool = True, rng=None) -> Tensor:
    """Masked mean squared error of all heads against (constant) pseudo-outcomes."""
    Tp = batch.T - model.tau
    if pseudo.targets.shape[:3] != (batch.B, Tp, model.tau):
        raise ContractError(f"pseudo-outcomes shaped {pseudo.targets.shape[:3]}, expected {(batch.B, Tp, model.tau)}")
    if training and rng is None:
        rng = stream(model.cfg.seed, "dropout-eval")
    return masked_mse(model.factual_predictions(batch, training, rng), pseudo.targets, pseudo.mask)


def train(model: IgcModel, dataset) -> list:
    """Algorithm loop: per minibatch generate (detached), regress, one Adam step."""
    _check_lengths(dataset, model.tau)
    return fit(model, dataset)


def _check_lengths(dataset, tau: int) -> None:
    if any(tr.T < tau + 1 for tr in dataset):
        raise ContractError(f"trajectories need length >= tau + 1 = {tau + 1}")


def predict_capo(model: IgcModel, trajectory, t: int, a_seq) -> np.ndarray:
    """CAPO estimate for one query; only ``a_seq[0]`` is consumed."""
    a = _check_a_seq(model, a_seq)
    return model.predict_batch([trajectory], [t], a[:1])[0]


def predict_queries(model, dataset, queries) -> np.ndarray:
    """Predictions (n, d_y) for a list of CapoQuery against ``dataset``."""
    by_id = dataset.by_id()
    trajs = [by_id[q.trajectory_id] for q in queries]
    ts = [q.t for q in queries]
    if isinstance(model, IgcModel):
        a = np.stack([_check_a_seq(model, q.a_seq)[0] for q in queries])
        return model.predict_batch(trajs, ts, a)
    return model.predict_batch(trajs, ts, np.stack([q.a_seq for q in queries]))


# -- biased ablation --------------------------------------------------------

class BiasedIgcModel(IgcModel):
    """Same heads and plumbing, but every head regresses the factual
    ``Y_{t+tau}`` directly.  To keep head ``d`` specific to the chosen
    sequence, its samples are restricted to trajectories whose factual
    treatments ``A_{t+d+1} .. A_{t+tau-1}`` equal ``a_bar[d+1:]``.  Head 0
    therefore targets the naive conditional
    ``E[Y_{t+tau} | H_t, A_t, A_{t+1:t+tau} = a_bar_{1:}]``."""

    kind = "igc_biased"

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        tau, Tp = self.tau, batch.T - self.tau
        if Tp <= 0:
            return LossResult(None)
        mask = biased_mask(batch, self.a_bar_for_epoch(epoch), tau)
        if mask.sum() == 0:
            return LossResult(None)
        targets = np.repeat(batch.y[:, tau:tau + Tp][:, :, None], tau, axis=2)
        pred = self.factual_predictions(batch, True, rng)
        return LossResult(masked_mse(pred, targets, mask), head_losses(pred.values, targets, mask))


def biased_mask(batch: HistoryBatch, a_bar: np.ndarray, tau: int) -> np.ndarray:
    """(B, T', tau): head ``d`` keeps start ``t`` only if ``A_{t+k} = a_bar[k]`` for all ``k > d``."""
    Tp = batch.T - tau
    mask = np.repeat(valid_starts(batch.lengths, batch.T, tau)[:, :, None], tau, axis=2)
    for d in range(tau):
        for k in range(d + 1, tau):
            mask[:, :, d] *= np.all(batch.a[:, k:k + Tp] == a_bar[k], axis=-1)
    return mask


def train_biased_ablation(model: BiasedIgcModel, dataset) -> list:
    _check_lengths(dataset, model.tau)
    return fit(model, dataset)


# -- uncertainty ------------------------------------------------------------

@dataclass
class Uncertainty:
    mean: np.ndarray
    std: np.ndarray
    quantiles: dict


def predict_with_uncertainty(model: IgcModel, trajectory, t: int, a_seq, K: int = 100,
                             quantiles: Sequence[float] = (0.05, 0.5, 0.95), seed: int = 0) -> Uncertainty:
    """MC dropout: ``K`` forward passes with dropout active."""
    if K < 2:
        raise ContractError("need K >= 2 draws")
    a = _check_a_seq(model, a_seq)
    if model.cfg.backbone.dropout == 0:
        warnings.warn("dropout rate is 0; predictive spread is degenerate", RuntimeWarning)
        mean = predict_capo(model, trajectory, t, a)
        return Uncertainty(mean, np.zeros_like(mean), {q: mean.copy() for q in quantiles})
    trajs = [trajectory] * K
    draws = model.predict_batch(trajs, [t] * K, np.repeat(a[:1], K, axis=0), training=True,
                                rng=stream(seed, "mc-dropout", trajectory.id, t))
    return Uncertainty(draws.mean(axis=0), draws.std(axis=0, ddof=1),
                       {q: np.quantile(draws, q, axis=0) for q in quantiles})
