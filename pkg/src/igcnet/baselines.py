"""Comparator estimators that differ from IGC only in how they adjust for
time-varying confounding.

* ``HistoryRegressor``: regresses ``Y_{t+tau}`` on ``(Z_t, A_{t:t+tau})``;
  no adjustment, so it targets the naive conditional.
* ``IpwRegressor``: regresses inverse-propensity weighted outcomes on
  ``Z_t`` with a propensity model fitted on a disjoint split.
* ``McGcompModel``: a Gaussian one-step density model rolled forward by
  Monte-Carlo sampling under the interventional sequence.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .autodiff import ContractError, Tensor, no_grad, ops
from .autodiff.nn import Linear
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


# -- history-adjusted regression -------------------------------------------

class HistoryRegressor(SequenceModel):
    kind = "history"

    def build_heads(self) -> None:
        # named like IGC's first head so both share init streams at tau = 1
        self.heads = [self.head("heads.0", self.cfg.backbone.d_z + self.cfg.tau * self.d_a, self.d_y)]

    def _treatments(self, a: np.ndarray, Tp: int) -> np.ndarray:
        tau = self.cfg.tau
        if tau == 1:
            return a[:, 0:Tp]
        return np.concatenate([a[:, k:k + Tp] for k in range(tau)], axis=-1)

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        tau = self.cfg.tau
        Tp = batch.T - tau
        if Tp <= 0:
            return LossResult(None)
        mask = np.repeat(valid_starts(batch.lengths, batch.T, tau)[:, :, None], 1, axis=2)
        if mask.sum() == 0:
            return LossResult(None)
        targets = np.zeros((batch.B, Tp, 1, self.d_y))
        targets[:, :, 0] = batch.y[:, tau:tau + Tp]
        Z = self.encode(batch, training=True, rng=rng)
        z = ops.slice_(Z, (slice(None), slice(0, Tp)))
        pred = ops.stack([self.heads[0](ops.concat([z, self._treatments(batch.a, Tp)], axis=-1))], axis=2)
        return LossResult(masked_mse(pred, targets, mask), head_losses(pred.values, targets, mask))

    def predict_batch(self, trajectories, ts, a_seqs, training: bool = False, rng=None) -> np.ndarray:
        """``a_seqs`` is (n, tau, d_a); the whole sequence is consumed."""
        a_seqs = np.asarray(a_seqs, dtype=np.float64)
        if a_seqs.ndim != 3 or a_seqs.shape[1:] != (self.cfg.tau, self.d_a):
            raise ContractError(f"a_seqs must be (n, {self.cfg.tau}, {self.d_a}), got {a_seqs.shape}")
        batch = query_batch(self, trajectories, ts)
        with no_grad():
            Z = self.encode(batch, training=training, rng=rng).values
            z = Z[np.arange(batch.B), np.asarray(ts)]
            inp = np.concatenate([z, a_seqs.reshape(len(z), -1)], axis=-1)
            out = self.heads[0](inp).values
        return self.scaler.y_inverse(out)


def train_history_regressor(dataset, cfg: TrainConfig) -> HistoryRegressor:
    model = HistoryRegressor.for_dataset(dataset, cfg)
    fit(model, dataset)
    return model


# -- propensity -----------------------------------------------------------

class PropensityModel(SequenceModel):
    """``pi(A_s = 1 | H_s)`` per treatment dimension, dimensions treated as
    conditionally independent."""

    kind = "propensity"

    def build_heads(self) -> None:
        self.out = Linear(self.store, "prop", self.cfg.backbone.d_z, self.d_a)

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        logits = self.out(self.encode(batch, training=True, rng=rng))
        return LossResult(ops.bce_with_logits(logits, batch.a, batch.mask[..., None]))

    def proba(self, batch: HistoryBatch) -> np.ndarray:
        """Clipped ``P(A_s = 1 | H_s)``, (B, T, d_a)."""
        eps = self.cfg.eps_pi
        with no_grad():
            p = expit(self.out(self.encode(batch)).values)
        return np.clip(p, eps, 1.0 - eps)

    def proba_dataset(self, dataset) -> list:
        batch = make_batch(list(dataset), self.scaler)
        p = self.proba(batch)
        return [p[i, : tr.T] for i, tr in enumerate(dataset)]

    def calibration(self, dataset, bins: int = 10) -> list:
        """Rows ``(decile, mean predicted, empirical rate, count)`` pooled over dims."""
        p = np.concatenate([q.reshape(-1) for q in self.proba_dataset(dataset)])
        a = np.concatenate([tr.A.reshape(-1) for tr in dataset])
        edges = np.quantile(p, np.linspace(0, 1, bins + 1))
        idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, bins - 1)
        rows = []
        for b in range(bins):
            sel = idx == b
            if sel.any():
                rows.append((b, float(p[sel].mean()), float(a[sel].mean()), int(sel.sum())))
        return rows


def fit_propensity(dataset, cfg: TrainConfig) -> PropensityModel:
    A = np.concatenate([tr.A for tr in dataset])
    rate = A.mean(axis=0)
    if np.any(rate == 0) or np.any(rate == 1):
        warnings.warn("degenerate treatment labels: some dimension is constant", RuntimeWarning)
    model = PropensityModel.for_dataset(dataset, cfg)
    fit(model, dataset)
    return model


def sequence_weights(A: np.ndarray, P: np.ndarray, a_bar: np.ndarray) -> np.ndarray:
    """``W_t = prod_d 1{A_{t+d} = a_d} / pi(a_d | H_{t+d})`` for every start.

    ``A`` and ``P`` are (T, d_a) for one trajectory; returns (max(T - tau, 0),).
    """
    tau = a_bar.shape[0]
    Tp = max(A.shape[0] - tau, 0)
    W = np.ones(Tp)
    for d in range(tau):
        a_d = a_bar[d]
        match = np.all(A[d:d + Tp] == a_d, axis=-1)
        pi = np.prod(np.where(a_d == 1, P[d:d + Tp], 1.0 - P[d:d + Tp]), axis=-1)
        W = W * match / pi
    return W


# -- IPW pseudo-outcome regression ----------------------------------------

class IpwRegressor(SequenceModel):
    kind = "ipw"

    def build_heads(self) -> None:
        self.heads = [self.head("heads.0", self.cfg.backbone.d_z, self.d_y)]
        self.weights: Optional[list] = None
        self.w_scale = 1.0

    @property
    def stabilized(self) -> bool:
        s = self.cfg.stabilized
        return self.cfg.tau >= 2 if s is None else bool(s)

    def prepare(self, dataset, propensity: PropensityModel) -> None:
        a_bar = self.cfg.a_bar_array(self.d_a)
        probs = propensity.proba_dataset(dataset)
        self.weights = [sequence_weights(tr.A, p, a_bar) for tr, p in zip(dataset, probs)]
        flat = np.concatenate(self.weights) if self.weights else np.zeros(0)
        self.w_scale = float(flat.mean()) if self.stabilized and flat.size and flat.mean() > 0 else 1.0

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        if self.weights is None:
            raise ContractError("call prepare() with a fitted propensity model first")
        tau = self.cfg.tau
        Tp = batch.T - tau
        if Tp <= 0:
            return LossResult(None)
        W = np.zeros((batch.B, Tp))
        for i, r in enumerate(batch.rows):
            w = self.weights[r][:Tp]
            W[i, : len(w)] = w
        W /= self.w_scale
        mask = valid_starts(batch.lengths, batch.T, tau)[:, :, None]
        if not np.any(W * mask[..., 0] > 0):
            return LossResult(None)  # no matched sequence in this batch
        targets = (W[..., None] * batch.y[:, tau:tau + Tp])[:, :, None]
        Z = self.encode(batch, training=True, rng=rng)
        pred = ops.stack([self.heads[0](ops.slice_(Z, (slice(None), slice(0, Tp))))], axis=2)
        return LossResult(masked_mse(pred, targets, mask), head_losses(pred.values, targets, mask))

    def predict_batch(self, trajectories, ts, a_seqs=None, training: bool = False, rng=None) -> np.ndarray:
        batch = query_batch(self, trajectories, ts)
        with no_grad():
            Z = self.encode(batch, training=training, rng=rng).values
            out = self.heads[0](Z[np.arange(batch.B), np.asarray(ts)]).values
        return self.scaler.y_inverse(out)


def ipw_regress(dataset, propensity: PropensityModel, cfg: TrainConfig) -> IpwRegressor:
    model = IpwRegressor.for_dataset(dataset, cfg)
    model.prepare(dataset, propensity)
    fit(model, dataset)
    return model


def fit_ipw(dataset, cfg: TrainConfig) -> IpwRegressor:
    """Honest split: first half fits the propensity, second half the outcome."""
    first, second = dataset.split([0.5, 0.5])
    prop = fit_propensity(first, cfg)
    model = ipw_regress(second, prop, cfg)
    model.propensity = prop
    return model


# -- Monte-Carlo G-computation --------------------------------------------

LOGVAR_MIN, LOGVAR_MAX = -9.0, 3.0


class McGcompModel(SequenceModel):
    """Gaussian density over the next ``(Y, X_dynamic)`` given ``(Z_s, A_s)``."""

    kind = "mc_gcomp"

    def build_heads(self) -> None:
        self.d_next = self.d_y + self.d_x - self.d_s
        self.heads = [self.head("density", self.cfg.backbone.d_z + self.d_a, 2 * self.d_next)]

    def _density(self, z, a) -> tuple:
        out = self.heads[0](ops.concat([z, a], axis=-1))
        n = self.d_next
        mu = ops.slice_(out, (Ellipsis, slice(0, n)))
        raw = ops.slice_(out, (Ellipsis, slice(n, 2 * n)))
        logvar = ops.add(ops.mul(ops.sigmoid(raw), LOGVAR_MAX - LOGVAR_MIN), LOGVAR_MIN)
        return mu, logvar

    def _next_state(self, batch: HistoryBatch) -> np.ndarray:
        dyn = self.d_x - self.d_s
        return np.concatenate([batch.y[:, 1:], batch.x[:, 1:, :dyn]], axis=-1)

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        if batch.T < 2:
            return LossResult(None)
        mask = batch.mask[:, 1:]
        if mask.sum() == 0:
            return LossResult(None)
        Z = self.encode(batch, training=True, rng=rng)
        z = ops.slice_(Z, (slice(None), slice(0, batch.T - 1)))
        mu, logvar = self._density(z, batch.a[:, :-1])
        target = self._next_state(batch)
        diff = ops.sub(mu, target)
        nll = ops.add(logvar, ops.mul(ops.mul(diff, diff), ops.exp(ops.neg(logvar))))
        w = np.broadcast_to(mask[..., None], nll.shape)
        loss = ops.mul(ops.sum_(ops.mul(nll, w)), 0.5 / w.sum())
        return LossResult(loss)

    def predict_batch(self, trajectories, ts, a_seqs, draws: Optional[int] = None, seed: int = 0) -> np.ndarray:
        """Roll ``draws`` sampled futures per query under ``a_seqs`` (n, tau, d_a)."""
        K = self.cfg.mc_draws if draws is None else int(draws)
        if K < 1:
            raise ContractError("need at least one Monte-Carlo draw")
        a_seqs = np.asarray(a_seqs, dtype=np.float64)
        n, tau = a_seqs.shape[0], a_seqs.shape[1]
        ts = np.asarray(ts)
        base = query_batch(self, trajectories, ts)
        L = int(ts.max()) + tau
        B = n * K
        rep = np.repeat(np.arange(n), K)
        t_rows = ts[rep]

        def pad(v):
            out = np.zeros((B, L) + v.shape[2:])
            m = min(L, v.shape[1])
            out[:, :m] = v[rep, :m]
            return out

        y, x, a, mask = pad(base.y), pad(base.x), pad(base.a), pad(base.mask)
        rows = np.arange(B)
        rng = stream(seed, "mc-gcomp", n, K)
        dyn = self.d_x - self.d_s
        with no_grad():
            for k in range(tau):
                a[rows, t_rows + k] = a_seqs[rep, k]
                lengths = t_rows + k + 1
                batch = HistoryBatch(y, x, a, (np.arange(L)[None, :] < lengths[:, None]).astype(float), lengths)
                Z = self.encode(batch).values[rows, t_rows + k]
                mu, logvar = self._density(Z, a_seqs[rep, k])
                mu, sd = mu.values, np.exp(0.5 * logvar.values)
                if k == tau - 1:
                    final = mu[:, : self.d_y]
                    break
                sample = mu + sd * rng.standard_normal(mu.shape)
                y[rows, t_rows + k + 1] = sample[:, : self.d_y]
                if dyn:
                    x[rows, t_rows + k + 1, :dyn] = sample[:, self.d_y:]
                if self.d_s:
                    x[rows, t_rows + k + 1, dyn:] = x[rows, t_rows, dyn:]
        est = final.reshape(n, K, self.d_y).mean(axis=1)
        return self.scaler.y_inverse(est)


def mc_gcomp(dataset, cfg: TrainConfig) -> McGcompModel:
    model = McGcompModel.for_dataset(dataset, cfg)
    fit(model, dataset)
    return model
