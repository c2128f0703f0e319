"""Configuration, the shared model skeleton and the minibatch training loop.

Every estimator (IGC, its biased ablation and the baselines) is a backbone
plus one or more small heads trained by Adam on a masked loss.  Keeping one
loop guarantees that two estimators with the same seed consume identical
random streams: the minibatch order comes from ``("shuffle", epoch)`` and
dropout masks from ``("dropout", epoch, batch)``.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .autodiff import AdamState, ParamStore, Tensor, adam_step, backward, clip_grad_norm, ops
from .autodiff.nn import Mlp
from .backbone import BackboneConfig, ConfigError, HistoryBatch, Scaler, build_backbone, make_batch
from .rng import stream

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Non-finite loss; carries where it happened."""

    def __init__(self, msg: str, epoch: int, batch: int, head: Optional[int]):
        super().__init__(f"{msg} (epoch={epoch}, batch={batch}, head={head})")
        self.epoch, self.batch, self.head = epoch, batch, head


@dataclass
class TrainConfig:
    tau: int = 1
    epochs: int = 20
    batch_size: int = 64
    lr: float = 5e-3
    lr_schedule: str = "constant"  # "constant" | "cosine" (decays to lr * lr_floor)
    lr_floor: float = 0.05
    clip_norm: float = 1.0
    head_hidden: int = 16
    seed: int = 0
    a_bar: Optional[list] = None  # (tau, d_a) binary; None means all ones
    a_policy: str = "fixed"  # "fixed" | "resampled"
    corruption_bias: float = 0.0  # raw outcome units, added to generated targets
    eps_pi: float = 0.01  # propensity clipping
    stabilized: Optional[bool] = None  # IPW; None means "on when tau >= 2"
    mc_draws: int = 100  # rollouts for Monte-Carlo G-computation
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)

    def validate(self, d_a: Optional[int] = None) -> None:
        if self.tau < 1:
            raise ConfigError("tau must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("need epochs >= 0, batch_size >= 1, lr > 0")
        if self.corruption_bias < 0:
            raise ConfigError("corruption_bias must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.a_policy not in ("fixed", "resampled"):
            raise ConfigError(f"unknown a_policy {self.a_policy!r}")
        if not 0 < self.eps_pi < 0.5:
            raise ConfigError("eps_pi must lie in (0, 0.5)")
        if self.a_bar is not None:
            a = np.asarray(self.a_bar, dtype=np.float64)
            if a.ndim != 2 or a.shape[0] != self.tau or (d_a is not None and a.shape[1] != d_a):
                raise ConfigError(f"a_bar must have shape (tau, d_a), got {a.shape}")
            if not np.all((a == 0) | (a == 1)):
                raise ConfigError("a_bar must be binary")
        self.backbone.validate()

    def a_bar_array(self, d_a: int) -> np.ndarray:
        if self.a_bar is None:
            return np.ones((self.tau, d_a))
        return np.asarray(self.a_bar, dtype=np.float64).reshape(self.tau, d_a)

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.a_bar is not None:
            d["a_bar"] = np.asarray(self.a_bar).astype(int).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class LossResult:
    loss: Optional[Tensor]  # None means "skip this batch"
    per_head: Optional[np.ndarray] = None


class SequenceModel:
    """Backbone + named heads over a fixed scaler and input dimensions."""

    kind = "base"

    def __init__(self, cfg: TrainConfig, d_y: int, d_x: int, d_a: int, scaler: Scaler, d_s: int = 0):
        cfg.validate(d_a)
        self.cfg = cfg
        # d_x counts covariates plus broadcast statics; the last d_s are static
        self.d_y, self.d_x, self.d_a, self.d_s = d_y, d_x, d_a, d_s
        self.scaler = scaler
        self.store = ParamStore(cfg.seed)
        self.backbone = build_backbone(self.store, cfg.backbone, d_y, d_x, d_a)
        self.loss_history: list = []
        self.skipped_batches = 0
        self.build_heads()

    def build_heads(self) -> None:
        raise NotImplementedError

    def head(self, name: str, d_in: int, d_out: int) -> Mlp:
        return Mlp(self.store, name, d_in, self.cfg.head_hidden, d_out)

    @classmethod
    def for_dataset(cls, dataset, cfg: TrainConfig) -> "SequenceModel":
        tr0 = dataset[0]
        scaler = Scaler.fit(dataset.trajectories)
        d_s = tr0.static.shape[0]
        return cls(cfg, tr0.Y.shape[1], tr0.X.shape[1] + d_s, tr0.A.shape[1], scaler, d_s)

    def encode(self, batch: HistoryBatch, training: bool = False, rng=None) -> Tensor:
        return self.backbone(batch, training=training, rng=rng)

    def batch_loss(self, batch: HistoryBatch, epoch: int, rng) -> LossResult:
        raise NotImplementedError

    def fit(self, dataset) -> list:
        return fit(self, dataset)

    def meta(self) -> dict:
        return {"kind": self.kind, "d_y": self.d_y, "d_x": self.d_x, "d_a": self.d_a, "d_s": self.d_s}


# -- shared pieces ----------------------------------------------------------

def valid_starts(lengths: np.ndarray, T: int, tau: int) -> np.ndarray:
    """(B, T - tau) mask of starts ``t`` with ``t + tau <= T_i - 1``."""
    t = np.arange(max(T - tau, 0))
    return (t[None, :] + tau <= lengths[:, None] - 1).astype(np.float64)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """``pred``/``target`` are (B, T', k, d_y); ``mask`` is (B, T', k)."""
    return ops.mse_loss(pred, target, mask[..., None])


def head_losses(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-head masked MSE, used only for diagnostics."""
    sq = ((pred - target) ** 2).mean(axis=-1) * mask
    with np.errstate(invalid="ignore", divide="ignore"):
        return sq.sum(axis=(0, 1)) / mask.sum(axis=(0, 1))


def trim(batch: HistoryBatch) -> HistoryBatch:
    L = int(batch.lengths.max())
    return HistoryBatch(batch.y[:, :L], batch.x[:, :L], batch.a[:, :L], batch.mask[:, :L], batch.lengths, rows=batch.rows)


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.epochs <= 1:
        return cfg.lr
    frac = epoch / (cfg.epochs - 1)
    return cfg.lr * (cfg.lr_floor + (1.0 - cfg.lr_floor) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def fit(model: SequenceModel, dataset, on_epoch: Optional[Callable] = None) -> list:
    """Train ``model`` in place; returns the per-epoch mean loss history."""
    cfg = model.cfg
    full = make_batch(dataset.trajectories if hasattr(dataset, "trajectories") else dataset, model.scaler)
    N = full.B
    params = list(model.store)
    state = AdamState(lr=cfg.lr)
    history = []
    for epoch in range(cfg.epochs):
        state.lr = learning_rate(cfg, epoch)
        order = stream(cfg.seed, "shuffle", epoch).permutation(N)
        losses = []
        for b, start in enumerate(range(0, N, cfg.batch_size)):
            batch = trim(full.take(order[start:start + cfg.batch_size]))
            rng = stream(cfg.seed, "dropout", epoch, b)
            model.store.zero_grad()
            res = model.batch_loss(batch, epoch, rng)
            if res.loss is None:
                model.skipped_batches += 1
                continue
            value = res.loss.item()
            if not np.isfinite(value):
                head = None
                if res.per_head is not None:
                    bad = np.flatnonzero(~np.isfinite(res.per_head))
                    head = int(bad[0]) if bad.size else None
                raise TrainingError("non-finite loss", epoch, b, head)
            backward(res.loss)
            clip_grad_norm(params, cfg.clip_norm)
            adam_step(params, state)
            losses.append(value)
        history.append(float(np.mean(losses)) if losses else float("nan"))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    model.loss_history = history
    log.debug("%s trained: final loss %s, skipped %d", model.kind, history[-1:] or None, model.skipped_batches)
    return history


def query_batch(model: SequenceModel, trajectories, ts) -> HistoryBatch:
    """Padded batch of each trajectory's prefix through its cut ``t``."""
    prefixes = [tr.prefix(int(t)) for tr, t in zip(trajectories, ts)]
    return make_batch(prefixes, model.scaler)
