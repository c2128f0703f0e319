"""History encoders: an LSTM and a causal multi-input transformer.

Both map a padded history batch to hidden states ``Z`` of shape (B, T, d_z)
where ``Z[:, s]`` depends only on inputs at steps ``<= s``.  The input at
step ``s`` is ``(Y_s, X_s, A_{s-1})`` with ``A_{-1} = 0``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .autodiff import ContractError, ParamStore, Tensor, no_grad, ops
from .autodiff.nn import Linear, maybe_dropout


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    kind: str = "lstm"  # "lstm" | "transformer"
    d_h: int = 16
    d_z: int = 16
    dropout: float = 0.1
    n_blocks: int = 1
    n_heads: int = 1
    l_max: int = 15
    d_ff: int = 16
    ln_eps: float = 1e-5

    def validate(self) -> None:
        if self.kind not in ("lstm", "transformer"):
            raise ConfigError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "transformer" and self.d_h % self.n_heads:
            raise ConfigError(f"d_h={self.d_h} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- preprocessing ----------------------------------------------------------

@dataclass
class Scaler:
    """Per-dimension standardization of outcomes, covariates and statics."""

    y_mean: np.ndarray
    y_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    s_mean: np.ndarray
    s_std: np.ndarray

    @classmethod
    def fit(cls, trajectories: Sequence) -> "Scaler":
        Y = np.concatenate([tr.Y for tr in trajectories])
        X = np.concatenate([tr.X for tr in trajectories])
        S = np.stack([tr.static for tr in trajectories])

        def stats(M):
            if M.shape[1] == 0:
                return np.zeros(0), np.ones(0)
            sd = M.std(axis=0)
            return M.mean(axis=0), np.where(sd > 1e-8, sd, 1.0)

        (ym, ys), (xm, xs), (sm, ss) = stats(Y), stats(X), stats(S)
        return cls(ym, ys, xm, xs, sm, ss)

    @classmethod
    def identity(cls, d_y: int, d_x: int, d_s: int = 0) -> "Scaler":
        return cls(np.zeros(d_y), np.ones(d_y), np.zeros(d_x), np.ones(d_x), np.zeros(d_s), np.ones(d_s))

    def y(self, Y):
        return (Y - self.y_mean) / self.y_std

    def y_inverse(self, Ys):
        return Ys * self.y_std + self.y_mean

    def x(self, X):
        return (X - self.x_mean) / self.x_std

    def s(self, S):
        return (S - self.s_mean) / self.s_std

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(**{k: np.asarray(v, dtype=np.float64) for k, v in d.items()})


@dataclass
class HistoryBatch:
    """Right-padded, standardized history streams.

    ``a`` holds the treatments *assigned* at each step; the encoder shifts
    them so step ``s`` sees ``A_{s-1}``.  Static covariates are broadcast
    onto ``x`` at every step.
    """

    y: np.ndarray  # (B, T, d_y)
    x: np.ndarray  # (B, T, d_x + d_static)
    a: np.ndarray  # (B, T, d_a)
    mask: np.ndarray  # (B, T)
    lengths: np.ndarray  # (B,)
    provenance: dict = field(default_factory=dict)
    rows: Optional[np.ndarray] = None  # dataset row of each entry, when known

    @property
    def B(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    def a_prev(self) -> np.ndarray:
        out = np.zeros_like(self.a)
        out[:, 1:] = self.a[:, :-1]
        return out

    def take(self, rows) -> "HistoryBatch":
        rows = np.asarray(rows)
        src = np.arange(self.B) if self.rows is None else self.rows
        return HistoryBatch(self.y[rows], self.x[rows], self.a[rows], self.mask[rows], self.lengths[rows], rows=src[rows])

    def repeat(self, k: int) -> "HistoryBatch":
        """Each row repeated ``k`` times consecutively."""
        r = lambda v: np.repeat(v, k, axis=0)
        return HistoryBatch(r(self.y), r(self.x), r(self.a), r(self.mask), r(self.lengths))


def make_batch(trajectories: Sequence, scaler: Scaler, max_len: Optional[int] = None) -> HistoryBatch:
    B = len(trajectories)
    if B == 0:
        raise ContractError("empty batch")
    lengths = np.array([tr.T for tr in trajectories])
    if np.any(lengths == 0):
        raise ContractError("length-0 history")
    T = int(lengths.max()) if max_len is None else int(max_len)
    lengths = np.minimum(lengths, T)
    tr0 = trajectories[0]
    d_y, d_x, d_a, d_s = tr0.Y.shape[1], tr0.X.shape[1], tr0.A.shape[1], tr0.static.shape[0]
    y = np.zeros((B, T, d_y))
    x = np.zeros((B, T, d_x + d_s))
    a = np.zeros((B, T, d_a))
    mask = np.zeros((B, T))
    for i, tr in enumerate(trajectories):
        n = lengths[i]
        y[i, :n] = scaler.y(tr.Y[:n])
        if d_x:
            x[i, :n, :d_x] = scaler.x(tr.X[:n])
        if d_s:
            x[i, :n, d_x:] = scaler.s(tr.static)
        a[i, :n] = tr.A[:n]
        mask[i, :n] = 1.0
    return HistoryBatch(y, x, a, mask, lengths)


def substitute_treatments(batch: HistoryBatch, starts: np.ndarray, a_bar: np.ndarray, n_steps: int) -> HistoryBatch:
    """Copy of ``batch`` where row ``i`` has ``a[i, starts[i] + k] = a_bar[k]`` for ``k < n_steps``.

    Only the treatment stream changes; outcomes and covariates are kept.
    """
    a = batch.a.copy()
    starts = np.asarray(starts)
    rows = np.arange(batch.B)
    for k in range(n_steps):
        cols = starts + k
        ok = cols < batch.T
        a[rows[ok], cols[ok]] = a_bar[k]
    return HistoryBatch(batch.y, batch.x, a, batch.mask, batch.lengths,
                        {"substituted": True, "n_steps": int(n_steps)})


# -- attention --------------------------------------------------------------

def relative_index(T: int, l_max: int) -> np.ndarray:
    """``idx[i, j] = clip(j - i, -l_max, l_max) + l_max``."""
    r = np.arange(T)
    return np.clip(r[None, :] - r[:, None], -l_max, l_max) + l_max


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int,
                         rel_bias: Optional[Tensor] = None, l_max: int = 15,
                         causal: bool = True) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads, heads concatenated.

    ``q``, ``k``, ``v`` are (B, T, d_h).  ``rel_bias`` (heads, 2*l_max+1) adds a
    learned logit per clipped relative distance.  With ``causal`` the
    logits of future keys are set to ``-inf``.
    """
    B, T, d_h = q.shape
    if d_h % heads:
        raise ConfigError(f"d_h={d_h} not divisible by heads={heads}")
    dq = d_h // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (B, T, heads, dq)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    logits = ops.mul(ops.matmul(qh, ops.transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(dq))
    if rel_bias is not None:
        idx = relative_index(T, l_max)
        bias = ops.transpose(ops.gather(ops.transpose(rel_bias, (1, 0)), idx), (2, 0, 1))
        logits = ops.add(logits, bias)
    if causal:
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        logits = ops.add(logits, np.where(future, -np.inf, 0.0))
    att = ops.softmax(logits, axis=-1)
    out = ops.matmul(att, vh)
    return ops.reshape(ops.transpose(out, (0, 2, 1, 3)), (B, T, d_h))


# -- encoders ---------------------------------------------------------------

class LstmBackbone:
    def __init__(self, store: ParamStore, d_in: int, cfg: BackboneConfig, prefix: str = "backbone"):
        H = cfg.d_h
        self.cfg = cfg
        self.w_ih = store.glorot(f"{prefix}.lstm.w_ih", d_in, 4 * H)
        self.w_hh = store.glorot(f"{prefix}.lstm.w_hh", H, 4 * H)
        self.b = store.zeros(f"{prefix}.lstm.b", 4 * H)
        self.out = Linear(store, f"{prefix}.out", H, cfg.d_z)

    def __call__(self, batch: HistoryBatch, training: bool = False, rng=None, dropout: Optional[float] = None) -> Tensor:
        p = self.cfg.dropout if dropout is None else dropout
        inp = np.concatenate([batch.y, batch.x, batch.a_prev()], axis=-1)
        xw = ops.add(ops.matmul(inp, self.w_ih), self.b)
        h = ops.lstm_recurrence(xw, self.w_hh, batch.mask)
        h = maybe_dropout(h, p, training, rng)
        return self.out(h)


class _Block:
    def __init__(self, store: ParamStore, name: str, n_streams: int, cfg: BackboneConfig):
        d = cfg.d_h
        self.self_qkv, self.cross_qkv, self.self_rel, self.cross_rel = [], [], [], []
        self.ff1, self.ff2, self.ln_g, self.ln_b = [], [], [], []
        for k in range(n_streams):
            s = f"{name}.s{k}"
            self.self_qkv.append(tuple(Linear(store, f"{s}.self.{w}", d, d) for w in "qkv"))
            self.cross_qkv.append(tuple(Linear(store, f"{s}.cross.{w}", d, d) for w in "qkv"))
            self.self_rel.append(store.zeros(f"{s}.self.rel", cfg.n_heads, 2 * cfg.l_max + 1))
            self.cross_rel.append(store.zeros(f"{s}.cross.rel", cfg.n_heads, 2 * cfg.l_max + 1))
            self.ff1.append(Linear(store, f"{s}.ff1", d, cfg.d_ff))
            self.ff2.append(Linear(store, f"{s}.ff2", cfg.d_ff, d))
            self.ln_g.append(store.add(f"{s}.ln.g", np.ones(d)))
            self.ln_b.append(store.zeros(f"{s}.ln.b", d))


class TransformerBackbone:
    """Three causal sub-transformers (outcomes, covariates, previous
    treatments) exchanging information through cross-attention."""

    def __init__(self, store: ParamStore, stream_dims: Sequence[int], cfg: BackboneConfig, prefix: str = "backbone"):
        cfg.validate()
        self.cfg = cfg
        # streams with zero width (e.g. no covariates) are dropped
        self.streams = [i for i, d in enumerate(stream_dims) if d > 0]
        self.embed = {i: Linear(store, f"{prefix}.embed{i}", stream_dims[i], cfg.d_h) for i in self.streams}
        self.blocks = [_Block(store, f"{prefix}.block{j}", len(self.streams), cfg) for j in range(cfg.n_blocks)]
        self.out = Linear(store, f"{prefix}.out", cfg.d_h, cfg.d_z)

    def _mha(self, q, k, v, rel):
        return multi_head_attention(q, k, v, self.cfg.n_heads, rel, self.cfg.l_max, causal=True)

    def __call__(self, batch: HistoryBatch, training: bool = False, rng=None, dropout: Optional[float] = None) -> Tensor:
        cfg = self.cfg
        p = cfg.dropout if dropout is None else dropout
        raw = {0: batch.y, 1: batch.x, 2: batch.a_prev()}
        z = [self.embed[i](raw[i]) for i in self.streams]
        for blk in self.blocks:
            q_tilde = []
            for k, zk in enumerate(z):
                lq, lk, lv = blk.self_qkv[k]
                q_tilde.append(ops.add(zk, self._mha(lq(zk), lk(zk), lv(zk), blk.self_rel[k])))
            new_z = []
            for k, qk in enumerate(q_tilde):
                acc = qk
                query = blk.cross_qkv[k][0](qk)
                for l, ql in enumerate(q_tilde):
                    if l == k:
                        continue
                    acc = ops.add(acc, self._mha(query, blk.cross_qkv[l][1](ql), blk.cross_qkv[l][2](ql), blk.cross_rel[k]))
                hid = maybe_dropout(ops.relu(blk.ff1[k](acc)), p, training, rng)
                ff = maybe_dropout(blk.ff2[k](hid), p, training, rng)
                normed = ops.layer_norm(ops.add(acc, ff), cfg.ln_eps)
                new_z.append(ops.add(ops.mul(normed, blk.ln_g[k]), blk.ln_b[k]))
            z = new_z
        avg = z[0]
        for zk in z[1:]:
            avg = ops.add(avg, zk)
        avg = ops.mul(avg, 1.0 / len(z))
        return ops.elu(self.out(maybe_dropout(avg, p, training, rng)))


def build_backbone(store: ParamStore, cfg: BackboneConfig, d_y: int, d_x: int, d_a: int, prefix: str = "backbone"):
    cfg.validate()
    if cfg.kind == "lstm":
        return LstmBackbone(store, d_y + d_x + d_a, cfg, prefix)
    return TransformerBackbone(store, (d_y, d_x, d_a), cfg, prefix)


# -- single-trajectory encoding ---------------------------------------------

@dataclass
class HiddenStates:
    Z: np.ndarray  # (T', d_z) over the encoded prefix
    z_last: np.ndarray  # Z at step t + delta
    provenance: dict


def encode_history(backbone, trajectory, t: int, delta: int, a_bar: Optional[np.ndarray], scaler: Scaler) -> HiddenStates:
    """Encode the history through step ``t + delta`` in eval mode.

    When ``a_bar`` is given, treatments at steps ``t .. t+delta-1`` are
    replaced by ``a_bar[:delta]``; outcomes and covariates stay factual.
    """
    if delta < 0:
        raise ContractError("delta must be >= 0")
    end = t + delta
    if end >= trajectory.T:
        raise ContractError(f"step {end} beyond trajectory length {trajectory.T}")
    batch = make_batch([trajectory.prefix(end)], scaler)
    prov = {"kind": "factual", "cut": int(t), "delta": int(delta)}
    if a_bar is not None:
        a_bar = np.asarray(a_bar, dtype=np.float64).reshape(-1, batch.a.shape[-1])
        if a_bar.shape[0] < delta:
            raise ContractError(f"a_bar has {a_bar.shape[0]} steps, need {delta}")
        batch = substitute_treatments(batch, np.array([t]), a_bar, delta)
        prov = {"kind": "intervened", "cut": int(t), "delta": int(delta), "substituted": [int(t), int(t + delta)]}
    with no_grad():
        Z = backbone(batch, training=False).values[0]
    return HiddenStates(Z=Z, z_last=Z[end], provenance=prov)
