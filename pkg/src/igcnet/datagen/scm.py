"""Small tabular SCM with time-varying confounding and exact oracles.

State ``s = (x, y)`` with ``x in {0..n_x-1}`` and ``y in {0..n_y-1}``;
the recorded outcome is ``y / (n_y - 1)`` in [0, 1].  One binary
treatment ``A_t ~ Ber(pi[s_t])`` and a Markov kernel
``P[s, a, s'] = P(s_{t+1} = s' | s_t = s, A_t = a)``.  Because the process
is Markov in ``s``, the history ``H_t`` enters every oracle through ``s_t``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..rng import stream
from .dataset import CapoQuery, Dataset, Trajectory, config_hash

MAX_PATHS = 10**6


class OracleOverflow(RuntimeError):
    pass


@dataclass
class DiscreteScm:
    n_x: int
    n_y: int
    kernel: np.ndarray  # (S, 2, S)
    propensity: np.ndarray  # (S,)
    init: np.ndarray  # (S,)
    T: int = 5

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.propensity = np.asarray(self.propensity, dtype=np.float64)
        self.init = np.asarray(self.init, dtype=np.float64)
        S = self.n_states
        if not (1 <= self.n_x <= 4 and 2 <= self.n_y <= 4):
            raise ValueError("need 1 <= n_x <= 4 and 2 <= n_y <= 4")
        if self.kernel.shape != (S, 2, S) or self.propensity.shape != (S,) or self.init.shape != (S,):
            raise ValueError("kernel, propensity or init has the wrong shape")
        if np.any(self.kernel < 0) or not np.allclose(self.kernel.sum(-1), 1.0, atol=1e-12):
            raise ValueError("kernel rows must be probability vectors")
        if not np.allclose(self.init.sum(), 1.0, atol=1e-12) or np.any(self.init < 0):
            raise ValueError("init must be a probability vector")
        if np.any(self.propensity <= 0) or np.any(self.propensity >= 1):
            raise ValueError("positivity: propensities must lie strictly in (0, 1)")

    @property
    def n_states(self) -> int:
        return self.n_x * self.n_y

    def state(self, x: int, y: int) -> int:
        return int(x) * self.n_y + int(y)

    def decode(self, s):
        return np.asarray(s) // self.n_y, np.asarray(s) % self.n_y

    @property
    def y_value(self) -> np.ndarray:
        """Outcome value of every state."""
        return (np.arange(self.n_states) % self.n_y) / (self.n_y - 1)

    def state_of(self, trajectory, t: int) -> int:
        x = int(round(trajectory.X[t, 0])) if trajectory.X.shape[1] else 0
        y = int(round(trajectory.Y[t, 0] * (self.n_y - 1)))
        return self.state(x, y)

    def to_dict(self) -> dict:
        return {"n_x": self.n_x, "n_y": self.n_y, "kernel": self.kernel.tolist(),
                "propensity": self.propensity.tolist(), "init": self.init.tolist(), "T": self.T}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscreteScm":
        return cls(**d)


def confounded_scm(T: int = 5) -> DiscreteScm:
    """Fixture with treatment-confounder feedback.

    ``X`` is a binary marker that treatment pushes up; the marker raises
    both the next outcome and the chance of being treated again.
    Conditioning on ``A_{t+1} = 1`` therefore selects ``X_{t+1} = 1`` and
    inflates ``Y_{t+2}`` relative to the interventional value.
    """
    n_x, n_y = 2, 2
    S = n_x * n_y
    kernel = np.zeros((S, 2, S))
    for x, y, a in itertools.product(range(2), range(2), range(2)):
        px = 0.1 + 0.45 * a + 0.3 * x  # P(X' = 1)
        py = 0.15 + 0.55 * x + 0.25 * a - 0.1 * x * a + 0.05 * y  # P(Y' = 1)
        for x2, y2 in itertools.product(range(2), range(2)):
            kernel[x * 2 + y, a, x2 * 2 + y2] = (px if x2 else 1 - px) * (py if y2 else 1 - py)
    propensity = np.array([0.1 + 0.7 * x + 0.1 * y for x in range(2) for y in range(2)])
    return DiscreteScm(n_x, n_y, kernel, propensity, np.full(S, 0.25), T)


def null_effect_scm(T: int = 5) -> DiscreteScm:
    """Same structure as :func:`confounded_scm` but the kernel ignores ``A``."""
    scm = confounded_scm(T)
    kernel = scm.kernel.copy()
    kernel[:, 1] = kernel[:, 0]
    return DiscreteScm(scm.n_x, scm.n_y, kernel, scm.propensity, scm.init, T)


# -- simulation -------------------------------------------------------------

def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; ``cdf`` rows align with ``u``."""
    return np.minimum((u[:, None] >= cdf).sum(axis=1), cdf.shape[1] - 1)


def simulate_scm_dataset(scm: DiscreteScm, N: int, seed: int, id_offset: int = 0) -> Dataset:
    """Trajectory ``i`` uses only the stream ``(seed, "scm", id_offset + i)``."""
    T = scm.T
    U = np.stack([stream(seed, "scm", id_offset + i).random((T, 3)) for i in range(N)]) if N else np.zeros((0, T, 3))
    s = np.zeros((N, T), dtype=int)
    A = np.zeros((N, T), dtype=int)
    s[:, 0] = _draw(np.broadcast_to(np.cumsum(scm.init), (N, scm.n_states)), U[:, 0, 0])
    for t in range(T):
        A[:, t] = (U[:, t, 1] < scm.propensity[s[:, t]]).astype(int)
        if t + 1 < T:
            s[:, t + 1] = _draw(np.cumsum(scm.kernel[s[:, t], A[:, t]], axis=-1), U[:, t, 2])
    x, y = scm.decode(s)
    trajs = [
        Trajectory(
            id=id_offset + i,
            Y=(y[i] / (scm.n_y - 1))[:, None],
            X=x[i][:, None].astype(float),
            A=A[i][:, None],
            true_propensities=scm.propensity[s[i]][:, None],
        )
        for i in range(N)
    ]
    meta = {"dgp": "scm", "scm": scm.to_dict(), "N": N, "seed": seed, "id_offset": id_offset}
    meta["config_hash"] = config_hash(meta)
    return Dataset(trajs, meta)


# -- oracles ----------------------------------------------------------------

def _paths(scm: DiscreteScm, tau: int):
    n = scm.n_states ** tau
    if n > MAX_PATHS:
        raise OracleOverflow(f"{n} paths exceed the enumeration limit {MAX_PATHS}")
    return itertools.product(range(scm.n_states), repeat=tau)


def _as_seq(a_seq) -> np.ndarray:
    return np.asarray(a_seq, dtype=int).reshape(-1)


def gformula(scm: DiscreteScm, s0: int, a_seq) -> float:
    """``E[Y_{t+tau}[a] | s_t = s0]`` by enumerating every state path."""
    a = _as_seq(a_seq)
    yv = scm.y_value
    total = 0.0
    for path in _paths(scm, len(a)):
        w, prev = 1.0, s0
        for k, s in enumerate(path):
            w *= scm.kernel[prev, a[k], s]
            prev = s
        total += w * yv[path[-1]]
    return total


def naive_conditional(scm: DiscreteScm, s0: int, a_seq) -> float:
    """``E[Y_{t+tau} | s_t = s0, A_{t:t+tau} = a]`` under the observational law."""
    a = _as_seq(a_seq)
    yv = scm.y_value
    num = den = 0.0
    for path in _paths(scm, len(a)):
        w, prev = 1.0, s0
        for k, s in enumerate(path):
            w *= scm.kernel[prev, a[k], s]
            if k + 1 < len(a):
                p = scm.propensity[s]
                w *= p if a[k + 1] == 1 else 1.0 - p
            prev = s
        num += w * yv[path[-1]]
        den += w
    return num / den


def gformula_matrix(scm: DiscreteScm, s0: int, a_seq) -> float:
    """Same value as :func:`gformula` via forward propagation of the state law."""
    p = np.zeros(scm.n_states)
    p[s0] = 1.0
    for a in _as_seq(a_seq):
        p = p @ scm.kernel[:, a, :]
    return float(p @ scm.y_value)


def discrete_scm_oracle(scm: DiscreteScm, trajectory, t: int, a_seq) -> dict:
    s0 = scm.state_of(trajectory, t)
    return {"gformula": gformula(scm, s0, a_seq), "naive": naive_conditional(scm, s0, a_seq)}


def mc_oracle(scm: DiscreteScm, s0: int, a_seq, draws: int, rng: np.random.Generator) -> tuple:
    """Monte-Carlo estimate of the G-formula; returns ``(mean, standard error)``."""
    a = _as_seq(a_seq)
    s = np.full(draws, s0)
    for k in range(len(a)):
        s = _draw(np.cumsum(scm.kernel[s, a[k]], axis=-1), rng.random(draws))
    y = scm.y_value[s]
    return float(y.mean()), float(y.std(ddof=1) / np.sqrt(draws))


def make_scm_queries(scm: DiscreteScm, dataset: Dataset, n: int, a_tail, seed: int,
                     a_first: Optional[int] = None) -> list:
    """``n`` queries on distinct trajectories with treatments ``(a_first, *a_tail)``;
    ``a_first=None`` draws the first treatment per query."""
    a_tail = _as_seq(a_tail)
    tau = 1 + len(a_tail)
    rng = stream(seed, "scm-query")
    picks = rng.choice(len(dataset), size=min(n, len(dataset)), replace=False)
    out = []
    for i in picks:
        tr = dataset[int(i)]
        t = int(rng.integers(0, tr.T - tau))
        first = rng.integers(0, 2) if a_first is None else int(a_first)
        a = np.concatenate([[first], a_tail])
        s0 = scm.state_of(tr, t)
        out.append(CapoQuery(tr.id, t, a[:, None], oracle=[gformula(scm, s0, a)], oracle_se=0.0,
                             oracle_method="enumeration"))
    return out
