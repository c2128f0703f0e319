"""Semi-synthetic process over simulated covariates.

Covariates follow independent AR(1) processes (standing in for recorded
vital signs).  Untreated outcomes combine a per-unit spline trend, a
per-unit random-Fourier-feature path in time and a shared nonlinear
function of the covariates.  Treatments are assigned from recent outcomes
and covariates, and each treatment adds a delayed, windowed effect.

Timing: ``A[s]`` is assigned after ``Y[s]`` and affects the recorded
outcomes ``Y[s+1] .. Y[s+1+window]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import make_interp_spline
from scipy.special import expit

from ..rng import stream
from .dataset import CapoQuery, Dataset, Trajectory, config_hash


@dataclass
class SemiSynthParams:
    d_x: int = 4
    d_y: int = 2
    d_a: int = 3
    T_min: int = 15
    T_max: int = 25
    ar_coef: float = 0.8
    ar_noise: float = 0.3
    n_rff: int = 32
    rff_bandwidth_t: float = 5.0
    rff_bandwidth_x: float = 1.0
    alpha_s: list = field(default_factory=lambda: [1.0, 0.8])
    alpha_g: list = field(default_factory=lambda: [0.5, 0.5])
    alpha_f: list = field(default_factory=lambda: [1.0, 0.7])
    gamma_y: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    gamma_x: list = field(default_factory=lambda: [0.5, 0.5, 0.5])
    bias: list = field(default_factory=lambda: [-1.0, -1.0, -1.0])
    windows: list = field(default_factory=lambda: [2, 3, 4])  # omega^l, >= 1
    lags: list = field(default_factory=lambda: [1, 2, 3])  # outcomes averaged for assignment
    beta: list = field(default_factory=lambda: [[-1.0, -0.5], [-0.8, -0.8], [-0.5, -1.0]])  # (d_a, d_y)
    noise: float = 0.1

    def __post_init__(self):
        if self.n_rff < 1:
            raise ValueError("need at least one random Fourier feature")
        if any(w < 1 for w in self.windows):
            raise ValueError("effect windows must be >= 1")
        if len(self.windows) != self.d_a or len(self.beta) != self.d_a:
            raise ValueError("windows and beta need one entry per treatment")

    def to_dict(self) -> dict:
        return asdict(self)


class Rff:
    """``f(u) = sqrt(2/R) * sum_r w_r cos(omega_r . u + b_r)`` approximating a GP draw."""

    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, n: int, bandwidth: float):
        self.omega = rng.normal(scale=1.0 / bandwidth, size=(d_in, n))
        self.b = rng.uniform(0, 2 * np.pi, size=n)
        self.w = rng.normal(size=(n, d_out))
        self.scale = np.sqrt(2.0 / n)

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.scale * np.cos(np.atleast_2d(u) @ self.omega + self.b) @ self.w


class SemiSynthWorld:
    """Functions shared by every unit of one dataset seed."""

    def __init__(self, params: SemiSynthParams, seed: int):
        p = params
        rng = stream(seed, "semisynth/world")
        self.f_y = Rff(rng, p.d_x, p.d_y, p.n_rff, p.rff_bandwidth_x)
        self.f_a = Rff(rng, p.d_x, p.d_a, p.n_rff, p.rff_bandwidth_x)
        knots = np.linspace(0, p.T_max, 6)
        self.splines = [make_interp_spline(knots, rng.normal(size=6), k=3) for _ in range(3)]


def _unit_draws(params: SemiSynthParams, seed: int, index: int) -> dict:
    p = params
    rng = stream(seed, "semisynth", index)
    T = int(rng.integers(p.T_min, p.T_max + 1))
    x = np.zeros((T, p.d_x))
    x[0] = rng.normal(size=p.d_x)
    for t in range(1, T):
        x[t] = p.ar_coef * x[t - 1] + p.ar_noise * rng.normal(size=p.d_x)
    return {
        "T": T,
        "X": x,
        "mix": rng.dirichlet(np.ones(3)),
        "g": Rff(rng, 1, p.d_y, p.n_rff, p.rff_bandwidth_t),
        "eps": p.noise * rng.normal(size=(T, p.d_y)),
        "u_assign": rng.random((T, p.d_a)),
    }


def untreated_outcomes(params: SemiSynthParams, world: SemiSynthWorld, draws: dict) -> np.ndarray:
    p = params
    T = draws["T"]
    t = np.arange(T, dtype=np.float64)
    spline = sum(w * s(t) for w, s in zip(draws["mix"], world.splines))
    out = np.asarray(p.alpha_s) * spline[:, None]
    out = out + np.asarray(p.alpha_g) * draws["g"](t[:, None])
    out = out + np.asarray(p.alpha_f) * world.f_y(draws["X"])
    return out + draws["eps"]


def treatment_effect(params: SemiSynthParams, A: np.ndarray, P: np.ndarray, t: int) -> np.ndarray:
    """Effect on ``Y[t]`` of treatments applied at steps ``i < t``.

    For each past step ``i`` with lag ``k = t - i - 1`` inside a window, take
    the minimum over active treatments ``l`` of
    ``p_i^l beta^{l,j} / (omega^l - k + 1)^2``; sum over ``i``.
    """
    p = params
    beta = np.asarray(p.beta)
    total = np.zeros(p.d_y)
    for i in range(max(0, t - 1 - max(p.windows)), t):
        k = t - i - 1
        cand = [P[i, l] * beta[l] / (p.windows[l] - k + 1) ** 2
                for l in range(p.d_a) if A[i, l] == 1 and k <= p.windows[l]]
        if cand:
            total += np.min(np.stack(cand), axis=0)
    return total


def _rollout(params, world, draws, Y0, A_forced: Optional[np.ndarray] = None, t_force: int = 0):
    """Apply assignment and effects; treatments at steps ``>= t_force`` are
    taken from ``A_forced`` when given (their propensities are still
    computed along the counterfactual path)."""
    p = params
    T = draws["T"]
    Y = np.zeros((T, p.d_y))
    A = np.zeros((T, p.d_a))
    P = np.zeros((T, p.d_a))
    fa = world.f_a(draws["X"])
    for t in range(T):
        Y[t] = Y0[t] + treatment_effect(p, A, P, t)
        lag_means = np.array([Y[max(0, t - L + 1): t + 1].mean() for L in p.lags])
        P[t] = expit(np.asarray(p.gamma_y) * lag_means + np.asarray(p.gamma_x) * fa[t] + np.asarray(p.bias))
        if A_forced is not None and t >= t_force:
            A[t] = A_forced[t]
        else:
            A[t] = (draws["u_assign"][t] < P[t]).astype(float)
    return Y, A, P


def simulate_semisynth_dataset(params: SemiSynthParams, N: int, seed: int, id_offset: int = 0) -> Dataset:
    world = SemiSynthWorld(params, seed)
    trajs = []
    for i in range(N):
        idx = id_offset + i
        draws = _unit_draws(params, seed, idx)
        Y0 = untreated_outcomes(params, world, draws)
        Y, A, P = _rollout(params, world, draws, Y0)
        trajs.append(Trajectory(id=idx, Y=Y, X=draws["X"], A=A, true_propensities=P, extra={"Y_untreated": Y0}))
    meta = {"dgp": "semisynth", "params": params.to_dict(), "N": N, "seed": seed, "id_offset": id_offset}
    meta["config_hash"] = config_hash(meta)
    return Dataset(trajs, meta)


def semisynth_counterfactual(params: SemiSynthParams, seed: int, trajectory: Trajectory, t: int, a_seq) -> np.ndarray:
    """``Y[t+tau]`` when ``A[t:t+tau]`` is forced to ``a_seq``, re-running the
    treatment step with the unit's own noise."""
    a_seq = np.asarray(a_seq, dtype=np.float64).reshape(-1, params.d_a)
    tau = a_seq.shape[0]
    if t + tau > trajectory.T - 1:
        raise ValueError("query horizon overflows the trajectory")
    world = SemiSynthWorld(params, seed)
    draws = _unit_draws(params, seed, trajectory.id)
    Y0 = untreated_outcomes(params, world, draws)
    forced = trajectory.A.copy()
    forced[t:t + tau] = a_seq
    # steps after the horizon do not matter; keep them factual
    Y, _, _ = _rollout(params, world, draws, Y0, forced, t_force=t)
    return Y[t + tau]


def make_semisynth_queries(params: SemiSynthParams, seed: int, dataset: Dataset, a_seq, query_seed: int) -> list:
    a_seq = np.asarray(a_seq, dtype=np.float64).reshape(-1, params.d_a)
    tau = a_seq.shape[0]
    out = []
    for tr in dataset:
        hi = tr.T - 1 - tau
        if hi < 1:
            continue
        t = int(stream(query_seed, "semisynth-query", tr.id).integers(1, hi + 1))
        y = semisynth_counterfactual(params, seed, tr, t, a_seq)
        out.append(CapoQuery(tr.id, t, a_seq, oracle=y, oracle_se=0.0, oracle_method="shared-noise"))
    return out
