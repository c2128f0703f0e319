"""Pharmacokinetic-pharmacodynamic tumor growth with confounded treatment.

Volumes are in cm^3, diameters in cm.  Two binary treatments per step:
chemotherapy (dim 0) and radiotherapy (dim 1).  ``A[t]`` is assigned after
``Y[t]`` is observed and drives the transition to ``Y[t+1]``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ..autodiff.tensor import ContractError
from ..rng import stream
from .dataset import CapoQuery, Dataset, Trajectory, config_hash


def diameter_to_volume(d):
    return np.pi / 6.0 * np.asarray(d, dtype=np.float64) ** 3


def volume_to_diameter(v):
    return np.cbrt(6.0 * np.asarray(v, dtype=np.float64) / np.pi)


@dataclass
class TumorParams:
    """Constants of the growth model.  Defaults are chosen for desk-scale
    experiments (see configs/tumor.yaml); they follow the structure of the
    commonly used simulator but the magnitudes are our own."""

    rho: float = 0.013  # growth rate
    K_diameter: float = 30.0  # carrying capacity, as a diameter
    alpha_c: float = 0.02  # chemo effect per unit concentration
    alpha_r: float = 0.03  # radio linear term
    beta_r: float = 0.003  # radio quadratic term
    D_max: float = 13.0  # max diameter
    sigma_eps: float = 0.1  # multiplicative noise std
    gamma: float = 10.0  # confounding strength
    rho_ov: float = 1.0  # overlap scale on the assignment logit
    omega: float = 0.0  # unobserved-confounding strength
    u_logit: float = 0.2  # coefficient of U on the assignment logit
    window: int = 15  # diameter averaging window
    chemo_dose: float = 5.0
    chemo_half_life: float = 1.0
    radio_dose: float = 2.0
    d0_mean: float = 6.5  # initial diameter distribution (truncated normal)
    d0_std: float = 1.5
    d0_min: float = 1.0
    min_volume: float = 1e-3
    T_min: int = 20
    T_max: int = 20

    def __post_init__(self):
        if self.K_diameter <= 0 or self.D_max <= 0:
            raise ValueError("K and D_max must be positive")
        if self.sigma_eps < 0 or self.gamma < 0 or self.omega < 0:
            raise ValueError("sigma_eps, gamma and omega must be >= 0")
        if self.rho_ov <= 0:
            raise ValueError("rho_ov must be > 0")
        if self.window < 1 or not 1 <= self.T_min <= self.T_max:
            raise ValueError("need window >= 1 and 1 <= T_min <= T_max")

    @property
    def K(self) -> float:
        return float(diameter_to_volume(self.K_diameter))

    @property
    def V_max(self) -> float:
        return float(diameter_to_volume(self.D_max))

    @property
    def decay(self) -> float:
        return float(np.exp(-np.log(2.0) / self.chemo_half_life))

    def to_dict(self) -> dict:
        return asdict(self)


def tumor_step(Y, c, d, eps, U, params: TumorParams):
    """One transition; vectorized over any broadcastable inputs."""
    Y = np.asarray(Y, dtype=np.float64)
    if np.any(Y <= 0):
        raise ContractError("tumor volume must be positive")
    p = params
    factor = 1.0 + p.rho * np.log(p.K / Y) - p.alpha_c * c - (p.alpha_r * d + p.beta_r * d * d) + eps + p.omega * U
    return np.clip(factor * Y, p.min_volume, p.V_max)


def diameter_summary(Y_hist: np.ndarray, window: int) -> float:
    """Mean diameter of the last ``window`` volumes (fewer if unavailable)."""
    return float(np.mean(volume_to_diameter(Y_hist[-window:])))


def assignment_prob(d_bar, U, params: TumorParams):
    p = params
    logit = p.gamma / p.D_max * (np.asarray(d_bar) - p.D_max / 2.0)
    if p.omega > 0:
        logit = logit + p.u_logit * U
    return expit(p.rho_ov * logit)


def assign_treatment(d_bar: float, U: float, params: TumorParams, rng: np.random.Generator):
    """Returns ``(A_c, A_r, p_c, p_r)``; both treatments share one probability."""
    p = float(assignment_prob(d_bar, U, params))
    draws = rng.random(2)
    return int(draws[0] < p), int(draws[1] < p), p, p


def simulate_trajectory(params: TumorParams, seed: int, index: int) -> Trajectory:
    p = params
    rng = stream(seed, "tumor", index)
    T = int(rng.integers(p.T_min, p.T_max + 1))
    U = float(rng.normal())
    d0 = p.d0_mean + p.d0_std * rng.normal()
    d0 = float(np.clip(d0, p.d0_min, p.D_max))
    eps = p.sigma_eps * rng.normal(size=T)
    Y = np.zeros(T)
    A = np.zeros((T, 2))
    props = np.zeros((T, 2))
    Y[0] = diameter_to_volume(d0)
    c = 0.0
    for t in range(T):
        a_c, a_r, p_c, p_r = assign_treatment(diameter_summary(Y[: t + 1], p.window), U, p, rng)
        A[t] = (a_c, a_r)
        props[t] = (p_c, p_r)
        c = c * p.decay + p.chemo_dose * a_c
        if t + 1 < T:
            Y[t + 1] = tumor_step(Y[t], c, p.radio_dose * a_r, eps[t], U, p)
    return Trajectory(id=index, Y=Y[:, None], X=np.zeros((T, 0)), A=A, true_propensities=props, U=U)


def simulate_tumor_dataset(params: TumorParams, N: int, seed: int, id_offset: int = 0) -> Dataset:
    """``N`` trajectories; trajectory ``i`` depends only on ``(seed, id_offset + i)``."""
    trajs = [simulate_trajectory(params, seed, id_offset + i) for i in range(N)]
    meta = {"dgp": "tumor", "params": params.to_dict(), "N": N, "seed": seed, "id_offset": id_offset}
    meta["config_hash"] = config_hash(meta)
    return Dataset(trajs, meta)


def chemo_concentration(A_c: np.ndarray, params: TumorParams) -> float:
    """Concentration after applying doses ``A_c[0..k]``."""
    c = 0.0
    for a in A_c:
        c = c * params.decay + params.chemo_dose * a
    return c


def simulate_counterfactual_oracle(params: TumorParams, trajectory: Trajectory, t: int, a_seq: np.ndarray,
                                   draws: int = 1000, rng: Optional[np.random.Generator] = None) -> tuple:
    """Monte-Carlo ``E[Y_{t+tau} | history to t, do(A_{t:t+tau-1} = a_seq)]``.

    Returns ``(mean, standard error)``.  Noise-free processes use one rollout.
    """
    if draws < 1:
        raise ContractError("draws must be >= 1")
    a_seq = np.asarray(a_seq, dtype=np.float64).reshape(-1, 2)
    tau = a_seq.shape[0]
    p = params
    if p.sigma_eps == 0:
        draws = 1
    if rng is None:
        rng = stream(0, "tumor-oracle", trajectory.id, t)
    U = 0.0 if trajectory.U is None else trajectory.U
    c = chemo_concentration(trajectory.A[:t, 0], p)
    Y = np.full(draws, trajectory.Y[t, 0])
    for k in range(tau):
        c = c * p.decay + p.chemo_dose * a_seq[k, 0]
        eps = p.sigma_eps * rng.normal(size=draws) if p.sigma_eps > 0 else np.zeros(draws)
        Y = tumor_step(Y, c, p.radio_dose * a_seq[k, 1], eps, U, p)
    se = float(Y.std(ddof=1) / np.sqrt(draws)) if draws > 1 else 0.0
    return float(Y.mean()), se


def make_tumor_queries(params: TumorParams, dataset: Dataset, a_seq: np.ndarray, seed: int,
                       draws: int = 1000, t_min: int = 1) -> list:
    """One query per trajectory at a cut drawn uniformly from the valid range."""
    a_seq = np.asarray(a_seq, dtype=np.float64).reshape(-1, 2)
    tau = a_seq.shape[0]
    out = []
    for tr in dataset:
        hi = tr.T - 1 - tau
        if hi < t_min:
            continue
        t = int(stream(seed, "tumor-query", tr.id).integers(t_min, hi + 1))
        mean, se = simulate_counterfactual_oracle(params, tr, t, a_seq, draws, stream(seed, "tumor-oracle", tr.id))
        out.append(CapoQuery(tr.id, t, a_seq, oracle=[mean], oracle_se=se,
                             oracle_method="exact" if params.sigma_eps == 0 else f"mc:{draws}"))
    return out
