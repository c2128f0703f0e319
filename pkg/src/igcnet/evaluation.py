"""Benchmark harness: interventional RMSE, sweeps over DGP knobs, the
IPW-vs-regression variance comparison and report writers."""
from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .autodiff import ContractError
from .backbone import BackboneConfig
from .baselines import HistoryRegressor, fit_ipw, mc_gcomp
from .datagen.dataset import config_hash, write_atomic
from .datagen.scm import confounded_scm, make_scm_queries, simulate_scm_dataset
from .datagen.semisynth import SemiSynthParams, make_semisynth_queries, simulate_semisynth_dataset
from .datagen.tumor import TumorParams, make_tumor_queries, simulate_tumor_dataset
from .igc import BiasedIgcModel, IgcModel, predict_queries
from .training import TrainConfig, fit

log = logging.getLogger(__name__)

TEST_ID_OFFSET = 10**6
MODEL_SEED_OFFSET = 7919  # model seeds never coincide with data seeds


# -- metrics ----------------------------------------------------------------

def rmse(predictions, oracle, normalization: str = "raw", scale: Optional[float] = None) -> float:
    """Root mean squared error; ``normalization="max"`` divides errors by ``scale`` first."""
    p = np.asarray(predictions, dtype=np.float64)
    o = np.asarray(oracle, dtype=np.float64)
    if p.shape != o.shape:
        raise ContractError(f"prediction/oracle shape mismatch {p.shape} vs {o.shape}")
    if p.size == 0:
        raise ContractError("empty prediction list")
    err = p - o
    if normalization == "max":
        if not scale or scale <= 0:
            raise ContractError("normalized RMSE needs a positive scale")
        err = err / scale
    elif normalization != "raw":
        raise ContractError(f"unknown normalization {normalization!r}")
    return float(np.sqrt(np.mean(err * err)))


def coefficient_of_variation(values: Sequence[float]) -> Optional[float]:
    """Sample std (n-1) over mean; ``None`` when the mean is zero."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ContractError("coefficient of variation needs at least two values")
    m = v.mean()
    if m == 0:
        return None
    return float(v.std(ddof=1) / m)


def relative_improvement(ours: float, best_baseline: float) -> float:
    """``(best_baseline - ours) / best_baseline`` in percent."""
    return float((best_baseline - ours) / best_baseline * 100.0)


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


# -- variance comparison -------------------------------------------------------

@dataclass
class StaticFixture:
    """Discrete ``X`` with law ``p_x``, propensity ``pi(x)`` and a discrete
    law for ``Y | X = x, A = 1`` on ``y_values`` with rows ``y_probs[x]``."""

    p_x: np.ndarray
    pi: np.ndarray
    y_values: np.ndarray
    y_probs: np.ndarray

    def __post_init__(self):
        self.p_x = np.asarray(self.p_x, dtype=np.float64)
        self.pi = np.asarray(self.pi, dtype=np.float64)
        self.y_values = np.asarray(self.y_values, dtype=np.float64)
        self.y_probs = np.atleast_2d(np.asarray(self.y_probs, dtype=np.float64))
        # pi = 1 is allowed (the equality case); pi = 0 breaks positivity
        if np.any(self.pi <= 0) or np.any(self.pi > 1):
            raise ContractError("positivity: propensities must lie in (0, 1]")
        if not np.isclose(self.p_x.sum(), 1.0) or not np.allclose(self.y_probs.sum(axis=1), 1.0):
            raise ContractError("fixture laws must sum to one")


@dataclass
class VarianceReport:
    var_ipw: float
    var_gcomp: float
    gap: float
    gap_closed_form: float
    emp_var_ipw: float
    emp_var_gcomp: float
    se_ipw: float
    se_gcomp: float
    n: int


def _law(fx: StaticFixture):
    """Joint support of (X, A, Y) with probabilities, for A in {0, 1}."""
    rows = []
    for x, px in enumerate(fx.p_x):
        for a in (0, 1):
            pa = fx.pi[x] if a else 1.0 - fx.pi[x]
            if pa == 0:
                continue
            for y, py in zip(fx.y_values, fx.y_probs[x]):
                # Y under A = 0 never enters either pseudo-outcome; use y with the same law
                rows.append((x, a, y, px * pa * py))
    return rows


def _moments(values: np.ndarray, probs: np.ndarray) -> tuple:
    mu = np.sum(probs * values)
    c = values - mu
    var = np.sum(probs * c * c)
    m4 = np.sum(probs * c ** 4)
    return float(var), float(m4)


def variance_comparison(fx: StaticFixture, n: int = 100_000, seed: int = 0) -> VarianceReport:
    """Exact and empirical variance of the IPW pseudo-outcome ``Y A / pi(X)``
    against the regression pseudo-outcome ``E[Y | X, A = 1]``."""
    g1 = fx.y_probs @ fx.y_values  # E[Y | X, A=1]
    s2 = fx.y_probs @ (fx.y_values ** 2)  # E[Y^2 | X, A=1]
    law = _law(fx)
    probs = np.array([r[3] for r in law])
    ipw_vals = np.array([r[2] * r[1] / fx.pi[r[0]] for r in law])
    g_vals = np.array([g1[r[0]] for r in law])
    var_ipw, m4_ipw = _moments(ipw_vals, probs)
    var_g, m4_g = _moments(g_vals, probs)
    closed = float(np.sum(fx.p_x * ((1.0 / fx.pi - 1.0) * s2 + (s2 - g1 ** 2))))

    from .rng import stream

    rng = stream(seed, "variance-comparison")
    idx = rng.choice(len(law), size=n, p=probs / probs.sum())
    emp_ipw = float(np.var(ipw_vals[idx], ddof=1))
    emp_g = float(np.var(g_vals[idx], ddof=1))
    se = lambda var, m4: float(np.sqrt(max(m4 - var * var, 0.0) / n))
    return VarianceReport(var_ipw, var_g, var_ipw - var_g, closed, emp_ipw, emp_g,
                          se(var_ipw, m4_ipw), se(var_g, m4_g), n)


def prop3_fixture() -> StaticFixture:
    """Three-level ``X`` with unequal overlap and noisy outcomes."""
    return StaticFixture(
        p_x=[0.5, 0.3, 0.2],
        pi=[0.8, 0.4, 0.1],
        y_values=[0.0, 1.0, 2.0],
        y_probs=[[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.2, 0.7]],
    )


# -- estimators and DGPs ------------------------------------------------------

def _fit_model(cls):
    def run(train_ds, cfg):
        m = cls.for_dataset(train_ds, cfg)
        fit(m, train_ds)
        return m
    return run


ESTIMATORS: dict = {
    "igc": _fit_model(IgcModel),
    "igc_biased": _fit_model(BiasedIgcModel),
    "history": _fit_model(HistoryRegressor),
    "ipw": fit_ipw,
    "mc_gcomp": mc_gcomp,
}

BASELINES = ("history", "ipw", "mc_gcomp", "igc_biased")


@dataclass
class BenchmarkSpec:
    dgp: str = "tumor"  # tumor | scm | semisynth
    dgp_params: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)  # gamma / rho_ov / omega / corruption -> list
    estimators: list = field(default_factory=lambda: ["igc"])
    taus: list = field(default_factory=lambda: [2])
    N: int = 500
    N_test: int = 300
    seeds: list = field(default_factory=lambda: [0])
    a_bar: Optional[list] = None
    train: dict = field(default_factory=dict)
    oracle_draws: int = 1000
    n_queries: int = 50  # discrete SCM only
    record_runtime: bool = False

    def validate(self) -> None:
        if self.dgp not in ("tumor", "scm", "semisynth"):
            raise ContractError(f"unknown dgp {self.dgp!r}")
        if not self.estimators:
            raise ContractError("need at least one estimator")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ContractError(f"unknown estimator {e!r}")
        for k in self.grid:
            if k not in GRID_KEYS:
                raise ContractError(f"unknown grid key {k!r}")

    def cells(self) -> list:
        keys = list(self.grid)
        return [dict(zip(keys, vals)) for vals in itertools.product(*(self.grid[k] for k in keys))] or [{}]

    def to_dict(self) -> dict:
        return asdict(self)


GRID_KEYS = ("gamma", "rho_ov", "omega", "corruption")
CSV_HEADER = ["estimator", "dgp", "gamma", "rho", "omega", "corruption", "tau", "N", "seed",
              "rmse", "rmse_norm", "cv_group", "runtime_s", "n_queries"]


@dataclass
class ResultRow:
    estimator: str
    dgp: str
    gamma: float
    rho: float
    omega: float
    corruption: float
    tau: int
    N: int
    seed: int
    rmse: float
    rmse_norm: float
    cv_group: str
    runtime_s: Optional[float]
    n_queries: int
    error: Optional[str] = None


def default_a_bar(dgp: str, tau: int, d_a: int) -> np.ndarray:
    a = np.zeros((tau, d_a))
    a[0] = 1.0
    return a


def build_data(spec: BenchmarkSpec, cell: dict, tau: int, seed: int, a_bar: Optional[np.ndarray]) -> tuple:
    """Train set, test set, queries, normalization scale and the a_bar used."""
    if spec.dgp == "tumor":
        kw = dict(spec.dgp_params)
        for k in ("gamma", "rho_ov", "omega"):
            if k in cell:
                kw[k] = cell[k]
        params = TumorParams(**kw)
        a = default_a_bar("tumor", tau, 2) if a_bar is None else a_bar
        train = simulate_tumor_dataset(params, spec.N, seed)
        test = simulate_tumor_dataset(params, spec.N_test, seed, id_offset=TEST_ID_OFFSET)
        queries = make_tumor_queries(params, test, a, seed, draws=spec.oracle_draws)
        return train, test, queries, params.V_max, a
    if spec.dgp == "scm":
        scm = confounded_scm(**spec.dgp_params)
        a = np.ones((tau, 1)) if a_bar is None else a_bar
        train = simulate_scm_dataset(scm, spec.N, seed)
        test = simulate_scm_dataset(scm, spec.N_test, seed, id_offset=TEST_ID_OFFSET)
        queries = make_scm_queries(scm, test, spec.n_queries, a[1:, 0], seed, a_first=a[0, 0])
        return train, test, queries, 1.0, a
    params = SemiSynthParams(**spec.dgp_params)
    a = default_a_bar("semisynth", tau, params.d_a) if a_bar is None else a_bar
    train = simulate_semisynth_dataset(params, spec.N, seed)
    test = simulate_semisynth_dataset(params, spec.N_test, seed, id_offset=TEST_ID_OFFSET)
    queries = make_semisynth_queries(params, seed, test, a, seed)
    scale = float(np.max(np.abs(np.concatenate([t.Y for t in train]))))
    return train, test, queries, scale, a


def estimator_config(spec: BenchmarkSpec, estimator: str, cell: dict, tau: int, seed: int, a: np.ndarray,
                     y_std: float = 1.0) -> TrainConfig:
    """Training config of one estimator in one sweep task; corruption applies to IGC only."""
    kw = dict(spec.train)
    if isinstance(kw.get("backbone"), dict):
        kw["backbone"] = BackboneConfig(**kw["backbone"])
    kw.update(tau=tau, seed=seed + MODEL_SEED_OFFSET, a_bar=np.asarray(a).astype(int).tolist())
    if estimator == "igc":
        kw["corruption_bias"] = float(cell.get("corruption", 0.0)) * y_std
    return TrainConfig(**kw)


def _cell_key(estimator, dgp, cell, tau) -> str:
    return "|".join([estimator, dgp, *(f"{k}={cell.get(k, '')}" for k in GRID_KEYS), f"tau={tau}"])


def run_task(spec: BenchmarkSpec, cell: dict, tau: int, seed: int) -> list:
    """All estimators for one (cell, tau, seed); they share the data."""
    a_bar = None if spec.a_bar is None else np.asarray(spec.a_bar, dtype=np.float64)
    train, test, queries, scale, a = build_data(spec, cell, tau, seed, a_bar)
    oracle = np.stack([q.oracle for q in queries])
    y_std = float(np.concatenate([t.Y for t in train]).std())
    rows = []
    for est in spec.estimators:
        t0 = time.perf_counter()
        err, r, rn = None, float("nan"), float("nan")
        try:
            model = ESTIMATORS[est](train, estimator_config(spec, est, cell, tau, seed, a, y_std))
            pred = predict_queries(model, test, queries)
            r = rmse(pred, oracle)
            rn = rmse(pred, oracle, "max", scale)
        except Exception as exc:  # a failed cell is recorded, the sweep goes on
            log.warning("cell failed: %s %s tau=%s seed=%s: %s", est, cell, tau, seed, exc)
            err = f"{type(exc).__name__}: {exc}"
        runtime = time.perf_counter() - t0
        rows.append(ResultRow(
            estimator=est, dgp=spec.dgp,
            gamma=float(cell.get("gamma", spec.dgp_params.get("gamma", float("nan")))),
            rho=float(cell.get("rho_ov", spec.dgp_params.get("rho_ov", 1.0))),
            omega=float(cell.get("omega", spec.dgp_params.get("omega", 0.0))),
            corruption=float(cell.get("corruption", 0.0)),
            tau=tau, N=spec.N, seed=seed, rmse=r, rmse_norm=rn,
            cv_group=_cell_key(est, spec.dgp, cell, tau),
            runtime_s=runtime if spec.record_runtime else None,
            n_queries=len(queries), error=err,
        ))
    return rows


def _task(args):
    return run_task(*args)


def run_sweep(spec: BenchmarkSpec, jobs: int = 1) -> list:
    """Every (cell, tau, seed) task; rows come back in a fixed order."""
    spec.validate()
    tasks = [(spec, cell, tau, seed) for cell in spec.cells() for tau in spec.taus for seed in spec.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_task, tasks))
    else:
        results = [_task(t) for t in tasks]
    return [row for rows in results for row in rows]


# -- reports -----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(v)
    return str(v)


def results_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(getattr(r, k)) for k in CSV_HEADER])
    return buf.getvalue()


def summarize(rows: Sequence[ResultRow]) -> dict:
    """Per cell and estimator: mean, std, cv; per cell: relative improvement of
    ``igc`` over the best other estimator present."""
    groups: dict = {}
    for r in rows:
        cell = (r.dgp, r.gamma, r.rho, r.omega, r.corruption, r.tau)
        groups.setdefault(cell, {}).setdefault(r.estimator, []).append(r.rmse)
    cells = []
    for cell, by_est in groups.items():
        entry = {"dgp": cell[0], "gamma": cell[1], "rho": cell[2], "omega": cell[3],
                 "corruption": cell[4], "tau": cell[5], "estimators": {}}
        for est, vals in by_est.items():
            v = np.asarray(vals, dtype=np.float64)
            ok = v[np.isfinite(v)]
            entry["estimators"][est] = {
                "mean": float(ok.mean()) if ok.size else None,
                "std": float(ok.std(ddof=1)) if ok.size > 1 else None,
                "cv": coefficient_of_variation(ok) if ok.size > 1 else None,
                "n": int(ok.size),
            }
        others = [s["mean"] for e, s in entry["estimators"].items() if e != "igc" and s["mean"] is not None]
        ours = entry["estimators"].get("igc", {}).get("mean")
        entry["relative_improvement_pct"] = relative_improvement(ours, min(others)) if ours is not None and others else None
        cells.append(entry)
    return {"cells": cells, "note": "orderings, not absolute values, are the comparison targets"}


def write_results(rows: Sequence[ResultRow], csv_path, json_path=None, meta: Optional[dict] = None) -> None:
    write_atomic(csv_path, results_to_csv(rows))
    if json_path is not None:
        summary = summarize(rows)
        summary["meta"] = meta or {}
        write_atomic(json_path, json.dumps(summary, indent=2, sort_keys=True, default=_json_float) + "\n")


def _json_float(o):
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)
