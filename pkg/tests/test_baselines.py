import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igcnet.autodiff import ContractError
from igcnet.backbone import BackboneConfig, make_batch
from igcnet.baselines import (
    HistoryRegressor,
    IpwRegressor,
    McGcompModel,
    PropensityModel,
    fit_ipw,
    fit_propensity,
    mc_gcomp,
    sequence_weights,
    train_history_regressor,
)
from igcnet.datagen import Dataset, Trajectory, TumorParams, simulate_tumor_dataset
from igcnet.training import TrainConfig, fit


def _cfg(tau=2, **kw):
    kw.setdefault("epochs", 2)
    kw.setdefault("batch_size", 16)
    kw.setdefault("head_hidden", 4)
    kw.setdefault("a_bar", [[1, 0]] * tau)
    return TrainConfig(tau=tau, backbone=BackboneConfig(d_h=6, d_z=5, dropout=0.0), **kw)


@pytest.fixture(scope="module")
def tumor():
    return simulate_tumor_dataset(TumorParams(gamma=10, T_min=8, T_max=10), 40, 0)


def _coin_dataset(n=200, T=8, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset([Trajectory(id=i, Y=rng.normal(size=(T, 1)), X=np.zeros((T, 0)),
                               A=(rng.random((T, 1)) < 0.5).astype(float)) for i in range(n)])


# -- weights ---------------------------------------------------------------------

def test_half_propensity_two_steps_weighs_four():
    A = np.ones((4, 1))
    P = np.full((4, 1), 0.5)
    assert np.array_equal(sequence_weights(A, P, np.ones((2, 1))), [4.0, 4.0])


def test_mismatch_zeroes_weight():
    A = np.array([[1.0], [0.0], [1.0]])
    P = np.full((3, 1), 0.5)
    assert sequence_weights(A, P, np.ones((1, 1))).tolist() == [2.0, 0.0]


def test_weights_for_untreated_use_complement():
    A = np.zeros((2, 1))
    P = np.array([[0.8], [0.8]])
    assert sequence_weights(A, P, np.zeros((1, 1)))[0] == pytest.approx(5.0)


def test_short_trajectory_has_no_weights():
    assert sequence_weights(np.ones((2, 1)), np.full((2, 1), 0.5), np.ones((2, 1))).shape == (0,)


@given(st.integers(0, 2**16), st.integers(1, 3))
@settings(max_examples=30, deadline=None)
def test_weights_are_nonnegative_and_bounded(seed, tau):
    rng = np.random.default_rng(seed)
    eps = 0.01
    A = (rng.random((10, 2)) < 0.5).astype(float)
    P = np.clip(rng.random((10, 2)), eps, 1 - eps)
    W = sequence_weights(A, P, (rng.random((tau, 2)) < 0.5).astype(float))
    assert np.all(W >= 0) and np.all(W <= eps ** (-2 * tau) + 1e-9)


# -- propensity ------------------------------------------------------------------------

def test_propensity_is_clipped(tumor):
    model = PropensityModel.for_dataset(tumor, _cfg(eps_pi=0.2))
    model.out.b.values[:] = 50.0
    p = model.proba(make_batch(tumor.trajectories[:3], model.scaler))
    assert np.all(p == 0.8)


def test_coin_flip_propensity_near_half():
    ds = _coin_dataset()
    model = fit_propensity(ds, _cfg(epochs=15, lr=0.01, a_bar=[[1], [1]]))
    p = np.concatenate([q.reshape(-1) for q in model.proba_dataset(ds)])
    assert abs(p.mean() - 0.5) < 0.05
    assert np.quantile(np.abs(p - 0.5), 0.95) < 0.15


def test_calibration_covers_all_units(tumor):
    model = PropensityModel.for_dataset(tumor, _cfg())
    rows = model.calibration(tumor, bins=5)
    assert sum(r[3] for r in rows) == sum(tr.T * tr.A.shape[1] for tr in tumor)


def test_constant_treatment_warns():
    ds = Dataset([Trajectory(id=i, Y=np.ones((5, 1)), X=np.zeros((5, 0)), A=np.zeros((5, 1))) for i in range(8)])
    with pytest.warns(RuntimeWarning, match="degenerate"):
        fit_propensity(ds, _cfg(tau=1, epochs=1, a_bar=[[1]]))


# -- IPW -------------------------------------------------------------------------

def test_ipw_uses_disjoint_halves(tumor):
    model = fit_ipw(tumor, _cfg(epochs=1))
    assert len(model.weights) == len(tumor) - len(tumor) // 2
    assert model.propensity is not None and model.stabilized


def test_ipw_needs_prepare(tumor):
    model = IpwRegressor.for_dataset(tumor, _cfg())
    with pytest.raises(ContractError):
        fit(model, tumor)


def test_ipw_skips_batches_without_matches(tumor):
    model = IpwRegressor.for_dataset(tumor, _cfg(tau=1, a_bar=[[1, 1]], stabilized=False))
    model.weights = [np.zeros(max(tr.T - 1, 0)) for tr in tumor]
    before = {n: p.values.copy() for n, p in model.store.items()}
    fit(model, tumor)
    for n, p in model.store.items():
        assert np.array_equal(p.values, before[n]), n


# -- history regressor -------------------------------------------------------------

def test_history_prediction_depends_on_whole_sequence(tumor):
    model = train_history_regressor(tumor, _cfg(epochs=1))
    a = model.predict_batch([tumor[0]], [3], np.array([[[1, 0], [0, 0]]]))
    b = model.predict_batch([tumor[0]], [3], np.array([[[1, 0], [1, 1]]]))
    assert not np.array_equal(a, b)


# -- Monte-Carlo G-computation -------------------------------------------------------

def test_mc_needs_a_draw(tumor):
    model = McGcompModel.for_dataset(tumor, _cfg())
    with pytest.raises(ContractError):
        model.predict_batch([tumor[0]], [3], np.ones((1, 2, 2)), draws=0)


def test_mc_rollout_is_seeded(tumor):
    model = mc_gcomp(tumor, _cfg(epochs=1))
    a = np.ones((2, 2, 2))
    p1 = model.predict_batch([tumor[0], tumor[1]], [3, 4], a, draws=20, seed=4)
    p2 = model.predict_batch([tumor[0], tumor[1]], [3, 4], a, draws=20, seed=4)
    assert np.array_equal(p1, p2)


def test_mc_single_step_is_the_mean(tumor):
    model = mc_gcomp(tumor, _cfg(tau=1, epochs=1, a_bar=[[1, 0]]))
    a = np.array([[[1.0, 0.0]]])
    assert np.array_equal(model.predict_batch([tumor[0]], [3], a, draws=1),
                          model.predict_batch([tumor[0]], [3], a, draws=50, seed=9))


def test_mc_zero_variance_is_deterministic(tumor):
    model = McGcompModel.for_dataset(tumor, _cfg(tau=3, a_bar=[[1, 0]] * 3))
    raw = model.heads[0].l2.b if hasattr(model.heads[0], "l2") else None
    for p in model.store:
        if p.name.startswith("density"):
            p.values[...] = 0.0
    if raw is not None:
        raw.values[model.d_next:] = -100.0
    a = np.ones((1, 3, 2))
    p1 = model.predict_batch([tumor[0]], [3], a, draws=5, seed=0)
    p2 = model.predict_batch([tumor[0]], [3], a, draws=5, seed=1)
    assert np.allclose(p1, p2, rtol=0, atol=1e-3)
