import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igcnet.autodiff import ContractError
from igcnet.datagen import (
    CapoQuery,
    Dataset,
    SemiSynthParams,
    Trajectory,
    TumorParams,
    confounded_scm,
    dataset_to_csv,
    gformula,
    load_dataset,
    load_queries,
    naive_conditional,
    null_effect_scm,
    save_dataset,
    save_queries,
    semisynth_counterfactual,
    simulate_counterfactual_oracle,
    simulate_scm_dataset,
    simulate_semisynth_dataset,
    simulate_tumor_dataset,
)
from igcnet.datagen.dataset import dataset_to_jsonl
from igcnet.datagen.scm import (
    MAX_PATHS,
    DiscreteScm,
    OracleOverflow,
    discrete_scm_oracle,
    gformula_matrix,
    make_scm_queries,
    mc_oracle,
)
from igcnet.datagen.semisynth import SemiSynthWorld, _rollout, _unit_draws, untreated_outcomes
from igcnet.datagen.tumor import (
    assignment_prob,
    diameter_summary,
    diameter_to_volume,
    make_tumor_queries,
    tumor_step,
    volume_to_diameter,
)

# -- tumor step --------------------------------------------------------------------------

def test_carrying_capacity_is_fixed_point():
    p = TumorParams(D_max=40.0)  # keep K below the volume cap
    assert tumor_step(p.K, 0.0, 0.0, 0.0, 0.0, p) == pytest.approx(p.K, rel=1e-15)


def test_chemo_only_halves():
    p = TumorParams(rho=0.0, alpha_c=1.0)
    assert tumor_step(2.0, 0.5, 0.0, 0.0, 0.0, p) == pytest.approx(1.0, rel=1e-15)


@given(st.floats(0.01, 500), st.floats(0, 10), st.floats(0, 4), st.floats(-0.3, 0.3), st.floats(-2, 2),
       st.floats(0, 0.5))
@settings(max_examples=100)
def test_step_matches_scalar_formula(Y, c, d, eps, U, omega):
    p = TumorParams(omega=omega)
    f = 1 + p.rho * math.log(p.K / Y) - p.alpha_c * c - (p.alpha_r * d + p.beta_r * d**2) + eps + omega * U
    expected = min(max(f * Y, p.min_volume), p.V_max)
    assert tumor_step(Y, c, d, eps, U, p) == pytest.approx(expected, rel=1e-12, abs=1e-15)


def test_step_rejects_nonpositive_volume():
    with pytest.raises(ContractError):
        tumor_step(0.0, 0, 0, 0, 0, TumorParams())


def test_step_is_bounded():
    p = TumorParams()
    assert tumor_step(p.V_max, 0, 0, 5.0, 0, p) == p.V_max
    assert tumor_step(1.0, 100.0, 0, 0, 0, p) == p.min_volume


@pytest.mark.parametrize("kw", [dict(K_diameter=0), dict(D_max=-1), dict(sigma_eps=-0.1), dict(gamma=-1),
                                dict(rho_ov=0), dict(omega=-1), dict(window=0), dict(T_min=5, T_max=4)])
def test_invalid_params(kw):
    with pytest.raises(ValueError):
        TumorParams(**kw)


def test_diameter_volume_round_trip():
    d = np.array([0.5, 3.0, 13.0])
    assert np.allclose(volume_to_diameter(diameter_to_volume(d)), d, rtol=1e-14)


def test_diameter_window_uses_available_history():
    Y = diameter_to_volume(np.array([1.0, 2.0, 3.0, 4.0]))
    assert diameter_summary(Y, 15) == pytest.approx(2.5)
    assert diameter_summary(Y, 2) == pytest.approx(3.5)


# -- assignment ---------------------------------------------------------------------------

def test_midpoint_gives_half():
    p = TumorParams()
    assert assignment_prob(p.D_max / 2, 0.0, p) == 0.5


def test_no_confounding_gives_half():
    p = TumorParams(gamma=0.0)
    assert np.all(assignment_prob(np.array([0.5, 6.0, 13.0]), 1.3, p) == 0.5)


@pytest.mark.parametrize("rho_ov", [0.5, 1.0, 1.5])
def test_full_diameter_logit(rho_ov):
    p = TumorParams(gamma=10.0, rho_ov=rho_ov)
    assert assignment_prob(p.D_max, 0.0, p) == pytest.approx(1 / (1 + math.exp(-5 * rho_ov)), rel=1e-14)
    if rho_ov == 1.0:
        assert assignment_prob(p.D_max, 0.0, p) == pytest.approx(0.99331, abs=1e-5)


def test_unobserved_confounder_shifts_logit():
    p = TumorParams(omega=0.5)
    assert assignment_prob(p.D_max / 2, 2.0, p) == pytest.approx(1 / (1 + math.exp(-0.4)), rel=1e-14)


# -- tumor datasets --------------------------------------------------------------------------

def test_tumor_is_deterministic():
    p = TumorParams(sigma_eps=0.0, gamma=0.0)
    a, b = simulate_tumor_dataset(p, 20, 3), simulate_tumor_dataset(p, 20, 3)
    assert dataset_to_jsonl(a) == dataset_to_jsonl(b)


def test_trajectories_depend_only_on_index():
    p = TumorParams()
    full = simulate_tumor_dataset(p, 10, 1)
    tail = simulate_tumor_dataset(p, 4, 1, id_offset=6)
    for a, b in zip(full.trajectories[6:], tail.trajectories):
        assert a.id == b.id and np.array_equal(a.Y, b.Y) and np.array_equal(a.A, b.A)


def test_lengths_within_range():
    ds = simulate_tumor_dataset(TumorParams(T_min=5, T_max=9), 60, 0)
    lengths = {tr.T for tr in ds}
    assert min(lengths) >= 5 and max(lengths) <= 9 and len(lengths) > 1


def _diameter_treatment_corr(gamma):
    p = TumorParams(gamma=gamma)
    ds = simulate_tumor_dataset(p, 300, 0)
    d, a = [], []
    for tr in ds:
        for t in range(tr.T):
            d.append(diameter_summary(tr.Y[: t + 1, 0], p.window))
            a.append(tr.A[t, 0])
    return np.corrcoef(d, a)[0, 1]


def test_confounding_raises_correlation():
    assert _diameter_treatment_corr(20.0) > _diameter_treatment_corr(0.0)


def _extreme_fraction(rho_ov):
    ds = simulate_tumor_dataset(TumorParams(gamma=20.0, rho_ov=rho_ov), 300, 0)
    p = np.concatenate([tr.true_propensities.reshape(-1) for tr in ds])
    return np.mean((p < 0.05) | (p > 0.95))


def test_overlap_scale_creates_extremes():
    assert _extreme_fraction(1.5) > _extreme_fraction(0.5)


# -- tumor oracle ----------------------------------------------------------------------------

def test_noise_free_oracle_is_one_rollout():
    p = TumorParams(sigma_eps=0.0)
    tr = simulate_tumor_dataset(p, 1, 0)[0]
    a = np.array([[1, 0], [0, 1]])
    m1, se1 = simulate_counterfactual_oracle(p, tr, 3, a, draws=1)
    m2, se2 = simulate_counterfactual_oracle(p, tr, 3, a, draws=500)
    assert m1 == m2 and se1 == se2 == 0.0


@pytest.mark.parametrize("tau", [1, 2, 4])
def test_untreated_oracle_at_capacity(tau):
    p = TumorParams(sigma_eps=0.0, D_max=40.0)
    tr = Trajectory(id=0, Y=np.full((6, 1), p.K), X=np.zeros((6, 0)), A=np.zeros((6, 2)))
    m, _ = simulate_counterfactual_oracle(p, tr, 1, np.zeros((tau, 2)))
    assert m == pytest.approx(p.K, rel=1e-14)


def test_oracle_error_shrinks_with_draws():
    p = TumorParams(sigma_eps=0.1)
    tr = simulate_tumor_dataset(p, 1, 0)[0]
    se = [simulate_counterfactual_oracle(p, tr, 3, np.ones((3, 2)), draws=n)[1] for n in (100, 10_000)]
    assert 8 < se[0] / se[1] < 12


def test_oracle_rejects_zero_draws():
    p = TumorParams()
    tr = simulate_tumor_dataset(p, 1, 0)[0]
    with pytest.raises(ContractError):
        simulate_counterfactual_oracle(p, tr, 3, np.ones((2, 2)), draws=0)


def test_oracle_reproduces_factual_path_without_noise():
    """Consistency: forcing the observed treatments recovers the observed outcome."""
    p = TumorParams(sigma_eps=0.0)
    for tr in simulate_tumor_dataset(p, 5, 2):
        m, _ = simulate_counterfactual_oracle(p, tr, 4, tr.A[4:7])
        assert m == pytest.approx(tr.Y[7, 0], rel=1e-12)


def test_tumor_queries_stay_inside_trajectories():
    p = TumorParams(T_min=6, T_max=12)
    ds = simulate_tumor_dataset(p, 30, 0)
    qs = make_tumor_queries(p, ds, np.ones((3, 2)), seed=1, draws=10)
    by_id = ds.by_id()
    assert qs and all(1 <= q.t and q.t + q.tau <= by_id[q.trajectory_id].T - 1 for q in qs)
    assert all(q.oracle_method == "mc:10" for q in qs)


# -- semi-synthetic -------------------------------------------------------------------------

def test_semisynth_shapes_and_positivity():
    p = SemiSynthParams()
    ds = simulate_semisynth_dataset(p, 10, 0)
    tr = ds[0]
    assert tr.Y.shape[1] == 2 and tr.X.shape[1] == p.d_x and tr.A.shape[1] == 3
    props = np.concatenate([t.true_propensities.reshape(-1) for t in ds])
    assert np.all((props > 0) & (props < 1))


def test_no_effect_means_untreated():
    p = SemiSynthParams(beta=[[0.0, 0.0]] * 3)
    for tr in simulate_semisynth_dataset(p, 5, 0):
        assert np.array_equal(tr.Y, tr.extra["Y_untreated"])


def test_outcomes_ignore_covariates_when_ablated():
    p = SemiSynthParams(alpha_f=[0.0, 0.0], gamma_x=[0.0, 0.0, 0.0])
    world = SemiSynthWorld(p, 0)
    draws = _unit_draws(p, 0, 3)
    base = _rollout(p, world, draws, untreated_outcomes(p, world, draws))[0]
    draws["X"] = draws["X"][::-1] * 7.0
    assert np.array_equal(base, _rollout(p, world, draws, untreated_outcomes(p, world, draws))[0])


@pytest.mark.parametrize("l", [0, 1, 2])
def test_single_treatment_effect_support(l):
    p = SemiSynthParams(T_min=20, T_max=20)
    world = SemiSynthWorld(p, 0)
    draws = _unit_draws(p, 0, 0)
    Y0 = untreated_outcomes(p, world, draws)
    s = 5
    none = np.zeros((20, 3))
    once = none.copy()
    once[s, l] = 1
    diff = _rollout(p, world, draws, Y0, once)[0] - _rollout(p, world, draws, Y0, none)[0]
    support = np.flatnonzero(np.any(diff != 0, axis=1))
    # assigned after Y[s], so the effect reaches Y[s+1] .. Y[s+1+window]
    assert support.tolist() == list(range(s + 1, s + 2 + p.windows[l]))


def test_semisynth_counterfactual_is_consistent():
    p = SemiSynthParams()
    ds = simulate_semisynth_dataset(p, 4, 0)
    for tr in ds:
        assert np.allclose(semisynth_counterfactual(p, 0, tr, 3, tr.A[3:5]), tr.Y[5], rtol=0, atol=1e-12)


def test_semisynth_params_validated():
    with pytest.raises(ValueError):
        SemiSynthParams(windows=[0, 1, 1])
    with pytest.raises(ValueError):
        SemiSynthParams(n_rff=0)


# -- discrete SCM ----------------------------------------------------------------------------

def test_tau1_gformula_is_the_kernel_mean():
    scm = confounded_scm()
    for s0 in range(scm.n_states):
        for a in (0, 1):
            expected = scm.kernel[s0, a] @ scm.y_value
            assert gformula(scm, s0, [a]) == pytest.approx(expected, rel=1e-14)
            assert naive_conditional(scm, s0, [a]) == pytest.approx(expected, rel=1e-14)


def test_null_effect_ignores_treatment():
    scm = null_effect_scm()
    vals = {gformula(scm, 1, a) for a in ([0, 0], [0, 1], [1, 0], [1, 1])}
    assert max(vals) - min(vals) < 1e-15


def test_confounded_fixture_has_strict_gap():
    scm = confounded_scm()
    for s0 in range(scm.n_states):
        assert naive_conditional(scm, s0, [1, 1]) - gformula(scm, s0, [1, 1]) > 0.01


def test_two_state_gap_by_hand():
    """Two states, tau = 2: enumerate both orders by hand."""
    kernel = np.array([[[0.8, 0.2], [0.3, 0.7]], [[0.6, 0.4], [0.1, 0.9]]])
    scm = DiscreteScm(1, 2, kernel, np.array([0.2, 0.9]), np.array([0.5, 0.5]), T=3)
    g = 0.3 * 0.7 + 0.7 * 0.9
    naive = (0.3 * 0.2 * 0.7 + 0.7 * 0.9 * 0.9) / (0.3 * 0.2 + 0.7 * 0.9)
    assert gformula(scm, 0, [1, 1]) == pytest.approx(g, rel=1e-14)
    assert naive_conditional(scm, 0, [1, 1]) == pytest.approx(naive, rel=1e-14)
    assert naive > g


@given(st.integers(0, 3), st.lists(st.integers(0, 1), min_size=1, max_size=4))
def test_enumeration_matches_propagation(s0, a):
    scm = confounded_scm()
    assert gformula(scm, s0, a) == pytest.approx(gformula_matrix(scm, s0, a), rel=1e-12, abs=1e-15)


def test_mc_oracle_within_three_se():
    scm = confounded_scm()
    m, se = mc_oracle(scm, 2, [1, 0, 1], 200_000, np.random.default_rng(0))
    assert abs(m - gformula(scm, 2, [1, 0, 1])) < 3 * se


def test_enumeration_guard():
    scm = confounded_scm()
    tau = int(math.log(MAX_PATHS, scm.n_states)) + 1
    with pytest.raises(OracleOverflow):
        gformula(scm, 0, [1] * tau)


def test_scm_positivity_enforced():
    scm = confounded_scm()
    with pytest.raises(ValueError):
        DiscreteScm(2, 2, scm.kernel, np.array([0.0, 0.5, 0.5, 0.5]), scm.init)
    bad = scm.kernel.copy()
    bad[0, 0, 0] += 0.1
    with pytest.raises(ValueError):
        DiscreteScm(2, 2, bad, scm.propensity, scm.init)


def test_scm_propensities_match_frequencies():
    scm = confounded_scm()
    ds = simulate_scm_dataset(scm, 10_000, 0)
    s = np.concatenate([[scm.state_of(tr, t) for t in range(tr.T)] for tr in ds])
    a = np.concatenate([tr.A[:, 0] for tr in ds])
    for k in range(scm.n_states):
        sel = s == k
        p = scm.propensity[k]
        assert abs(a[sel].mean() - p) < 3 * math.sqrt(p * (1 - p) / sel.sum())


def test_scm_oracle_dict_and_queries():
    scm = confounded_scm()
    ds = simulate_scm_dataset(scm, 100, 0)
    out = discrete_scm_oracle(scm, ds[0], 1, [1, 1])
    assert set(out) == {"gformula", "naive"}
    qs = make_scm_queries(scm, ds, 20, [1], seed=3, a_first=1)
    assert len(qs) == 20 and len({q.trajectory_id for q in qs}) == 20
    assert all(q.a_seq[0, 0] == 1 and q.oracle_method == "enumeration" for q in qs)


# -- files -----------------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = simulate_semisynth_dataset(SemiSynthParams(), 3, 0)
    save_dataset(ds, tmp_path / "d.jsonl")
    back = load_dataset(tmp_path / "d.jsonl")
    assert back.meta == ds.meta
    assert dataset_to_jsonl(back) == dataset_to_jsonl(ds)
    assert not list(tmp_path.glob("*.partial"))


def test_queries_round_trip(tmp_path):
    qs = [CapoQuery(3, 2, [[1, 0], [0, 1]], oracle=[1.5], oracle_se=0.1, oracle_method="mc:10"),
          CapoQuery(4, 1, [[1, 1]])]
    save_queries(qs, tmp_path / "q.jsonl", {"seed": 1})
    back, meta = load_queries(tmp_path / "q.jsonl")
    assert meta == {"seed": 1}
    assert [q.to_record() for q in back] == [q.to_record() for q in qs]


def test_csv_has_one_row_per_step():
    ds = simulate_tumor_dataset(TumorParams(T_min=4, T_max=6), 3, 0)
    lines = dataset_to_csv(ds).strip().split("\n")
    assert lines[0] == "id,T,t,Y0,A0,A1,p0,p1,U"
    assert len(lines) == 1 + sum(tr.T for tr in ds)


def test_trajectory_rejects_non_binary_treatment():
    with pytest.raises(ValueError):
        Trajectory(id=0, Y=np.zeros((2, 1)), X=np.zeros((2, 0)), A=np.array([[0.5], [1.0]]))


def test_prefix_keeps_history():
    tr = simulate_tumor_dataset(TumorParams(), 1, 0)[0]
    pre = tr.prefix(4)
    assert pre.T == 5 and np.array_equal(pre.Y, tr.Y[:5])


def test_split_is_contiguous_and_complete():
    ds = Dataset([Trajectory(id=i, Y=np.zeros((2, 1)), X=np.zeros((2, 0)), A=np.zeros((2, 1))) for i in range(7)])
    parts = ds.split([0.5, 0.5])
    assert [tr.id for p in parts for tr in p] == list(range(7))
