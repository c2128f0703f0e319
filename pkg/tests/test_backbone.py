import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igcnet.autodiff import ContractError, ParamStore, Tensor, backward, ops
from igcnet.backbone import (
    BackboneConfig,
    ConfigError,
    HistoryBatch,
    Scaler,
    build_backbone,
    encode_history,
    make_batch,
    multi_head_attention,
    relative_index,
    substitute_treatments,
)
from igcnet.datagen import Trajectory


def _traj(seed, T=6, d_y=1, d_x=2, d_a=2, d_s=0, tid=0):
    rng = np.random.default_rng(seed)
    return Trajectory(id=tid, Y=rng.normal(size=(T, d_y)), X=rng.normal(size=(T, d_x)),
                      A=(rng.random((T, d_a)) < 0.5).astype(float), static=rng.normal(size=d_s))


def _backbone(kind, d_y=1, d_x=2, d_a=2, seed=0, **kw):
    cfg = BackboneConfig(kind=kind, d_h=4, d_z=3, dropout=0.0, n_heads=2, l_max=3, d_ff=5, **kw)
    store = ParamStore(seed)
    return store, build_backbone(store, cfg, d_y, d_x, d_a)


def _batch(trajs):
    return make_batch(trajs, Scaler.identity(trajs[0].Y.shape[1], trajs[0].X.shape[1]))


# -- LSTM -----------------------------------------------------------------------

def test_lstm_zero_weights_give_zero_states():
    store, bb = _backbone("lstm")
    for p in store:
        p.values[...] = 0.0
    Z = bb(_batch([_traj(0)])).values
    assert np.all(Z == 0.0)


def test_lstm_single_step_hand_trace():
    i, f, g, o = 0.3, -0.2, 0.5, 1.1
    h = ops.lstm_recurrence(Tensor(np.array([[[i, f, g, o]]])), Tensor(np.zeros((1, 4))), np.ones((1, 1)))
    sig = lambda v: 1 / (1 + math.exp(-v))
    c = sig(i) * math.tanh(g)
    assert h.values[0, 0, 0] == pytest.approx(sig(o) * math.tanh(c), abs=1e-15)


def test_lstm_two_step_hand_trace():
    sig = lambda v: 1 / (1 + math.exp(-v))
    pre = np.array([[[0.1, 0.2, -0.3, 0.4], [0.5, -0.6, 0.7, 0.8]]])
    w = np.array([[0.3, -0.1, 0.2, 0.5]])
    h = ops.lstm_recurrence(Tensor(pre), Tensor(w), np.ones((1, 2))).values
    c1 = sig(0.1) * math.tanh(-0.3)
    h1 = sig(0.4) * math.tanh(c1)
    a = pre[0, 1] + h1 * w[0]
    c2 = sig(a[1]) * c1 + sig(a[0]) * math.tanh(a[2])
    assert h[0, 1, 0] == pytest.approx(sig(a[3]) * math.tanh(c2), abs=1e-15)


# -- causality --------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["lstm", "transformer"])
@pytest.mark.parametrize("t", [0, 2, 4])
def test_future_inputs_do_not_change_past_states(kind, t):
    _, bb = _backbone(kind)
    tr = _traj(1)
    base = bb(_batch([tr])).values
    rng = np.random.default_rng(t)
    pert = Trajectory(id=0, Y=tr.Y.copy(), X=tr.X.copy(), A=tr.A.copy())
    pert.Y[t + 1:] += rng.normal(size=pert.Y[t + 1:].shape)
    pert.X[t + 1:] += rng.normal(size=pert.X[t + 1:].shape)
    pert.A[t:] = 1 - pert.A[t:]  # A_t only reaches the input at t + 1
    out = bb(_batch([pert])).values
    if kind == "lstm":
        assert np.array_equal(out[0, : t + 1], base[0, : t + 1])
    else:
        assert np.max(np.abs(out[0, : t + 1] - base[0, : t + 1])) < 1e-12
    assert not np.allclose(out[0, t + 1:], base[0, t + 1:])


def test_attention_gradient_ignores_future_values():
    rng = np.random.default_rng(0)
    q, k, v = (Tensor(rng.normal(size=(1, 5, 4)), requires_grad=True) for _ in range(3))
    out = multi_head_attention(q, k, v, heads=2, l_max=2)
    backward(ops.sum_(ops.slice_(out, (0, 2))))
    assert np.all(v.grad[0, 3:] == 0) and np.all(k.grad[0, 3:] == 0)
    assert np.any(v.grad[0, :3] != 0)


# -- attention --------------------------------------------------------------------

def test_uniform_scores_give_running_mean():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(1, 5, 3))
    q = np.zeros((1, 5, 3))
    out = multi_head_attention(Tensor(q), Tensor(q), Tensor(v), heads=1).values
    expected = np.cumsum(v[0], axis=0) / np.arange(1, 6)[:, None]
    assert np.allclose(out[0], expected, atol=1e-14)


def test_causal_output_invariant_to_future_values():
    rng = np.random.default_rng(1)
    q, k, v = (rng.normal(size=(1, 6, 4)) for _ in range(3))
    a = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads=2).values
    v2 = v.copy()
    v2[0, 4:] = 100.0
    b = multi_head_attention(Tensor(q), Tensor(k), Tensor(v2), heads=2).values
    assert np.array_equal(a[0, :4], b[0, :4])


def test_dominant_key_saturates():
    T, d = 4, 2
    q = np.zeros((1, T, d))
    q[0, :, 0] = 1.0
    k = np.zeros((1, T, d))
    k[0, 1, 0] = 50.0 * math.sqrt(d)  # logit +50 for key 1
    v = np.random.default_rng(2).normal(size=(1, T, d))
    out = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), heads=1, causal=False).values
    assert np.allclose(out[0], np.broadcast_to(v[0, 1], (T, d)), atol=1e-9)


def test_relative_index_clips():
    idx = relative_index(5, 2)
    assert idx[0, 4] == 4 and idx[4, 0] == 0 and idx[2, 2] == 2 and idx[1, 2] == 3


def test_heads_must_divide_width():
    with pytest.raises(ConfigError):
        multi_head_attention(Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 2, 5))), Tensor(np.zeros((1, 2, 5))), heads=2)
    with pytest.raises(ConfigError):
        BackboneConfig(kind="transformer", d_h=5, n_heads=2).validate()


@given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 2**16))
@settings(max_examples=25, deadline=None)
def test_tied_heads_reproduce_single_head(M, dq, seed):
    rng = np.random.default_rng(seed)
    T = 5
    q1, k1, v1 = (rng.normal(size=(1, T, dq)) for _ in range(3))
    rel1 = rng.normal(size=(1, 5))
    single = multi_head_attention(Tensor(q1), Tensor(k1), Tensor(v1), 1, Tensor(rel1), l_max=2).values
    tile = lambda a: np.concatenate([a] * M, axis=-1)
    multi = multi_head_attention(Tensor(tile(q1)), Tensor(tile(k1)), Tensor(tile(v1)), M,
                                 Tensor(np.repeat(rel1, M, axis=0)), l_max=2).values
    assert np.max(np.abs(multi - tile(single))) < 1e-10


# -- transformer ------------------------------------------------------------------

def test_transformer_without_blocks_is_output_of_mean_embedding():
    store, bb = _backbone("transformer", n_blocks=0)
    batch = _batch([_traj(3)])
    emb = [bb.embed[i](raw).values for i, raw in enumerate([batch.y, batch.x, batch.a_prev()])]
    avg = sum(emb) / 3
    lin = avg @ store["backbone.out.w"].values + store["backbone.out.b"].values
    expected = np.where(lin > 0, lin, np.expm1(np.minimum(lin, 0)))
    assert np.allclose(bb(batch).values, expected, atol=1e-14)


def test_transformer_zero_attention_keeps_residual_path():
    store, bb = _backbone("transformer", n_blocks=1)
    for name, p in store.items():
        if ".self." in name or ".cross." in name:
            p.values[...] = 0.0
    batch = _batch([_traj(4)])
    streams = []
    for i, raw in enumerate([batch.y, batch.x, batch.a_prev()]):
        e = bb.embed[i](raw).values
        s = f"backbone.block0.s{i}"
        hid = np.maximum(e @ store[f"{s}.ff1.w"].values + store[f"{s}.ff1.b"].values, 0)
        u = e + hid @ store[f"{s}.ff2.w"].values + store[f"{s}.ff2.b"].values
        u = (u - u.mean(-1, keepdims=True)) / np.sqrt(u.var(-1, keepdims=True) + 1e-5)
        streams.append(u * store[f"{s}.ln.g"].values + store[f"{s}.ln.b"].values)
    lin = sum(streams) / 3 @ store["backbone.out.w"].values + store["backbone.out.b"].values
    expected = np.where(lin > 0, lin, np.expm1(np.minimum(lin, 0)))
    assert np.allclose(bb(batch).values, expected, atol=1e-12)


def test_transformer_drops_empty_streams():
    _, bb = _backbone("transformer", d_x=0)
    tr = Trajectory(id=0, Y=np.ones((4, 1)), X=np.zeros((4, 0)), A=np.zeros((4, 2)))
    assert bb(_batch([tr])).shape == (1, 4, 3)


# -- batches and substitution ----------------------------------------------------

def test_make_batch_pads_and_masks():
    b = _batch([_traj(0, T=3), _traj(1, T=5)])
    assert b.y.shape == (2, 5, 1)
    assert b.mask[0].tolist() == [1, 1, 1, 0, 0]
    assert np.all(b.y[0, 3:] == 0)


def test_make_batch_broadcasts_statics():
    tr = _traj(0, d_s=2)
    b = make_batch([tr], Scaler.identity(1, 2, 2))
    assert np.array_equal(b.x[0, :, 2:], np.broadcast_to(tr.static, (6, 2)))


def test_make_batch_rejects_empty():
    with pytest.raises(ContractError):
        make_batch([], Scaler.identity(1, 0))
    with pytest.raises(ContractError):
        make_batch([Trajectory(id=0, Y=np.zeros((0, 1)), X=np.zeros((0, 0)), A=np.zeros((0, 1)))], Scaler.identity(1, 0))


def test_previous_treatment_alignment():
    b = _batch([_traj(0)])
    assert np.array_equal(b.a_prev()[0, 1:], b.a[0, :-1]) and np.all(b.a_prev()[0, 0] == 0)


@given(st.integers(0, 5), st.integers(0, 4), st.integers(0, 2**16))
@settings(max_examples=40)
def test_substitution_touches_only_its_range(t, n, seed):
    b = _batch([_traj(seed % 7, T=6)])
    a_bar = np.random.default_rng(seed).integers(0, 2, size=(max(n, 1), 2)).astype(float)
    s = substitute_treatments(b, np.array([t]), a_bar, n)
    changed = np.zeros(6, bool)
    changed[t: min(t + n, 6)] = True
    assert np.array_equal(s.a[0, ~changed], b.a[0, ~changed])
    assert np.array_equal(s.a[0, changed], a_bar[: changed.sum()])
    assert s.y is b.y and s.x is b.x


def test_scaler_round_trip():
    trs = [_traj(i) for i in range(4)]
    sc = Scaler.fit(trs)
    back = Scaler.from_dict(sc.to_dict())
    assert np.array_equal(sc.y_inverse(sc.y(trs[0].Y)), back.y_inverse(back.y(trs[0].Y)))
    assert np.allclose(sc.y_inverse(sc.y(trs[0].Y)), trs[0].Y, atol=1e-14)


# -- encode_history -----------------------------------------------------------------

@pytest.mark.parametrize("kind", ["lstm", "transformer"])
def test_encode_delta_zero_matches_factual(kind):
    _, bb = _backbone(kind)
    tr, sc = _traj(5), Scaler.identity(1, 2)
    a = encode_history(bb, tr, 3, 0, np.ones((2, 2)), sc)
    b = encode_history(bb, tr, 3, 0, None, sc)
    assert np.array_equal(a.z_last, b.z_last)
    assert a.provenance["kind"] == "intervened" and b.provenance["kind"] == "factual"


@pytest.mark.parametrize("kind", ["lstm", "transformer"])
def test_encode_factual_substitution_is_noop(kind):
    _, bb = _backbone(kind)
    tr, sc = _traj(6), Scaler.identity(1, 2)
    a = encode_history(bb, tr, 1, 3, tr.A[1:4], sc)
    b = encode_history(bb, tr, 1, 3, None, sc)
    assert np.array_equal(a.Z, b.Z)


def test_encode_matches_hand_spliced_history():
    _, bb = _backbone("lstm")
    tr, sc = _traj(7), Scaler.identity(1, 2)
    a_bar = np.array([[1.0, 0.0], [0.0, 1.0]])
    enc = encode_history(bb, tr, 2, 1, a_bar, sc)
    spliced = Trajectory(id=0, Y=tr.Y[:4], X=tr.X[:4], A=tr.A[:4].copy())
    spliced.A[2] = a_bar[0]
    direct = bb(make_batch([spliced], sc)).values[0, 3]
    assert np.array_equal(enc.z_last, direct)


def test_encode_rejects_short_a_bar():
    _, bb = _backbone("lstm")
    with pytest.raises(ContractError):
        encode_history(bb, _traj(0), 1, 3, np.ones((2, 2)), Scaler.identity(1, 2))
