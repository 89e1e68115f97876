"""Caption/layout/sketch encoders, Fourier features, condition dropout."""

import numpy as np
import pytest

import mvdit.conditioning as C
import mvdit.tensor as T
from mvdit import model as model_mod
from mvdit.toyworld import CameraRig


@pytest.fixture(scope="module")
def params():
    cfg = model_mod.ModelConfig(n_blocks=1, dim=16, heads=2, views=2,
                                frames=2, height=8, width=8, control_depth=0)
    return model_mod.init_params(cfg, np.random.default_rng(0)), cfg


# ---------------------------------------------------------------------------
# Captions


def test_vocab_has_64_words_and_reserved_ids():
    vocab = C.load_vocab()
    assert len(vocab) == 64
    assert vocab[C.PAD_ID] == "<pad>"
    assert vocab[C.UNK_ID] == "<unk>"
    assert len(set(vocab)) == 64


def test_tokenize_empty_is_all_padding():
    assert list(C.tokenize_caption("")) == [C.PAD_ID] * C.L_TEXT


def test_tokenize_known_words():
    vocab = C.load_vocab()
    ids = C.tokenize_caption("night rain")
    assert ids[0] == vocab.index("night")
    assert ids[1] == vocab.index("rain")
    assert list(ids[2:]) == [C.PAD_ID] * (C.L_TEXT - 2)


def test_tokenize_unknown_word_maps_to_unk():
    ids = C.tokenize_caption("xyzzy")
    assert ids[0] == C.UNK_ID
    assert list(ids[1:]) == [C.PAD_ID] * (C.L_TEXT - 1)


def test_encode_caption_deterministic_and_null(params):
    p, _ = params
    ids = C.tokenize_caption("day clear")
    a = C.encode_caption(ids, p).data
    b = C.encode_caption(C.tokenize_caption("day clear"), p).data
    assert np.array_equal(a, b)
    null = C.encode_caption(None, p).data
    assert null.shape == a.shape
    assert np.array_equal(null, C.encode_caption(None, p).data)
    assert not np.array_equal(null, a)


def test_encode_caption_table_gradient(params):
    p, _ = params
    ids = C.tokenize_caption("day clear fog")
    table = p["cond.caption.table"]

    def f(w):
        q = dict(p)
        q["cond.caption.table"] = w
        return T.sum_sq(C.encode_caption(ids, q))

    assert T.grad_check(f, table.astype(np.float64)) < 1e-4


def test_encode_caption_rejects_bad_ids(params):
    p, _ = params
    with pytest.raises(ValueError):
        C.encode_caption(np.array([999] + [0] * (C.L_TEXT - 1)), p)


# ---------------------------------------------------------------------------
# Fourier encoding


def test_fourier_zero():
    out = C.fourier_encode([0.0], bands=4)
    np.testing.assert_allclose(out[0::2], 0.0, atol=1e-12)  # sin terms
    np.testing.assert_allclose(out[1::2], 1.0, atol=1e-12)  # cos terms


def test_fourier_half_single_band():
    np.testing.assert_allclose(C.fourier_encode([0.5], bands=1), [1.0, 0.0],
                               atol=1e-12)


def test_fourier_quarter_two_bands():
    out = C.fourier_encode([0.25], bands=2)
    np.testing.assert_allclose(out, [0.70710678, 0.70710678, 1.0, 0.0],
                               atol=1e-6)


def test_fourier_value_major_band_minor_order():
    a, b = 0.13, 0.77
    out = C.fourier_encode([a, b], bands=2)
    expected = [np.sin(np.pi * a), np.cos(np.pi * a),
                np.sin(2 * np.pi * a), np.cos(2 * np.pi * a),
                np.sin(np.pi * b), np.cos(np.pi * b),
                np.sin(2 * np.pi * b), np.cos(2 * np.pi * b)]
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_fourier_period_two():
    v = np.array([0.31, -0.6, 1.9])
    np.testing.assert_allclose(C.fourier_encode(v, bands=6),
                               C.fourier_encode(v + 2.0, bands=6), atol=1e-9)


# ---------------------------------------------------------------------------
# Layout entries


def _entry(**kw):
    base = dict(frame=0, view=0, cx=0.5, cy=0.5, sw=0.2, sh=0.1,
                heading=0.3, instance_id=4, category_id=2)
    base.update(kw)
    return C.LayoutEntry(**base)


def test_layout_entry_validation():
    with pytest.raises(ValueError):
        _entry(cx=1.5)
    with pytest.raises(ValueError):
        _entry(sw=-0.1)
    with pytest.raises(ValueError):
        _entry(category_id=8)


def test_heading_normalized_to_halfopen_interval():
    e1 = _entry(heading=0.4)
    e2 = _entry(heading=0.4 + 2 * np.pi)
    np.testing.assert_allclose(e1.geometry(), e2.geometry(), atol=1e-9)
    assert -np.pi <= C.normalize_heading(7.0) < np.pi
    assert C.normalize_heading(np.pi) == -np.pi


def test_encode_layout_empty_all_null(params):
    p, _ = params
    tokens, mask = C.encode_layout([], frame=0, params=p)
    assert tokens.shape == (C.M_MAX, p["cond.layout.null"].shape[-1])
    assert not mask.any()
    null = p["cond.layout.null"].data.reshape(1, -1)
    np.testing.assert_allclose(tokens.data, np.repeat(null, C.M_MAX, axis=0))


def test_encode_layout_slot_follows_input_order(params):
    p, _ = params
    e1, e2 = _entry(cx=0.2, instance_id=1), _entry(cx=0.8, instance_id=2)
    t12, m12 = C.encode_layout([e1, e2], frame=0, params=p)
    t21, m21 = C.encode_layout([e2, e1], frame=0, params=p)
    np.testing.assert_allclose(t12.data[0], t21.data[1], atol=1e-12)
    np.testing.assert_allclose(t12.data[1], t21.data[0], atol=1e-12)
    assert m12[:2].all() and not m12[2:].any()


def test_encode_layout_filters_by_frame(params):
    p, _ = params
    e_here, e_there = _entry(frame=0), _entry(frame=1, cx=0.1)
    tokens, mask = C.encode_layout([e_here, e_there], frame=0, params=p)
    ref, _ = C.encode_layout([e_here], frame=0, params=p)
    np.testing.assert_allclose(tokens.data, ref.data, atol=1e-12)
    assert mask.sum() == 1


def test_encode_layout_too_many_entries(params):
    p, _ = params
    entries = [_entry(instance_id=i) for i in range(C.M_MAX + 1)]
    with pytest.raises(ValueError):
        C.encode_layout(entries, frame=0, params=p)


# ---------------------------------------------------------------------------
# Condition dropout


def _triple():
    sketch = np.zeros((1, 1, 1, 4, 4), dtype=np.uint8)
    sketch[0, 0, 0, 2] = 1
    return C.ConditionTriple(caption=C.tokenize_caption("day clear"),
                             layout=[_entry()], sketch=sketch)


def test_dropout_zero_probability_identity():
    trip = _triple()
    out = C.dropout_conditions(trip, np.random.default_rng(0), p_joint=0.0,
                               p_each=0.0)
    assert out.caption is trip.caption
    assert out.layout is trip.layout
    assert out.sketch is trip.sketch


def test_dropout_joint_branch_drops_all():
    trip = _triple()
    # probability-1 joint branch must always hit, regardless of rng
    out = C.dropout_conditions(trip, np.random.default_rng(3), p_joint=1.0,
                               p_each=0.0)
    assert out.caption is None and out.layout is None and out.sketch is None


def test_dropout_statistics_monte_carlo():
    # two-stage rule: P(all phi) = 0.05 + 0.95 * 0.05^3 ~= 0.0501,
    # per-slot marginal = 0.05 + 0.95 * 0.05 = 0.0975
    n = 200_000
    rng = np.random.default_rng(7)
    trip = _triple()
    all_phi = 0
    slot_phi = np.zeros(3)
    for _ in range(n):
        out = C.dropout_conditions(trip, rng)
        dropped = np.array([out.caption is None, out.layout is None,
                            out.sketch is None])
        all_phi += dropped.all()
        slot_phi += dropped
    p_all = 0.05 + 0.95 * 0.05**3
    p_slot = 0.05 + 0.95 * 0.05
    sigma_all = np.sqrt(p_all * (1 - p_all) / n)
    sigma_slot = np.sqrt(p_slot * (1 - p_slot) / n)
    assert abs(all_phi / n - p_all) < 3 * sigma_all
    for s in slot_phi:
        assert abs(s / n - p_slot) < 3 * sigma_slot


# ---------------------------------------------------------------------------
# Sketch rasterization


def test_rasterize_empty_lanes_all_zero():
    rigs = [CameraRig(center=(4.0, 4.0))]
    out = C.rasterize_sketch([], 1, 2, 8, 8, rigs)
    assert out.shape == (1, 2, 1, 8, 8)
    assert not out.any()


def test_rasterize_horizontal_lane_sets_row():
    rigs = [CameraRig(center=(4.0, 4.0))]
    lane = np.array([[-10.0, 4.0], [20.0, 4.0]])
    out = C.rasterize_sketch([lane], 1, 1, 8, 8, rigs)
    assert out[0, 0, 0, 4, :].all()
    others = np.delete(out[0, 0, 0], 4, axis=0)
    assert not others.any()


def test_rasterize_consistent_across_overlapping_views():
    # two rigs offset by 4 px: world point x lands at column x - cx + W/2
    rigs = [CameraRig(center=(4.0, 4.0)), CameraRig(center=(8.0, 4.0))]
    lane = np.array([[6.0, 1.0], [6.0, 7.0]])  # vertical segment at x=6
    out = C.rasterize_sketch([lane], 2, 1, 8, 8, rigs)
    col_a = np.flatnonzero(out[0, 0, 0].any(axis=0))
    col_b = np.flatnonzero(out[1, 0, 0].any(axis=0))
    assert col_a.tolist() == [6]   # 6 - 4 + 4
    assert col_b.tolist() == [2]   # 6 - 8 + 4
    assert out.dtype == np.uint8
    assert set(np.unique(out)) <= {0, 1}
