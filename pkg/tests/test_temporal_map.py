import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tan2d import autograd as ag
from tan2d.errors import AnnotationError, ConfigError
from tan2d.optim import grad_check
from tan2d.temporal_map import (
    MapConvStack, MomentSpan, build_map_conv, build_map_pool, candidate_mask, iou, label_map,
    label_map_seconds, scale_iou, seconds_to_span, span_to_seconds,
)


def brute_force_count(n):
    """Direct evaluation of the sparse selection rule, independent of the module."""
    count = 0
    for a in range(n):
        for b in range(a, n):
            if n <= 16:
                count += 1
                continue
            k = max(1, math.ceil(math.log2((b - a + 1) / 8)))
            s = 2 ** (k - 1)
            s2 = 0 if k == 1 else 2 ** (k + 2) - 1
            count += (a % s == 0) and ((b - s2) % s == 0)
    return count


def test_sixteen_clips_gives_136():
    assert candidate_mask(16).count == 136


def test_single_clip():
    m = candidate_mask(1)
    assert m.count == 1
    assert m.pairs.tolist() == [[0, 0]]


def test_sparse_rule_by_hand():
    m = candidate_mask(64)
    assert not m.valid[1, 20]
    assert m.valid[0, 19]


@pytest.mark.parametrize("n", [1, 5, 16, 17, 32, 64, 128])
def test_count_matches_brute_force(n):
    assert candidate_mask(n).count == brute_force_count(n)


def test_count_at_64_frozen():
    # literal rule gives 1104; the 1200 quoted alongside the N=64 ablation is not reproduced
    assert candidate_mask(64).count == 1104


@pytest.mark.parametrize("n", range(1, 17))
def test_dense_for_small_n(n):
    m = candidate_mask(n)
    assert m.count == n * (n + 1) // 2
    assert (m.pairs[:, 0] <= m.pairs[:, 1]).all()


def test_pairs_row_major_and_upper():
    m = candidate_mask(64)
    assert not np.tril(m.valid, -1).any()
    keys = m.pairs[:, 0] * 64 + m.pairs[:, 1]
    assert (np.diff(keys) > 0).all()


def test_sparse_coverage_at_64():
    m = candidate_mask(64)
    pa, pb = m.pairs[:, 0], m.pairs[:, 1]
    for a in range(64):
        for b in range(a, 64):
            inter = np.maximum(0, np.minimum(pb, b) - np.maximum(pa, a) + 1)
            union = (pb - pa + 1) + (b - a + 1) - inter
            assert (inter / union).max() >= 0.5, (a, b)


def test_dense_flag_enumerates_everything():
    assert candidate_mask(64, dense=True).count == 64 * 65 // 2


# pooled map ----------------------------------------------------------------------


def test_pool_single_clip_diagonal():
    x = np.random.default_rng(0).standard_normal((5, 3))
    out = build_map_pool(ag.tensor(x), candidate_mask(5)).data
    for a in range(5):
        np.testing.assert_array_equal(out[a, a], x[a])


def test_pool_by_hand():
    out = build_map_pool(ag.tensor([[1.0, 2.0], [3.0, 0.0], [2.0, 5.0]]), candidate_mask(3)).data
    np.testing.assert_array_equal(out[0, 2], [3.0, 5.0])
    np.testing.assert_array_equal(out[1, 0], [0.0, 0.0])


def test_pool_constant():
    out = build_map_pool(ag.tensor(np.full((6, 2), 4.0)), candidate_mask(6)).data
    m = candidate_mask(6)
    np.testing.assert_array_equal(out[m.valid], 4.0)
    np.testing.assert_array_equal(out[~m.valid], 0.0)


def test_pool_invalid_cells_zero_sparse():
    m = candidate_mask(32)
    out = build_map_pool(ag.tensor(np.random.default_rng(1).standard_normal((32, 2)) + 5), m).data
    assert (out[~m.valid] == 0).all()
    assert (out[m.valid] != 0).all()


def test_pool_matches_direct_max_batched():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 20, 4))
    m = candidate_mask(20)
    out = build_map_pool(ag.tensor(x), m).data
    for bi in range(3):
        for a, b in m.pairs:
            np.testing.assert_array_equal(out[bi, a, b], x[bi, a:b + 1].max(axis=0))


def test_pool_gradcheck():
    rng = np.random.default_rng(3)
    m = candidate_mask(5)
    r = rng.standard_normal((5, 5, 3))
    assert grad_check(lambda x: (build_map_pool(x, m) * r).sum(), rng.standard_normal((5, 3))) < 1e-4


def test_pool_tie_goes_to_earliest_clip():
    x = ag.parameter(np.array([[1.0], [1.0], [0.0]]))
    m = candidate_mask(3)
    out = build_map_pool(x, m)
    sel = np.zeros((3, 3, 1))
    sel[0, 1] = 1.0
    (out * sel).sum().backward()
    np.testing.assert_array_equal(x.grad[:, 0], [1.0, 0.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 7), st.integers(0, 2), st.floats(0.0, 5.0), st.integers(0, 10_000))
def test_pool_monotone(row, col, bump, seed):
    x = np.random.default_rng(seed).standard_normal((8, 3))
    m = candidate_mask(8)
    before = build_map_pool(ag.tensor(x), m).data
    x[row, col] += bump
    after = build_map_pool(ag.tensor(x), m).data
    assert (after >= before).all()


# conv map -------------------------------------------------------------------------


def test_conv_map_identity_kernel_diagonal():
    x = np.random.default_rng(4).standard_normal((5, 3))
    stack = MapConvStack(3, 1)
    stack.weights[0].data[...] = np.vstack([np.eye(3), np.zeros((3, 3))])
    out = build_map_conv(ag.tensor(x), stack, candidate_mask(5)).data
    for a in range(5):
        np.testing.assert_array_equal(out[a, a], x[a])
    for a in range(4):
        np.testing.assert_array_equal(out[a, a + 1], x[a])


def test_conv_map_averaging_constant():
    stack = MapConvStack(2, 2)
    for w in stack.weights:
        w.data[...] = np.vstack([np.eye(2), np.eye(2)]) / 2
    m = candidate_mask(6)
    out = build_map_conv(ag.tensor(np.full((6, 2), 3.0)), stack, m).data
    np.testing.assert_allclose(out[m.valid], 3.0, rtol=0, atol=1e-15)


def test_conv_map_composes_by_hand():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 2))
    stack = MapConvStack(2, 3, rng)
    for b in stack.biases:
        b.data[...] = rng.standard_normal(2)
    out = build_map_conv(ag.tensor(x), stack, candidate_mask(4)).data
    cur = x
    for j, (w, b) in enumerate(zip(stack.weights, stack.biases), start=1):
        w0, w1 = w.data[:2], w.data[2:]
        cur = np.array([cur[a] @ w0 + cur[a + 1] @ w1 + b.data for a in range(len(cur) - 1)])
        for a in range(4 - j):
            np.testing.assert_allclose(out[a, a + j], cur[a], rtol=0, atol=1e-12)


def test_conv_map_falls_back_to_pool():
    x = np.random.default_rng(6).standard_normal((6, 2))
    stack = MapConvStack(2, 1)
    out = build_map_conv(ag.tensor(x), stack, candidate_mask(6)).data
    np.testing.assert_array_equal(out[0, 5], x.max(axis=0))


def test_conv_map_too_deep():
    with pytest.raises(ConfigError):
        build_map_conv(ag.tensor(np.ones((3, 2))), MapConvStack(2, 4), candidate_mask(3))


def test_conv_map_gradcheck():
    rng = np.random.default_rng(7)
    stack = MapConvStack(2, 2, rng)
    m = candidate_mask(4)
    r = rng.standard_normal((4, 4, 2))
    assert grad_check(lambda x: (build_map_conv(x, stack, m) * r).sum(), rng.standard_normal((4, 2))) < 1e-4


# IoU and labels -------------------------------------------------------------------


def test_iou_examples():
    assert iou(MomentSpan(2, 6), MomentSpan(2, 6)) == 1.0
    assert iou(MomentSpan(0, 4), MomentSpan(5, 9)) == 0.0
    assert iou(MomentSpan(0, 9), MomentSpan(5, 14)) == pytest.approx(5 / 15)


def test_span_invariant():
    with pytest.raises(AnnotationError):
        MomentSpan(3, 2)


def test_scale_iou_examples():
    assert scale_iou(0.5, 0.5, 1.0) == 0.0
    assert scale_iou(1.0, 0.5, 1.0) == 1.0
    assert scale_iou(0.75, 0.5, 1.0) == 0.5
    with pytest.raises(ConfigError):
        scale_iou(0.5, 0.7, 0.7)


def test_label_map_aligned_gt():
    m = candidate_mask(8)
    lm = label_map(MomentSpan(2, 5), m, 0.5, 1.0)
    assert lm.y[2, 5] == 1.0
    assert lm.y.max() == 1.0
    assert (lm.y[~m.valid] == 0).all()


def test_label_map_disjoint_all_zero():
    m = candidate_mask(4)
    lm = label_map(MomentSpan(0, 0), m, 0.5, 1.0)
    # every other cell overlaps less than half
    assert lm.y.sum() == 1.0


def test_label_map_matches_per_cell_recomputation():
    m = candidate_mask(8)
    gt = MomentSpan(1, 4)
    lm = label_map(gt, m, 0.3, 0.7)
    for a in range(8):
        for b in range(8):
            want = scale_iou(iou(MomentSpan(a, b), gt), 0.3, 0.7) if b >= a else 0.0
            assert lm.y[a, b] == want


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 16), st.data())
def test_labels_monotone_in_iou(n, data):
    a = data.draw(st.integers(0, n - 1))
    b = data.draw(st.integers(a, n - 1))
    lm = label_map(MomentSpan(a, b), candidate_mask(n), 0.5, 1.0)
    m = candidate_mask(n)
    o = lm.iou[m.valid]
    y = lm.y[m.valid]
    order = np.argsort(o, kind="stable")
    assert (np.diff(y[order]) >= 0).all()
    assert ((0 <= y) & (y <= 1)).all()


def test_label_map_seconds_agrees_on_grid():
    m = candidate_mask(10)
    tau = 0.7
    by_span = label_map(MomentSpan(3, 6), m, 0.5, 1.0)
    by_sec = label_map_seconds(3 * tau, 7 * tau, tau, m, 0.5, 1.0)
    np.testing.assert_allclose(by_sec.y, by_span.y, atol=1e-12)


def test_seconds_to_span_examples():
    tau = 1.5
    assert seconds_to_span(0.0, tau * 0.999, tau, 8) == MomentSpan(0, 0)
    assert seconds_to_span(0.0, 8 * tau, tau, 8) == MomentSpan(0, 7)
    assert seconds_to_span(1.2 * tau, 3.5 * tau, tau, 8) == MomentSpan(1, 3)
    with pytest.raises(AnnotationError):
        seconds_to_span(2.0, 2.0, tau, 8)


@pytest.mark.parametrize("tau", [0.1, 0.37, 1.0, 2.9])
def test_seconds_span_roundtrip(tau):
    n = 16
    for a in range(n):
        for b in range(a, n):
            s, e = span_to_seconds(MomentSpan(a, b), tau)
            assert seconds_to_span(s, e, tau, n) == MomentSpan(a, b)
