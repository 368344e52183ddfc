import numpy as np
import pytest

from tan2d import autograd as ag
from tan2d.errors import ConfigError, Tan2DError
from tan2d.model import (
    TAN, ModelConfig, TanConvStack, best_moment, fuse, masked_conv2d, masked_conv_forward, score_head,
)
from tan2d.optim import grad_check, grad_check_params
from tan2d.temporal_map import CandidateMask, MomentSpan, candidate_mask

from _toy import gradcheck_instance, smallest_live_gradient


def random_map(rng, n, d, mask, batch=1):
    x = rng.standard_normal((batch, n, n, d))
    return x * mask.valid[None, :, :, None]


# fusion ---------------------------------------------------------------------------


def test_fuse_zero_sentence_gives_zero():
    rng = np.random.default_rng(0)
    m = candidate_mask(4)
    out = fuse(ag.tensor(np.zeros((1, 3))), ag.tensor(random_map(rng, 4, 3, m)),
               ag.tensor(rng.standard_normal((3, 5))), ag.tensor(rng.standard_normal((3, 5))), m)
    np.testing.assert_array_equal(out.data, 0.0)


def test_fuse_unit_norm_at_valid_cells():
    rng = np.random.default_rng(1)
    m = candidate_mask(6)
    out = fuse(ag.tensor(rng.standard_normal((2, 3))), ag.tensor(random_map(rng, 6, 4, m, 2)),
               ag.tensor(rng.standard_normal((3, 5))), ag.tensor(rng.standard_normal((4, 5))), m).data
    norms = np.linalg.norm(out, axis=-1)
    np.testing.assert_allclose(norms[:, m.valid], 1.0, atol=1e-12)
    assert (norms[:, ~m.valid] == 0).all()


def test_fuse_by_hand():
    m = candidate_mask(2)
    fmap = np.zeros((1, 2, 2, 2))
    fmap[0, 0, 0] = [1, 1]
    fmap[0, 0, 1] = [3, 0]
    fmap[0, 1, 1] = [0, -1]
    out = fuse(ag.tensor([[1.0, 2.0]]), ag.tensor(fmap), ag.tensor(np.eye(2)),
               ag.tensor([[2.0, 0.0], [0.0, 1.0]]), m).data[0]
    r = 1 / np.sqrt(2)
    np.testing.assert_allclose(out[0, 0], [r, r], atol=1e-12)
    np.testing.assert_allclose(out[0, 1], [1.0, 0.0], atol=1e-12)
    np.testing.assert_allclose(out[1, 1], [0.0, -1.0], atol=1e-12)
    np.testing.assert_array_equal(out[1, 0], [0.0, 0.0])


def test_fuse_frobenius_variant():
    rng = np.random.default_rng(2)
    m = candidate_mask(4)
    out = fuse(ag.tensor(rng.standard_normal((2, 3))), ag.tensor(random_map(rng, 4, 3, m, 2)),
               ag.tensor(rng.standard_normal((3, 3))), ag.tensor(rng.standard_normal((3, 3))), m,
               norm="frobenius").data
    np.testing.assert_allclose(np.sqrt((out ** 2).sum(axis=(1, 2, 3))), 1.0, atol=1e-12)


def test_fuse_dimension_mismatch():
    m = candidate_mask(2)
    with pytest.raises(ConfigError):
        fuse(ag.tensor(np.ones((1, 3))), ag.tensor(np.ones((1, 2, 2, 2))),
             ag.tensor(np.ones((4, 2))), ag.tensor(np.ones((2, 2))), m)


def test_fuse_gradcheck():
    rng = np.random.default_rng(3)
    m = candidate_mask(3)
    fmap = ag.tensor(random_map(rng, 3, 2, m))
    ws = ag.tensor(rng.standard_normal((2, 3)))
    wm = ag.tensor(rng.standard_normal((2, 3)))
    r = rng.standard_normal((1, 3, 3, 3))
    assert grad_check(lambda s: (fuse(s, fmap, ws, wm, m) * r).sum(), rng.standard_normal((1, 2))) < 1e-4


# masked convolution -----------------------------------------------------------------


def test_conv_k1_identity():
    rng = np.random.default_rng(4)
    m = candidate_mask(5)
    x = random_map(rng, 5, 3, m)
    out = masked_conv2d(ag.tensor(x), ag.tensor(np.eye(3)), ag.tensor(np.zeros(3)), m, 1).data
    np.testing.assert_array_equal(out, x)


def test_conv_all_ones_counts_valid_neighbours():
    m = candidate_mask(4)
    x = m.valid[None, :, :, None].astype(float)
    out = masked_conv2d(ag.tensor(x), ag.tensor(np.ones((9, 1))), ag.tensor(np.zeros(1)), m, 3).data[0, :, :, 0]
    expected = np.array([[3, 5, 6, 4],
                         [0, 6, 8, 6],
                         [0, 0, 6, 5],
                         [0, 0, 0, 3]], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_conv_even_kernel_rejected():
    with pytest.raises(ConfigError):
        TanConvStack(3, 1, 4)
    m = candidate_mask(3)
    with pytest.raises(ConfigError):
        masked_conv2d(ag.tensor(np.zeros((1, 3, 3, 1))), ag.tensor(np.ones((4, 1))), ag.tensor(np.zeros(1)), m, 2)


def test_conv_invalid_perturbation_has_no_effect():
    rng = np.random.default_rng(5)
    m = candidate_mask(32)
    stack = TanConvStack(3, 2, 3, rng)
    x = random_map(rng, 32, 3, m)
    base = masked_conv_forward(ag.tensor(x), stack, m).data
    x2 = x.copy()
    x2[0, ~m.valid] = rng.standard_normal((int((~m.valid).sum()), 3)) * 100
    out = masked_conv_forward(ag.tensor(x2), stack, m).data
    np.testing.assert_array_equal(out, base)
    assert (out[0, ~m.valid] == 0).all()


def test_mask_idempotence():
    rng = np.random.default_rng(6)
    m = candidate_mask(20)
    stack = TanConvStack(2, 2, 5, rng)
    out = masked_conv_forward(ag.tensor(random_map(rng, 20, 2, m)), stack, m).data
    np.testing.assert_array_equal(out * m.valid[None, :, :, None], out)


@pytest.mark.parametrize("layers,kernel", [(1, 3), (2, 3), (2, 5), (1, 9)])
def test_receptive_field(layers, kernel):
    n = 16
    rng = np.random.default_rng(layers * 10 + kernel)
    m = CandidateMask(np.ones((n, n), dtype=bool), np.argwhere(np.ones((n, n), dtype=bool)))
    stack = TanConvStack(2, layers, kernel, rng)
    for _, b in stack.layers:
        b.data[...] = 1.0  # keep ReLUs open
    x = rng.uniform(0.5, 1.0, (1, n, n, 2))
    base = masked_conv_forward(ag.tensor(x), stack, m).data
    src = (8, 7)
    x2 = x.copy()
    x2[0, src[0], src[1]] += 0.5
    diff = np.abs(masked_conv_forward(ag.tensor(x2), stack, m).data - base).sum(axis=-1)[0]
    reach = layers * (kernel - 1) // 2
    aa, bb = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    cheb = np.maximum(np.abs(aa - src[0]), np.abs(bb - src[1]))
    assert (diff[cheb > reach] == 0).all()
    assert (diff[cheb <= reach] > 0).any()
    assert diff[cheb == reach].max() > 0


@pytest.mark.parametrize("layers,kernel", [(8, 5), (4, 9)])
def test_published_settings_cover_sixteen_clip_map(layers, kernel):
    assert layers * (kernel - 1) // 2 >= 16


def test_conv_gradcheck():
    rng = np.random.default_rng(7)
    m = candidate_mask(5)
    w = ag.tensor(rng.standard_normal((9 * 2, 3)))
    b = ag.tensor(rng.standard_normal(3))
    r = rng.standard_normal((2, 5, 5, 3))
    x0 = random_map(rng, 5, 2, m, 2)
    assert grad_check(lambda x: (masked_conv2d(x, w, b, m, 3) * r).sum(), x0) < 1e-4
    assert grad_check(lambda wt: (masked_conv2d(ag.tensor(x0), wt, b, m, 3) * r).sum(), w.data) < 1e-4
    assert grad_check(lambda bt: (masked_conv2d(ag.tensor(x0), w, bt, m, 3) * r).sum(), b.data) < 1e-4


# head and argmax ------------------------------------------------------------------


def test_head_zero_weights_half():
    m = candidate_mask(6)
    p = score_head(ag.tensor(np.ones((1, 6, 6, 4))), ag.tensor(np.zeros((4, 1))), ag.tensor(np.zeros(1)), m).data[0]
    assert (p[m.valid] == 0.5).all()
    assert (p[~m.valid] == 0).all()


def test_head_large_negative_bias():
    m = candidate_mask(3)
    p = score_head(ag.tensor(np.ones((1, 3, 3, 2))), ag.tensor(np.zeros((2, 1))), ag.tensor([-50.0]), m).data[0]
    assert p[m.valid].max() < 1e-20


def test_head_gradcheck():
    rng = np.random.default_rng(8)
    m = candidate_mask(4)
    h = ag.tensor(rng.standard_normal((1, 4, 4, 3)))
    b = ag.tensor([0.1])
    assert grad_check(lambda w: score_head(h, w, b, m).sum(), rng.standard_normal((3, 1))) < 1e-4


def test_best_moment_single_candidate():
    m = candidate_mask(1)
    assert best_moment(np.array([[0.3]]), m) == MomentSpan(0, 0)


def test_best_moment_uniform_tie():
    m = candidate_mask(5)
    assert best_moment(np.full((5, 5), 0.5), m) == MomentSpan(0, 0)


def test_best_moment_matches_scan():
    rng = np.random.default_rng(9)
    for n in (4, 16, 40):
        m = candidate_mask(n)
        s = rng.integers(0, 5, size=(n, n)).astype(float)
        best, arg = -np.inf, None
        for a in range(n):
            for b in range(n):
                if m.valid[a, b] and s[a, b] > best:
                    best, arg = s[a, b], (a, b)
        assert best_moment(s, m) == MomentSpan(*arg)
        # any strictly increasing transform keeps the argmax
        assert best_moment(np.exp(3 * s) - 7, m) == MomentSpan(*arg)


def test_best_moment_empty_mask():
    empty = CandidateMask(np.zeros((2, 2), dtype=bool), np.zeros((0, 2), dtype=int))
    with pytest.raises(Tan2DError):
        best_moment(np.zeros((2, 2)), empty)


# full network -----------------------------------------------------------------------


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(vocab_size=7, d_in=3, n_clips=4, d_s=3, d_v=3, d_o=3, layers=2, kernel=3, **kw)
    return TAN(cfg, seed=seed)


def test_forward_shapes_and_mask():
    model = tiny_model()
    p = model([[2, 3], [4]], np.random.default_rng(0).standard_normal((2, 4, 3))).data
    assert p.shape == (2, 4, 4)
    assert (p[:, ~model.mask.valid] == 0).all()
    assert ((p[:, model.mask.valid] > 0) & (p[:, model.mask.valid] < 1)).all()


def test_forward_rejects_wrong_clip_shape():
    with pytest.raises(ConfigError):
        tiny_model()([[2]], np.zeros((1, 5, 3)))


@pytest.mark.parametrize("map_type", ["pool", "conv"])
def test_end_to_end_gradcheck(map_type):
    model, loss = gradcheck_instance(map_type)
    live = smallest_live_gradient(model, loss)
    assert all(v < np.inf for v in live.values()), live
    assert min(live.values()) > 1e-7
    report = grad_check_params(loss, model.parameters())
    assert max(report.values()) < 1e-4, report
