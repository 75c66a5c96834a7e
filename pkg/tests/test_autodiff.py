import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taskmoe import autodiff as ad
from taskmoe.autodiff import Adam, Tensor, adam_step, AdamState, finite_diff_check

TOL = 1e-4


def _rand(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _weighted(f, rng, shape):
    w = rng.normal(size=shape)
    return lambda x: ad.tsum(ad.mul(f(x), w))


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "gelu": ad.gelu,
    "log": lambda x: ad.log(ad.add(ad.mul(x, x), 1.0)),
    "power": lambda x: ad.power(ad.add(ad.mul(x, x), 0.5), 1.5),
    "div": lambda x: ad.div(1.0, ad.add(ad.mul(x, x), 1.0)),
    "softmax": lambda x: ad.softmax(x, 0.7),
    "log_softmax": ad.log_softmax,
    "transpose": lambda x: ad.transpose(x, (1, 0)),
    "reshape": lambda x: ad.reshape(x, (-1,)),
    "index": lambda x: x[1:, ::2],
    "fancy_index": lambda x: ad.index(x, (np.array([0, 2, 0]), np.array([1, 1, 3]))),
    "take_rows": lambda x: ad.take_rows(x, np.array([2, 0, 2])),
    "scatter_rows": lambda x: ad.scatter_rows(x, np.array([1, 4, 0]), 5),
    "mean": lambda x: ad.mean(x, axis=0),
    "sum_keep": lambda x: ad.tsum(x, axis=1, keepdims=True),
    "concat": lambda x: ad.concat([x, ad.mul(x, 2.0)], axis=-1),
    "stack": lambda x: ad.stack([x, ad.exp(x)], axis=1),
    "broadcast_add": lambda x: ad.add(x, x[0]),
    "broadcast_mul": lambda x: ad.mul(x, x[:, :1]),
    "sub": lambda x: ad.sub(x[::-1], x),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", range(50))
def test_unary_ops_match_finite_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = _rand(rng, 3, 4)
    f = UNARY[name]
    out_shape = f(Tensor(x.data)).shape
    assert finite_diff_check(_weighted(f, rng, out_shape), x) < TOL


@pytest.mark.parametrize("seed", range(50))
def test_matmul_linear_layernorm_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x, w, b = _rand(rng, 2, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)
    g, beta = _rand(rng, 4, lo=0.5, hi=1.5), _rand(rng, 4)
    wo = rng.normal(size=(2, 3, 5))
    for target in (x, w, b):
        assert finite_diff_check(lambda _: ad.tsum(ad.mul(ad.linear(x, w, b), wo)), target) < TOL
    m = _rand(rng, 2, 4, 3)
    wm = rng.normal(size=(2, 3, 3))
    assert finite_diff_check(lambda _: ad.tsum(ad.mul(ad.matmul(x, m), wm)), m) < TOL
    wl = rng.normal(size=(2, 3, 4))
    for target in (x, g, beta):
        assert finite_diff_check(lambda _: ad.tsum(ad.mul(ad.layer_norm(x, g, beta), wl)),
                                 target) < TOL


@pytest.mark.parametrize("seed", range(50))
def test_cross_entropy_and_embedding_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    logits = _rand(rng, 2, 3, 6)
    targets = rng.integers(0, 6, size=(2, 3))
    targets[0, 2] = 0
    assert finite_diff_check(lambda z: ad.cross_entropy(z, targets, pad_id=0), logits) < TOL
    assert finite_diff_check(
        lambda z: ad.tsum(ad.mul(ad.cross_entropy(z, targets, 0, "sum_per_row"), [0.3, -1.2])),
        logits) < TOL
    W = _rand(rng, 7, 3)
    ids = rng.integers(0, 7, size=(2, 4))
    w = rng.normal(size=(2, 4, 3))
    assert finite_diff_check(lambda W: ad.tsum(ad.mul(ad.embedding(W, ids), w)), W) < TOL


def test_straight_through_forward_is_hard_and_backward_is_soft():
    rng = np.random.default_rng(0)
    z = _rand(rng, 2, 3)
    soft = ad.softmax(z)
    hard = np.eye(3)[np.argmax(z.data, axis=-1)]
    out = ad.straight_through(hard, soft)
    assert np.array_equal(out.data, hard)
    w = rng.normal(size=(2, 3))
    ad.tsum(ad.mul(out, w)).backward()
    g_st = z.grad.copy()
    z.grad = None
    ad.tsum(ad.mul(ad.softmax(z), w)).backward()
    assert np.allclose(g_st, z.grad, atol=0, rtol=0)


def test_matmul_shape_mismatch_raises():
    with pytest.raises(ValueError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_all_neg_inf_row_raises():
    with pytest.raises(ValueError):
        ad.softmax(Tensor(np.array([[0.0, 1.0], [-np.inf, -np.inf]])))


def test_softmax_neg_inf_entry_gets_exact_zero():
    p = ad.softmax(Tensor(np.array([2.0, -np.inf, 0.0])))
    assert p.data[1] == 0.0
    assert np.isclose(p.data.sum(), 1.0)


def test_cross_entropy_errors():
    z = Tensor(np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        ad.cross_entropy(z, np.zeros((1, 2), dtype=int), pad_id=0)
    with pytest.raises(ValueError):
        ad.cross_entropy(z, np.array([[1, 5]]), pad_id=0)


def test_nan_is_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor(np.array([-1.0]), requires_grad=True))


def test_backward_needs_scalar_and_repeated_backward_is_stable():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(ValueError):
        ad.mul(x, 2.0).backward()
    h = ad.mul(x, x)
    loss = ad.tsum(h)
    loss.backward()
    first = x.grad.copy()
    x.grad = None
    loss.backward()
    assert np.array_equal(x.grad, first)


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 3.0)
    assert not y.requires_grad


def test_adam_first_step_moves_each_group_by_its_lr():
    a = Tensor(np.zeros(3), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([{"params": [a], "lr": 1e-3}, {"params": [b], "lr": 1e-2}])
    a.grad, b.grad = np.ones(3), np.ones(2)
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    assert np.allclose(a.data, -1e-3, rtol=1e-6)
    assert np.allclose(b.data, -1e-2, rtol=1e-6)


def test_adam_step_matches_hand_computation():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState()
    g = np.array([0.5, -0.1])
    adam_step(p, [g], st_, 0.1)
    adam_step(p, [g], st_, 0.1)
    m = 0.9 * 0.1 * g + 0.1 * g
    v = 0.999 * 0.001 * g ** 2 + 0.001 * g ** 2
    mh, vh = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
    step1 = 0.1 * g / (np.abs(g) + 1e-8)
    expect = np.array([1.0, -2.0]) - step1 - 0.1 * mh / (np.sqrt(vh) + 1e-8)
    assert np.allclose(p[0], expect, atol=1e-12)


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        Adam([{"params": [], "lr": 0.0}])


def test_adam_row_mask_freezes_rows_bit_exactly():
    rng = np.random.default_rng(0)
    W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    mask = np.array([True, False, True, False])
    before = W.data[mask].copy()
    opt = Adam([{"params": [W], "lr": 0.1, "row_mask": {id(W): mask}}])
    for _ in range(5):
        W.grad = rng.normal(size=(4, 3))
        opt.step()
    assert np.array_equal(W.data[mask], before)
    assert not np.allclose(W.data[~mask], 0)


def test_clip_norm_limits_update_direction():
    a = Tensor(np.zeros(2), requires_grad=True)
    opt = Adam([{"params": [a], "lr": 1.0}], clip_norm=1.0)
    a.grad = np.array([30.0, 40.0])
    assert opt.grad_norm() == 50.0
    opt.step()
    assert np.all(np.isfinite(a.data))


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6), st.floats(0.05, 20))
def test_softmax_rows_are_distributions(xs, tau):
    p = ad.softmax(Tensor(np.array(xs)), tau).data
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


@given(st.integers(1, 4), st.integers(1, 4))
def test_unbroadcast_gradient_shapes(r, c):
    a = Tensor(np.ones((r, c)), requires_grad=True)
    b = Tensor(np.ones((1, c)), requires_grad=True)
    ad.tsum(ad.mul(a, b)).backward()
    assert a.grad.shape == (r, c)
    assert b.grad.shape == (1, c)
    assert np.allclose(b.grad, r)
