from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from taskmoe import autodiff as ad
from taskmoe.autodiff import Tensor
from taskmoe.transformer import (NEG_MASK, ConfigError, ExpertGrid, LayerContext, ModelConfig,
                                 compute_multiplier, encode, expert_forward, greedy_decode,
                                 init_experts, model_forward, moe_layer_forward)

from conftest import tiny_config, tiny_grid, toy_batch


# ------------------------------------------------------- numpy reference block
def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))


def _mha(q_in, kv_in, Wq, bq, Wk, bk, Wv, bv, Wo, bo, H, mask):
    B, T, d = q_in.shape
    S = kv_in.shape[1]
    dh = d // H
    q = (q_in @ Wq + bq).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
    k = (kv_in @ Wk + bk).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    v = (kv_in @ Wv + bv).reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh) + mask
    s = np.exp(s - s.max(-1, keepdims=True))
    a = s / s.sum(-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B, T, d)
    return o @ Wo + bo


def ref_block(p, h, H, self_mask, enc=None, enc_mask=None):
    p = {k: v.data for k, v in p.items()}
    d = h.shape[-1]
    Wq, Wk, Wv = np.split(p["Wqkv"], 3, axis=1)
    bq, bk, bv = np.split(p["bqkv"], 3)
    a = _ln(h, p["ln1_g"], p["ln1_b"])
    h = h + _mha(a, a, Wq, bq, Wk, bk, Wv, bv, p["Wo"], p["bo"], H, self_mask)
    if "Wcq" in p:
        Wk2, Wv2 = np.split(p["Wckv"], 2, axis=1)
        bk2, bv2 = np.split(p["bckv"], 2)
        a = _ln(h, p["lnc_g"], p["lnc_b"])
        h = h + _mha(a, enc, p["Wcq"], p["bcq"], Wk2, bk2, Wv2, bv2, p["Wco"], p["bco"], H,
                     enc_mask)
    f = _ln(h, p["ln2_g"], p["ln2_b"])
    return h + _gelu(f @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]


def _ctx(rng, B, T, dec=False, d=8):
    pad = np.zeros((B, 1, 1, T))
    pad[0, ..., -1] = NEG_MASK
    if not dec:
        return LayerContext(pad)
    causal = np.triu(np.full((T, T), NEG_MASK), 1)[None, None]
    enc = Tensor(rng.normal(size=(B, 6, d)))
    em = np.zeros((B, 1, 1, 6))
    em[1, ..., -2:] = NEG_MASK
    return LayerContext(causal + np.zeros((B, 1, 1, 1)), enc, em)


@pytest.mark.parametrize("seed", range(100))
def test_moe_layer_equals_bruteforce_weighted_sum(seed):
    rng = np.random.default_rng(seed)
    grid = tiny_grid(seed, n_experts=3)
    B, T = 3, 5
    layer = seed % 2
    ctx = _ctx(rng, B, T, dec=layer == 1)
    h = rng.normal(size=(B, T, 8))
    if seed % 3 == 0:
        D = rng.dirichlet(np.ones(3), size=(B, 2))
        D[rng.random((B, 2, 3)) < 0.3] = 0.0
        D[..., 0] += 1e-3
    else:
        D = rng.dirichlet(np.ones(3), size=2)
        D[layer, rng.integers(3)] = 0.0
    out = moe_layer_forward(Tensor(h), layer, grid, D, ctx).data
    Dl = D[:, layer] if D.ndim == 3 else np.broadcast_to(D[layer], (B, 3))
    enc = None if ctx.enc_out is None else ctx.enc_out.data
    expect = sum(Dl[:, j, None, None] * ref_block(grid.experts[layer][j], h, 2, ctx.self_mask,
                                                  enc, ctx.enc_mask) for j in range(3))
    assert np.max(np.abs(out - expect)) < 1e-9


@pytest.mark.parametrize("layer", [0, 1])
def test_one_hot_reproduces_selected_expert_bit_for_bit(layer):
    rng = np.random.default_rng(layer)
    grid = tiny_grid(3, n_experts=3)
    ctx = _ctx(rng, 2, 4, dec=layer == 1)
    h = Tensor(rng.normal(size=(2, 4, 8)))
    D = np.zeros((2, 3))
    D[:, 2] = 1.0
    out = moe_layer_forward(h, layer, grid, D, ctx)
    solo = expert_forward(grid.experts[layer][2], h, ctx, 2)
    assert np.array_equal(out.data, solo.data)


def test_zero_weight_experts_are_never_executed():
    grid = tiny_grid(0, n_experts=3)
    rng = np.random.default_rng(0)
    x, y = toy_batch(rng)
    D = np.zeros((2, 3))
    D[0, 1] = D[1, 2] = 1.0
    model_forward(x, y, grid, D)
    assert grid.calls.tolist() == [[0, 1, 0], [0, 0, 1]]


def test_per_example_zero_rows_are_sliced_out():
    grid = tiny_grid(0, n_experts=2)
    rng = np.random.default_rng(1)
    x, y = toy_batch(rng)
    D = np.zeros((3, 2, 2))
    D[:, :, 0] = 1.0
    D[1] = [[0.0, 1.0], [0.0, 1.0]]
    _, loss_mix = model_forward(x, y, grid, D, reduction="sum_per_row")
    for r in range(3):
        _, lr_ = model_forward(x[r:r + 1], y[r:r + 1], grid, D[r], reduction="sum_per_row")
        assert abs(loss_mix.data[r] - lr_.data[0]) < 1e-10


def test_moe_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    grid = tiny_grid(0)
    x, y = toy_batch(rng)
    D = Tensor(rng.dirichlet(np.ones(2), size=2))
    assert ad.finite_diff_check(lambda D: model_forward(x, y, grid, D)[1], D) < 1e-4
    W = grid.experts[1][1]["Wo"]
    assert ad.finite_diff_check(lambda W: model_forward(x, y, grid, D)[1], W) < 1e-4


def test_all_zero_row_raises():
    grid = tiny_grid(0)
    x, y = toy_batch(np.random.default_rng(0))
    with pytest.raises(ValueError):
        model_forward(x, y, grid, np.array([[1.0, 0.0], [0.0, 0.0]]))


def test_encoder_ignores_padding():
    grid = tiny_grid(0)
    rng = np.random.default_rng(0)
    x = rng.integers(3, 12, (1, 4))
    xp = np.concatenate([x, np.zeros((1, 3), dtype=int)], axis=1)
    D = np.full((2, 2), 0.5)
    with ad.no_grad():
        a, _ = encode(grid, x, D)
        b, _ = encode(grid, xp, D)
    assert np.allclose(a.data, b.data[:, :4], atol=1e-12)


def test_init_experts_noise_variance():
    base = {"W": np.zeros((200, 200))}
    experts = init_experts(base, 3, 1e-4, 0)
    for e in experts:
        assert abs(e["W"].var() - 1e-4) < 5e-6
    assert not np.array_equal(experts[0]["W"], experts[1]["W"])
    exact = init_experts({"W": np.ones(3)}, 2, 0.0, 0)
    assert all(np.array_equal(e["W"], np.ones(3)) for e in exact)


def test_from_base_replicates_base_layers():
    base = tiny_grid(1, n_experts=1)
    grid = ExpertGrid.from_base(base, 3, 1e-8, 5)
    assert grid.config.n_experts == 3
    for i in range(2):
        for j in range(3):
            diff = grid.experts[i][j]["W1"].data - base.experts[i][0]["W1"].data
            assert 0 < np.abs(diff).max() < 1e-3
    assert np.array_equal(grid.shared["tok_emb"].data, base.shared["tok_emb"].data)


def test_copy_and_state_dict_are_independent():
    g = tiny_grid(0)
    c = g.copy()
    c.experts[0][0]["W1"].data += 1.0
    assert not np.array_equal(c.experts[0][0]["W1"].data, g.experts[0][0]["W1"].data)
    c.load_state_dict(g.state_dict())
    assert all(np.array_equal(a, b) for a, b in zip(c.state_dict().values(),
                                                     g.state_dict().values()))


def test_greedy_decode_stops_at_eos():
    g = tiny_grid(0)
    g.shared["head_W"].data[:] = 0.0
    g.shared["head_b"].data[:] = 0.0
    g.shared["head_b"].data[2] = 5.0
    out = greedy_decode(np.array([[4, 5, 6]]), g, np.full((2, 2), 0.5), 5)
    assert out == [[]]
    g.shared["head_b"].data[2] = 0.0
    g.shared["head_b"].data[7] = 5.0
    assert greedy_decode(np.array([[4, 5]]), g, np.full((2, 2), 0.5), 3) == [[7, 7, 7]]


def test_sequence_length_and_vocab_checks():
    g = tiny_grid(0)
    D = np.full((2, 2), 0.5)
    with pytest.raises(ValueError):
        encode(g, np.full((1, 9), 4), D)
    with pytest.raises(ValueError):
        encode(g, np.array([[4, 99]]), D)


@pytest.mark.parametrize("kw", [dict(n_layers=3), dict(n_experts=0), dict(d_model=10, n_heads=4),
                                dict(noise_variance=-1.0)])
def test_bad_model_config(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_compute_multiplier():
    assert compute_multiplier("vanilla") == 1
    assert compute_multiplier("gumbel_st") == 1
    assert compute_multiplier("average", 3) == 3
    assert compute_multiplier("task_random_2") == 2
    assert compute_multiplier("inst_random_1") == 1
    assert compute_multiplier(np.array([[1, 0, 0], [0.5, 0.5, 0]])) == Fraction(3, 2)
    with pytest.raises(ValueError):
        compute_multiplier("bogus")


@given(st.integers(0, 2 ** 16))
def test_uniform_mixture_of_identical_experts_equals_single(seed):
    base = tiny_grid(seed % 7, n_experts=1)
    grid = ExpertGrid.from_base(base, 3, 0.0, 0)
    rng = np.random.default_rng(seed)
    x, y = toy_batch(rng)
    w = rng.dirichlet(np.ones(3), size=2)
    _, a = model_forward(x, y, grid, w)
    _, b = model_forward(x, y, base, np.ones((2, 1)))
    assert abs(a.item() - b.item()) < 1e-9
