"""Branch tests: each against a directly scripted oracle or exact identity."""

import math

import numpy as np
import pytest

from mixssm.encoders import (
    AttentionBranch,
    ChannelMlpBranch,
    ConvBranch,
    SsmBranch,
    cross_merge,
    cross_scan,
    linear_scan,
    selective_scan,
)
from mixssm.errors import ConfigError, ShapeError
from mixssm.tensor import Tensor, mul, reduce_sum, reshape, transpose


def t64(values):
    return Tensor(np.asarray(values, dtype=np.float64))


def rand64(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


# -- conv branch ----------------------------------------------------------------


def identity_conv(channels, kernel_size=3):
    branch = ConvBranch(channels, kernel_size=kernel_size, dtype=np.float64, activation="identity")
    w = np.zeros((kernel_size, kernel_size, channels, channels))
    mid = kernel_size // 2
    for c in range(channels):
        w[mid, mid, c, c] = 1.0
    branch.weight.data = w
    branch.bias.data = np.zeros(channels)
    return branch


def test_conv_branch_identity_kernel():
    rng = np.random.default_rng(0)
    branch = identity_conv(3, kernel_size=1)
    v = rand64(rng, (5, 4, 3))
    assert np.array_equal(branch(v).data, v.data)


def test_conv_branch_bias_only():
    branch = ConvBranch(2, dtype=np.float64, activation="identity")
    branch.weight.data = np.zeros_like(branch.weight.data)
    branch.bias.data = np.array([5.0, -1.0])
    out = branch(t64(np.random.default_rng(1).standard_normal((3, 3, 2))))
    assert np.allclose(out.data[..., 0], 5.0) and np.allclose(out.data[..., 1], -1.0)


def five_loop_conv_same(x, w, b):
    """Direct evaluation of the padded convolution sum, no vectorization."""
    h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    out = np.zeros((h, wd, cout))
    for i in range(h):
        for j in range(wd):
            for k in range(cout):
                acc = b[k]
                for m in range(kh):
                    for n in range(kw):
                        ii, jj = i + m - pt, j + n - pl
                        if 0 <= ii < h and 0 <= jj < wd:
                            for l in range(cin):
                                acc += x[ii, jj, l] * w[m, n, l, k]
                out[i, j, k] = acc
    return out


def test_conv_branch_matches_nested_loop_oracle():
    rng = np.random.default_rng(2)
    branch = ConvBranch(2, dtype=np.float64, activation="identity")
    branch.weight.data = rng.standard_normal((3, 3, 2, 2))
    branch.bias.data = rng.standard_normal(2)
    x = rng.standard_normal((5, 5, 2))
    got = branch(t64(x)).data
    want = five_loop_conv_same(x, branch.weight.data, branch.bias.data)
    assert np.abs(got - want).max() < 1e-6


def test_conv_branch_channel_mismatch_errors():
    branch = ConvBranch(4, dtype=np.float64)
    with pytest.raises(ShapeError):
        branch(t64(np.zeros((3, 3, 2))))


def test_conv_branch_1x1_kernel_commutes_with_spatial_permutation():
    rng = np.random.default_rng(18)
    branch = ConvBranch(3, kernel_size=1, rng=rng, dtype=np.float64)
    branch.weight.data = rng.standard_normal((1, 1, 3, 3))
    v = rng.standard_normal((2, 4, 3))
    perm = rng.permutation(8)
    out = branch(t64(v)).data.reshape(8, 3)
    out_perm = branch(t64(v.reshape(8, 3)[perm].reshape(2, 4, 3))).data.reshape(8, 3)
    assert np.allclose(out[perm], out_perm)


# -- attention branch -------------------------------------------------------------


def test_attention_single_token():
    rng = np.random.default_rng(3)
    branch = AttentionBranch(4, heads=1, rng=rng, dtype=np.float64)
    v = rand64(rng, (1, 1, 4))
    attn = branch.attention(v)
    assert attn.shape == (1, 1, 1) and np.allclose(attn.data, 1.0)
    want = (v.data.reshape(1, 4) @ branch.v_proj.data[0]) @ branch.out_proj.data
    assert np.allclose(branch(v).data.reshape(1, 4), want)


def test_attention_identical_tokens_give_uniform_rows():
    rng = np.random.default_rng(4)
    branch = AttentionBranch(6, heads=2, rng=rng, dtype=np.float64)
    token = rng.standard_normal(6)
    v = t64(np.tile(token, (2, 3, 1)))
    attn = branch.attention(v).data
    assert np.allclose(attn, 1.0 / 6.0)


def two_token_attention_oracle(x, wq, wk, wv, wo):
    """Eqs. written out by hand for one head and two tokens."""
    q, k, v = x @ wq, x @ wk, x @ wv
    d = q.shape[-1]
    scores = q @ k.T / math.sqrt(d)
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    return (attn @ v) @ wo


def test_attention_two_tokens_matches_oracle():
    rng = np.random.default_rng(5)
    branch = AttentionBranch(4, heads=1, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 4))
    got = branch(t64(x.reshape(2, 1, 4))).data.reshape(2, 4)
    want = two_token_attention_oracle(
        x, branch.q_proj.data[0], branch.k_proj.data[0], branch.v_proj.data[0],
        branch.out_proj.data,
    )
    assert np.abs(got - want).max() < 1e-6


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(6)
    branch = AttentionBranch(8, heads=2, rng=rng, dtype=np.float64)
    attn = branch.attention(rand64(rng, (3, 4, 8))).data
    assert np.abs(attn.sum(axis=-1) - 1.0).max() < 1e-6


def test_attention_head_count_must_divide_channels():
    with pytest.raises(ConfigError):
        AttentionBranch(6, heads=4)


# -- channel MLP branch -------------------------------------------------------------


def test_mlp_zero_input_zero_biases_gives_zero():
    branch = ChannelMlpBranch(3, dtype=np.float64)
    out = branch(t64(np.zeros((2, 2, 3))))
    assert np.array_equal(out.data, np.zeros((2, 2, 3)))


def test_mlp_commutes_with_spatial_permutation():
    rng = np.random.default_rng(7)
    branch = ChannelMlpBranch(4, rng=rng, dtype=np.float64)
    v = rng.standard_normal((3, 5, 4))
    perm = rng.permutation(15)
    out = branch(t64(v)).data.reshape(15, 4)
    out_perm = branch(t64(v.reshape(15, 4)[perm].reshape(3, 5, 4))).data.reshape(15, 4)
    assert np.allclose(out[perm], out_perm)


def gelu_np(x):
    from scipy.special import erf

    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def test_mlp_matches_two_matmul_oracle():
    rng = np.random.default_rng(8)
    branch = ChannelMlpBranch(3, rng=rng, dtype=np.float64)
    v = rng.standard_normal((1, 1, 3))
    got = branch(t64(v)).data
    hidden = gelu_np(v @ branch.w1.data + branch.b1.data)
    want = hidden @ branch.w2.data + branch.b2.data
    assert np.abs(got - want).max() < 1e-6


# -- cross-scan ---------------------------------------------------------------------


def test_cross_scan_traversal_orders():
    a, b, c, d = [float(v) for v in (1, 2, 3, 4)]
    v = t64(np.array([[[a], [b]], [[c], [d]]]))
    d1, d2, d3, d4 = [s.data[:, 0].tolist() for s in cross_scan(v)]
    assert d1 == [a, b, c, d]
    assert d2 == [d, c, b, a]
    assert d3 == [a, c, b, d]
    assert d4 == [d, b, c, a]


def test_cross_scan_single_position():
    v = t64(np.arange(3.0).reshape(1, 1, 3))
    for s in cross_scan(v):
        assert np.array_equal(s.data, v.data.reshape(1, 3))


def test_cross_merge_of_cross_scan_is_exactly_four_v():
    rng = np.random.default_rng(9)
    v = Tensor(rng.integers(-8, 9, size=(5, 3, 4)).astype(np.float32))
    merged = cross_merge(cross_scan(v), 5, 3)
    assert np.array_equal(merged.data, 4.0 * v.data)


# -- scans --------------------------------------------------------------------------


def test_linear_scan_zero_decay_is_passthrough():
    rng = np.random.default_rng(10)
    u = rng.standard_normal((7, 3, 2))
    h = linear_scan(t64(np.zeros_like(u)), t64(u)).data
    assert np.allclose(h, u)
    # y_t = <ones/N, h_t> recovers u when the drive replicates u over N states
    y = (h * (1.0 / h.shape[-1])).sum(-1)
    assert np.allclose(y, u.mean(-1))


def test_linear_scan_unit_decay_is_prefix_sum():
    rng = np.random.default_rng(11)
    u = rng.standard_normal((9, 1, 1))
    h = linear_scan(t64(np.ones_like(u)), t64(u)).data
    assert np.allclose(h[:, 0, 0], np.cumsum(u[:, 0, 0]), atol=1e-12)


def naive_selective_scan(u, p):
    """Sequential recurrence evaluated directly from the documented equations."""
    t_len, c = u.shape[-2:]
    n = p.state_dim
    dt = np.logaddexp(0.0, u @ p.dt_weight.data + p.dt_bias.data)
    b_tok = u @ p.b_weight.data
    c_tok = u @ p.c_weight.data
    h = np.zeros(u.shape[:-2] + (c, n))
    y = np.zeros_like(u)
    for t in range(t_len):
        decay = np.exp(dt[..., t, :, None] * p.log_decay_rates.data)
        drive = (dt[..., t, :] * u[..., t, :])[..., None] * b_tok[..., t, None, :]
        h = decay * h + drive
        y[..., t, :] = (h * c_tok[..., t, None, :]).sum(-1) + p.skip_gain.data * u[..., t, :]
    return y


def test_selective_scan_matches_sequential_oracle():
    rng = np.random.default_rng(12)
    params = SsmBranch(8, state_dim=4, rng=rng, dtype=np.float64)
    u = rng.standard_normal((16, 8))
    got = selective_scan(t64(u), params).data
    assert np.abs(got - naive_selective_scan(u, params)).max() < 1e-5


def test_selective_scan_small_step_limit_is_skip_path():
    rng = np.random.default_rng(13)
    params = SsmBranch(4, state_dim=3, rng=rng, dtype=np.float64)
    params.dt_weight.data = np.zeros_like(params.dt_weight.data)
    params.dt_bias.data = np.full_like(params.dt_bias.data, np.log(np.expm1(1e-8)))
    u = rng.standard_normal((12, 4))
    out = selective_scan(t64(u), params).data
    assert np.abs(out - params.skip_gain.data * u).max() < 1e-5


# -- assembled SSM branch --------------------------------------------------------------


def test_ssm_branch_single_position_is_four_times_token_scan():
    rng = np.random.default_rng(14)
    branch = SsmBranch(6, state_dim=4, rng=rng, dtype=np.float64)
    v = rand64(rng, (1, 1, 6))
    token = reshape(v, (1, 6))
    y = selective_scan(token, branch).data
    want = (4.0 * y) @ branch.out_weight.data + branch.out_bias.data
    assert np.allclose(branch(v).data.reshape(1, 6), want)


def test_ssm_branch_transpose_symmetry_with_shared_directions():
    rng = np.random.default_rng(15)
    branch = SsmBranch(5, state_dim=4, rng=rng, dtype=np.float64)
    v = rand64(rng, (3, 3, 5))
    direct = branch(transpose(v, (1, 0, 2))).data
    swapped = branch(v).data.transpose(1, 0, 2)
    assert np.abs(direct - swapped).max() < 1e-10


def test_ssm_branch_zero_input_zero_output():
    branch = SsmBranch(4, state_dim=2, dtype=np.float64)
    out = branch(t64(np.zeros((3, 2, 4))))
    assert np.allclose(out.data, 0.0, atol=1e-300)


def test_ssm_branch_separate_direction_parameters():
    rng = np.random.default_rng(16)
    shared = SsmBranch(4, state_dim=3, shared_directions=True, rng=rng, dtype=np.float64)
    separate = SsmBranch(4, state_dim=3, shared_directions=False,
                         rng=np.random.default_rng(16), dtype=np.float64)
    assert separate.parameter_count() > shared.parameter_count()
    v = rand64(rng, (2, 3, 4))
    assert separate(v).shape == (2, 3, 4)


def test_state_dim_must_be_positive():
    with pytest.raises(ConfigError):
        SsmBranch(4, state_dim=0)


# -- shared shape contract ---------------------------------------------------------------


@pytest.mark.parametrize("spatial", [(1, 1), (2, 3), (5, 4)])
def test_all_branches_preserve_shape(spatial):
    rng = np.random.default_rng(17)
    h, w = spatial
    c = 4
    v = rand64(rng, (h, w, c))
    branches = [
        ConvBranch(c, rng=rng, dtype=np.float64),
        AttentionBranch(c, heads=2, rng=rng, dtype=np.float64),
        ChannelMlpBranch(c, rng=rng, dtype=np.float64),
        SsmBranch(c, state_dim=3, rng=rng, dtype=np.float64),
    ]
    for branch in branches:
        assert branch(v).shape == (h, w, c)
        batched = rand64(rng, (2, h, w, c))
        assert branch(batched).shape == (2, h, w, c)
