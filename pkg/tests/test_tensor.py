"""Substrate tests: primitive semantics, backward rules, finite-difference
verification of every differentiable primitive, and determinism."""

import numpy as np
import pytest

from mixssm.errors import NumericsError, ShapeError
from mixssm.gradcheck import finite_diff_check
from mixssm.tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    exp,
    flip,
    gelu,
    layer_norm,
    log,
    matmul,
    maximum,
    mul,
    no_grad,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    slice_,
    softmax,
    softplus,
    sqrt,
    transpose,
)


def tensor64(values, requires_grad=False):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=requires_grad)


# -- documented forward examples ------------------------------------------------


def test_add_elementwise():
    out = add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    assert np.array_equal(out.data, [4.0, 6.0])


def test_softmax_of_zeros_is_uniform():
    out = softmax(Tensor(np.zeros(4)), axis=-1)
    assert np.allclose(out.data, 0.25, atol=0)


def triple_loop_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]), dtype=a.dtype)
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((3, 4))
    got = matmul(tensor64(a), tensor64(b)).data
    assert np.abs(got - triple_loop_matmul(a, b)).max() < 1e-6


# -- backward examples -----------------------------------------------------------


def test_backward_sum_of_squares():
    x = tensor64([3.0], requires_grad=True)
    loss = reduce_sum(mul(x, x))
    loss.backward()
    assert np.allclose(x.grad, [6.0])


def test_backward_of_sum_is_ones():
    a = tensor64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = tensor64([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    reduce_sum(add(a, b)).backward()
    assert np.array_equal(a.grad, np.ones((2, 2)))
    assert np.array_equal(b.grad, np.ones((2, 2)))


def test_backward_softmax_head_matches_finite_differences():
    rng = np.random.default_rng(11)
    z = tensor64(rng.standard_normal(5))
    onehot = tensor64(np.eye(5)[2])
    report = finite_diff_check(
        lambda t: reduce_mean(mul(softmax(t, axis=-1), onehot)),
        z,
        step=1e-3,
        tolerance=1e-4,
    )
    assert report.passed, report


def test_backward_accumulates_until_cleared():
    x = tensor64([2.0], requires_grad=True)
    reduce_sum(mul(x, x)).backward()
    reduce_sum(mul(x, x)).backward()
    assert np.allclose(x.grad, [8.0])
    x.grad = None
    reduce_sum(mul(x, x)).backward()
    assert np.allclose(x.grad, [4.0])


def test_backward_requires_scalar_loss():
    x = tensor64([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError):
        add(x, x).backward()


def test_detached_graph_leaves_grads_absent():
    x = tensor64([1.0], requires_grad=True)
    with no_grad():
        y = reduce_sum(mul(x, x))
    y.backward()
    assert x.grad is None


# -- finite_diff_check contract ----------------------------------------------------


def test_finite_diff_check_sum_of_squares():
    rng = np.random.default_rng(0)
    x = tensor64(rng.standard_normal(10))
    report = finite_diff_check(lambda t: reduce_sum(mul(t, t)), x, step=1e-4, tolerance=1e-6)
    assert report.passed and report.max_rel_error < 1e-6


def test_finite_diff_check_constant_function():
    x = tensor64(np.ones(4))
    report = finite_diff_check(lambda t: reduce_sum(mul(t, tensor64(np.zeros(4)))), x)
    assert report.max_rel_error == 0.0


def test_finite_diff_check_rejects_nondeterministic_function():
    state = {"calls": 0}

    def noisy(t):
        state["calls"] += 1
        return reduce_sum(t) * float(state["calls"])

    with pytest.raises(ValueError, match="deterministic"):
        finite_diff_check(noisy, tensor64([1.0]))


# -- per-primitive gradient property ------------------------------------------------

_R = {}


def _proj(rng, shape):
    return tensor64(rng.standard_normal(shape))


def _head(rng):
    """Scalar head: sum(out * R) with a fixed random projection."""

    def wrap(out):
        key = out.shape
        return reduce_sum(mul(out, _R[key]))

    return wrap


PRIMITIVE_CASES = [
    ("add_lhs", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: add(x, c((3, 4)))),
    ("add_rhs_broadcast", lambda rng: rng.standard_normal(4),
     lambda x, c: add(c((3, 4)), x)),
    ("mul_lhs", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: mul(x, c((3, 4)))),
    ("mul_rhs_broadcast", lambda rng: rng.standard_normal(4),
     lambda x, c: mul(c((3, 4)), x)),
    ("matmul_lhs", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: matmul(x, c((4, 2)))),
    ("matmul_rhs", lambda rng: rng.standard_normal((4, 2)),
     lambda x, c: matmul(c((3, 4)), x)),
    ("matmul_batched", lambda rng: rng.standard_normal((2, 3, 4)),
     lambda x, c: matmul(x, c((4, 2)))),
    ("conv2d_input", lambda rng: rng.standard_normal((4, 4, 3)),
     lambda x, c: conv2d(x, c((3, 3, 3, 2)), c((2,)))),
    ("conv2d_kernel", lambda rng: rng.standard_normal((3, 3, 3, 2)),
     lambda x, c: conv2d(c((4, 4, 3)), x, c((2,)))),
    ("conv2d_bias", lambda rng: rng.standard_normal(2),
     lambda x, c: conv2d(c((4, 4, 3)), c((3, 3, 3, 2)), x)),
    ("conv2d_strided_valid", lambda rng: rng.standard_normal((6, 6, 2)),
     lambda x, c: conv2d(x, c((2, 2, 2, 3)), stride=2, padding="valid")),
    ("conv2d_depthwise", lambda rng: rng.standard_normal((4, 4, 3)),
     lambda x, c: conv2d(x, c((3, 3, 1, 3)), groups=3)),
    ("conv2d_grouped", lambda rng: rng.standard_normal((4, 4, 4)),
     lambda x, c: conv2d(x, c((3, 3, 2, 4)), groups=2)),
    ("reshape", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: reshape(x, (2, 6))),
    ("transpose", lambda rng: rng.standard_normal((2, 3, 4)),
     lambda x, c: transpose(x, (2, 0, 1))),
    ("slice", lambda rng: rng.standard_normal((4, 5)),
     lambda x, c: slice_(x, (slice(1, 3), slice(0, 4)))),
    ("concat", lambda rng: rng.standard_normal((2, 3)),
     lambda x, c: concat([x, c((2, 3)), x], axis=1)),
    ("flip", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: flip(x, axis=0)),
    ("exp", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: exp(x)),
    ("log", lambda rng: rng.uniform(0.5, 2.0, (3, 4)),
     lambda x, c: log(x)),
    ("sqrt", lambda rng: rng.uniform(0.5, 2.0, (3, 4)),
     lambda x, c: sqrt(x)),
    ("softplus", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: softplus(x)),
    ("gelu", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: gelu(x)),
    ("layer_norm_input", lambda rng: rng.standard_normal((3, 6)),
     lambda x, c: layer_norm(x, c((6,)), c((6,)))),
    ("layer_norm_gamma", lambda rng: rng.standard_normal(6),
     lambda x, c: layer_norm(c((3, 6)), x, c((6,)))),
    ("layer_norm_beta", lambda rng: rng.standard_normal(6),
     lambda x, c: layer_norm(c((3, 6)), c((6,)), x)),
    ("softmax_axis", lambda rng: rng.standard_normal((3, 5)),
     lambda x, c: softmax(x, axis=-1)),
    ("reduce_sum_axis", lambda rng: rng.standard_normal((3, 4, 2)),
     lambda x, c: reduce_sum(x, axis=(0, 2))),
    ("reduce_mean_all", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: reduce_mean(x)),
    ("reduce_max_axis", lambda rng: rng.standard_normal((3, 4, 2)),
     lambda x, c: reduce_max(x, axis=(-3, -2))),
    ("elementwise_max", lambda rng: rng.standard_normal((3, 4)),
     lambda x, c: maximum(x, c((3, 4)))),
]


@pytest.mark.parametrize("name,make_input,apply", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradients_match_finite_differences(name, make_input, apply):
    for seed in range(5):
        rng = np.random.default_rng(1000 + seed)
        consts = {}

        def const(shape):
            if shape not in consts:
                consts[shape] = tensor64(rng.standard_normal(shape))
            return consts[shape]

        x = tensor64(make_input(rng))
        probe_out = apply(x, const)
        _R[probe_out.shape] = tensor64(rng.standard_normal(probe_out.shape))
        head = _head(rng)
        report = finite_diff_check(
            lambda t: head(apply(t, const)), x, step=1e-4, tolerance=1e-4
        )
        assert report.passed, f"{name} seed {seed}: {report}"


# -- structural invariants --------------------------------------------------------


def test_reshape_transpose_round_trip_is_bitwise_identity():
    rng = np.random.default_rng(5)
    x = Tensor(rng.standard_normal((3, 4, 5)).astype(np.float32))
    back = reshape(reshape(x, (12, 5)), (3, 4, 5))
    assert np.array_equal(back.data, x.data)
    twice = transpose(transpose(x, (2, 0, 1)), (1, 2, 0))
    assert np.array_equal(twice.data, x.data)


def test_softmax_rows_sum_to_one_and_shift_invariance():
    rng = np.random.default_rng(6)
    for seed in range(5):
        z = rng.standard_normal((4, 7))
        out = softmax(tensor64(z), axis=-1).data
        assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-6
        shifted = softmax(tensor64(z + 13.7), axis=-1).data
        assert np.abs(out - shifted).max() < 1e-6
    # single precision carries the same contract
    z32 = Tensor(rng.standard_normal((3, 6)).astype(np.float32))
    out32 = softmax(z32, axis=-1).data
    assert np.abs(out32.sum(axis=-1) - 1.0).max() < 1e-6


def test_fixed_seed_graph_is_bitwise_deterministic():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.standard_normal((6, 6, 3)).astype(np.float32), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3, 3, 3)).astype(np.float32), requires_grad=True)
        out = reduce_mean(gelu(conv2d(x, w)))
        out.backward()
        return out.data.copy(), x.grad.copy(), w.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)


# -- error contracts ----------------------------------------------------------------


def test_overflow_surfaces_as_error_not_nan():
    with pytest.raises(NumericsError, match="exp"):
        exp(Tensor([1000.0], dtype=np.float32))


def test_non_finite_input_rejected_at_construction():
    with pytest.raises(NumericsError):
        Tensor([np.nan, 1.0])
    with pytest.raises(NumericsError):
        Tensor([np.inf], dtype=np.float64)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as err:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "add" in str(err.value) and "(2, 3)" in str(err.value)
    with pytest.raises(ShapeError) as err:
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    assert "matmul" in str(err.value)
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((3, 3, 2, 2))))


def test_mixed_precision_in_one_graph_rejected():
    with pytest.raises(TypeError, match="mixed"):
        add(Tensor([1.0], dtype=np.float32), Tensor([1.0], dtype=np.float64))
