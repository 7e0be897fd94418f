"""The four visual encoding branches of a mixing block.

Each branch maps a feature map (..., H, W, C) to a same-shape map:

* :class:`ConvBranch` -- one SAME 3x3 convolution plus activation.
* :class:`AttentionBranch` -- full multi-head self-attention over the
  flattened token sequence.
* :class:`ChannelMlpBranch` -- per-position two-layer channel MLP.
* :class:`SsmBranch` -- cross-scan into four directional sequences, an
  input-conditioned diagonal state-space scan per direction, inverse
  reordering, summation and a pointwise output mix.

Leading axes beyond (H, W, C) are treated as batch dimensions everywhere.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError, ShapeError
from .modules import Module, trunc_normal
from .tensor import (
    Tensor,
    add,
    concat,
    conv2d,
    exp,
    flip,
    gelu,
    matmul,
    mul,
    reduce_sum,
    reshape,
    slice_,
    softmax,
    softplus,
    transpose,
)

__all__ = [
    "ConvBranch",
    "AttentionBranch",
    "ChannelMlpBranch",
    "SsmBranch",
    "cross_scan",
    "cross_merge",
    "linear_scan",
    "selective_scan",
]

_ACTIVATIONS = {"gelu": gelu, "identity": lambda t: t}


def _activation(name: str):
    if name not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {name!r}; expected one of {sorted(_ACTIVATIONS)}")
    return _ACTIVATIONS[name]


# -- directional unrolling ---------------------------------------------------


def cross_scan(v: Tensor) -> list[Tensor]:
    """Unroll a (..., H, W, C) map into four 1-d traversals of length H*W.

    Directions: row-major; its reverse; column-major; its reverse.
    """
    if v.ndim < 3:
        raise ShapeError(f"cross_scan expects (..., H, W, C), got {v.shape}")
    *lead, h, w, c = v.shape
    seq_shape = (*lead, h * w, c)
    d1 = reshape(v, seq_shape)
    d2 = flip(d1, axis=-2)
    perm = tuple(range(len(lead))) + (v.ndim - 2, v.ndim - 3, v.ndim - 1)
    d3 = reshape(transpose(v, perm), seq_shape)
    d4 = flip(d3, axis=-2)
    return [d1, d2, d3, d4]


def cross_merge(seqs: list[Tensor], h: int, w: int) -> Tensor:
    """Reorder four directional sequences back onto the grid and sum them."""
    if len(seqs) != 4:
        raise ShapeError(f"cross_merge expects 4 sequences, got {len(seqs)}")
    *lead, t, c = seqs[0].shape
    if t != h * w:
        raise ShapeError(f"cross_merge: sequence length {t} != {h}x{w}")
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    g1 = reshape(seqs[0], (*lead, h, w, c))
    g2 = reshape(flip(seqs[1], axis=-2), (*lead, h, w, c))
    g3 = transpose(reshape(seqs[2], (*lead, w, h, c)), perm)
    g4 = transpose(reshape(flip(seqs[3], axis=-2), (*lead, w, h, c)), perm)
    return add(add(g1, g2), add(g3, g4))


# -- linear recurrence -------------------------------------------------------


def linear_scan(decay: Tensor, x: Tensor, time_axis: int = -3) -> Tensor:
    """Inclusive scan of h_t = decay_t * h_{t-1} + x_t with h_0 = 0.

    Computed in log2(T) doubling rounds of vectorized ops instead of a
    T-step python loop; the reassociated products match the sequential
    recurrence up to roundoff.
    """
    if decay.shape != x.shape:
        raise ShapeError(f"linear_scan: decay shape {decay.shape} != input shape {x.shape}")
    axis = time_axis % x.ndim
    t = x.shape[axis]

    def seg(tensor: Tensor, start: int, stop: int) -> Tensor:
        key = [slice(None)] * tensor.ndim
        key[axis] = slice(start, stop)
        return slice_(tensor, tuple(key))

    a, b = decay, x
    step = 1
    while step < t:
        head_shape = list(a.shape)
        head_shape[axis] = step
        ones_head = Tensor(np.ones(head_shape, dtype=a.dtype))
        zeros_head = Tensor(np.zeros(head_shape, dtype=a.dtype))
        a_prev = concat([ones_head, seg(a, 0, t - step)], axis)
        b_prev = concat([zeros_head, seg(b, 0, t - step)], axis)
        b = add(b, mul(a, b_prev))
        a = mul(a, a_prev)
        step *= 2
    return b


def selective_scan(u: Tensor, params: "SsmBranch") -> Tensor:
    """Input-conditioned diagonal SSM over a token sequence.

    ``u``: (..., T, C).  Per channel c with state h in R^N and h_0 = 0:

        dt_t   = softplus(u_t @ W_dt + b_dt)            (per token, per channel)
        Abar_t = exp(dt_t * A_c)                        (diagonal decay)
        h_t    = Abar_t * h_{t-1} + (dt_t * u_{t,c}) * B_t
        y_t,c  = <C_t, h_t> + d_skip_c * u_{t,c}

    where B_t = u_t @ W_B and C_t = u_t @ W_C are per-token N-vectors.
    """
    lead = u.shape[:-2]
    t, c = u.shape[-2:]
    n = params.state_dim

    dt = softplus(add(matmul(u, params.dt_weight), params.dt_bias))
    b_tok = matmul(u, params.b_weight)
    c_tok = matmul(u, params.c_weight)

    decay = exp(mul(reshape(dt, (*lead, t, c, 1)), params.log_decay_rates))
    drive = mul(reshape(mul(dt, u), (*lead, t, c, 1)), reshape(b_tok, (*lead, t, 1, n)))
    h = linear_scan(decay, drive, time_axis=-3)
    read = reduce_sum(mul(h, reshape(c_tok, (*lead, t, 1, n))), axis=-1)
    return add(read, mul(u, params.skip_gain))


# -- branches ----------------------------------------------------------------


class ConvBranch(Module):
    """Shape-preserving SAME convolution (Eq.-style kernel layout kh,kw,cin,cout)."""

    def __init__(
        self,
        channels: int,
        kernel_size: int = 3,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        activation: str = "gelu",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Tensor(
            trunc_normal(rng, (kernel_size, kernel_size, channels, channels), dtype=dtype),
            requires_grad=True,
        )
        self.bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.stride = 1
        self.act = activation

    def __call__(self, v: Tensor) -> Tensor:
        if v.shape[-1] != self.weight.shape[2]:
            raise ShapeError(
                f"conv branch built for {self.weight.shape[2]} channels, input has {v.shape[-1]}"
            )
        out = conv2d(v, self.weight, self.bias, stride=self.stride, padding="same")
        return _activation(self.act)(out)


class AttentionBranch(Module):
    """Full (non-windowed) multi-head self-attention over the token grid."""

    def __init__(
        self,
        channels: int,
        heads: int,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if heads < 1 or channels % heads:
            raise ConfigError(f"heads={heads} must divide channels={channels}")
        rng = rng if rng is not None else np.random.default_rng(0)
        head_dim = channels // heads
        self.heads = heads
        self.head_dim = head_dim
        self.q_proj = Tensor(trunc_normal(rng, (heads, channels, head_dim), dtype=dtype), requires_grad=True)
        self.k_proj = Tensor(trunc_normal(rng, (heads, channels, head_dim), dtype=dtype), requires_grad=True)
        self.v_proj = Tensor(trunc_normal(rng, (heads, channels, head_dim), dtype=dtype), requires_grad=True)
        self.out_proj = Tensor(trunc_normal(rng, (channels, channels), dtype=dtype), requires_grad=True)

    def _attend(self, v: Tensor) -> tuple[Tensor, Tensor]:
        *lead, h, w, c = v.shape
        t = h * w
        nl = len(lead)
        x = reshape(v, (*lead, 1, t, c))
        q = matmul(x, self.q_proj)
        k = matmul(x, self.k_proj)
        vals = matmul(x, self.v_proj)
        scale = Tensor(np.asarray(1.0 / math.sqrt(self.head_dim), dtype=v.dtype))
        swap_last = tuple(range(nl)) + (nl, nl + 2, nl + 1)
        to_tokens = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        scores = mul(matmul(q, transpose(k, swap_last)), scale)
        attn = softmax(scores, axis=-1)
        mixed = matmul(attn, vals)
        merged = reshape(transpose(mixed, to_tokens), (*lead, t, self.heads * self.head_dim))
        out = reshape(matmul(merged, self.out_proj), (*lead, h, w, c))
        return out, attn

    def __call__(self, v: Tensor) -> Tensor:
        out, _ = self._attend(v)
        return out

    def attention(self, v: Tensor) -> Tensor:
        """Row-stochastic attention matrices, shape (..., heads, T, T)."""
        _, attn = self._attend(v)
        return attn


class ChannelMlpBranch(Module):
    """Per-position channel mixer: C -> hidden -> C, pure channel mixing."""

    def __init__(
        self,
        channels: int,
        hidden: int | None = None,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
        activation: str = "gelu",
    ):
        rng = rng if rng is not None else np.random.default_rng(0)
        hidden = hidden if hidden is not None else 2 * channels
        self.w1 = Tensor(trunc_normal(rng, (channels, hidden), dtype=dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(trunc_normal(rng, (hidden, channels), dtype=dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.act = activation

    def __call__(self, v: Tensor) -> Tensor:
        h = _activation(self.act)(add(matmul(v, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


class SsmBranch(Module):
    """Cross-scan selective SSM branch.

    The four scan directions share the dt/B/C projections by default; with
    ``shared_directions=False`` each direction owns its own set.  The
    diagonal rates start at -(1..N) per channel and the dt bias is drawn so
    softplus lands in [1e-3, 1e-1], keeping the scan stable at init.
    """

    def __init__(
        self,
        channels: int,
        state_dim: int = 8,
        shared_directions: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if state_dim < 1:
            raise ConfigError(f"state_dim must be >= 1, got {state_dim}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim = state_dim
        self.shared_directions = shared_directions

        rates = -np.tile(np.arange(1.0, state_dim + 1.0), (channels, 1))
        self.log_decay_rates = Tensor(rates.astype(dtype), requires_grad=True)
        self.skip_gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)

        if shared_directions:
            proj_shape = (channels, channels)
            bn_shape = (channels, state_dim)
            bias_shape = (channels,)
        else:
            proj_shape = (4, channels, channels)
            bn_shape = (4, channels, state_dim)
            bias_shape = (4, 1, channels)
        dt_init = np.exp(rng.uniform(math.log(1e-3), math.log(1e-1), size=bias_shape))
        self.dt_weight = Tensor(trunc_normal(rng, proj_shape, dtype=dtype), requires_grad=True)
        self.dt_bias = Tensor(np.log(np.expm1(dt_init)).astype(dtype), requires_grad=True)
        self.b_weight = Tensor(trunc_normal(rng, bn_shape, dtype=dtype), requires_grad=True)
        self.c_weight = Tensor(trunc_normal(rng, bn_shape, dtype=dtype), requires_grad=True)
        self.out_weight = Tensor(trunc_normal(rng, (channels, channels), dtype=dtype), requires_grad=True)
        self.out_bias = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, v: Tensor) -> Tensor:
        *lead, h, w, c = v.shape
        t = h * w
        seqs = cross_scan(v)
        stacked = concat([reshape(s, (*lead, 1, t, c)) for s in seqs], axis=-3)
        scanned = selective_scan(stacked, self)
        outs = []
        for k in range(4):
            key = [slice(None)] * scanned.ndim
            key[scanned.ndim - 3] = slice(k, k + 1)
            outs.append(reshape(slice_(scanned, tuple(key)), (*lead, t, c)))
        merged = cross_merge(outs, h, w)
        return add(matmul(merged, self.out_weight), self.out_bias)
