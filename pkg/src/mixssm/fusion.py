"""Adaptive aggregation of the branch outputs.

The selective path sums the branch maps, optionally smooths the sum with a
depthwise k x k convolution, pools it to a per-channel descriptor, runs a
squeeze-style MLP to one logit per (channel, strategy) pair, normalizes over
strategies with softmax, and takes the per-channel convex combination of the
branch maps.  The elementwise max / average modes are the non-adaptive
baselines that replace the whole module.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .modules import Module, trunc_normal
from .tensor import (
    Tensor,
    add,
    conv2d,
    gelu,
    matmul,
    maximum,
    mul,
    reduce_max,
    reduce_mean,
    reduce_sum,
    reshape,
    slice_,
    softmax,
    sqrt,
)

__all__ = [
    "SelectiveFusion",
    "fuse_sum",
    "pool_global",
    "selective_combine",
    "selective_module",
    "POOLING_METHODS",
    "AGGREGATION_MODES",
]

POOLING_METHODS = ("average", "max", "l2", "stochastic")
AGGREGATION_MODES = ("selective", "elementwise-max", "elementwise-average")


def fuse_sum(branch_outputs: list[Tensor]) -> Tensor:
    """Elementwise sum of same-shape branch maps."""
    if not branch_outputs:
        raise ShapeError("fuse_sum needs at least one branch output")
    shape = branch_outputs[0].shape
    for f in branch_outputs[1:]:
        if f.shape != shape:
            raise ShapeError(f"fuse_sum: branch shapes {shape} and {f.shape} differ")
    acc = branch_outputs[0]
    for f in branch_outputs[1:]:
        acc = add(acc, f)
    return acc


def pool_global(
    f: Tensor,
    method: str = "average",
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Pool (..., H, W, C) down to (..., C).

    ``average`` is the spatial mean; ``max`` the spatial maximum; ``l2`` the
    root of the spatial mean of squares.  ``stochastic`` samples one position
    per channel with probability proportional to the softmax of the spatial
    activations when ``training`` (from the explicitly passed ``rng``), and
    returns the probability-weighted expectation otherwise.
    """
    if f.ndim < 3:
        raise ShapeError(f"pool_global expects (..., H, W, C), got {f.shape}")
    if method == "average":
        return reduce_mean(f, axis=(-3, -2))
    if method == "max":
        return reduce_max(f, axis=(-3, -2))
    if method == "l2":
        return sqrt(reduce_mean(mul(f, f), axis=(-3, -2)))
    if method == "stochastic":
        *lead, h, w, c = f.shape
        flat = reshape(f, (*lead, h * w, c))
        probs = softmax(flat, axis=-2)
        if not training:
            return reduce_sum(mul(probs, flat), axis=-2)
        if rng is None:
            raise ValueError("stochastic pooling in training mode needs an explicit rng")
        p = probs.data
        cum = np.cumsum(p, axis=-2)
        draw = rng.random(size=(*lead, 1, c))
        idx = np.sum(cum < draw, axis=-2, keepdims=True)
        np.clip(idx, 0, h * w - 1, out=idx)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx, 1.0, axis=-2)
        return reduce_sum(mul(flat, Tensor(onehot, dtype=f.dtype)), axis=-2)
    raise ValueError(f"unknown pooling method {method!r}; expected one of {POOLING_METHODS}")


def selective_combine(branch_outputs: list[Tensor], weights: Tensor) -> Tensor:
    """Per-channel convex combination sum_m p[..., c, m] * F_m(..., c)."""
    n = len(branch_outputs)
    if weights.shape[-1] != n:
        raise ShapeError(
            f"selective_combine: {n} branch outputs but weights have {weights.shape[-1]} columns"
        )
    c = branch_outputs[0].shape[-1]
    if weights.shape[-2] != c:
        raise ShapeError(f"selective_combine: weights cover {weights.shape[-2]} channels, maps have {c}")
    lead = weights.shape[:-2]
    acc = None
    for m, f in enumerate(branch_outputs):
        if f.shape[-1] != c:
            raise ShapeError(f"selective_combine: branch {m} has {f.shape[-1]} channels, expected {c}")
        key = [slice(None)] * weights.ndim
        key[-1] = slice(m, m + 1)
        w_m = reshape(slice_(weights, tuple(key)), (*lead, 1, 1, c))
        term = mul(w_m, f)
        acc = term if acc is None else add(acc, term)
    return acc


class SelectiveFusion(Module):
    """Weight generator and combiner for ``n`` encoding strategies.

    The depthwise pre-pool kernel starts as the identity (center tap one) so
    a freshly built module with k > 1 reproduces the plain k = 1 path.
    """

    def __init__(
        self,
        channels: int,
        n: int,
        reduction: int = 4,
        kernel_size: int = 3,
        pooling: str = "average",
        mode: str = "selective",
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        if n < 1:
            raise ConfigError(f"need at least one strategy, got n={n}")
        if reduction < 1 or channels % reduction:
            raise ConfigError(f"reduction {reduction} must divide channels {channels}")
        if kernel_size % 2 == 0 or kernel_size < 1:
            raise ConfigError(f"pre-pool kernel size must be odd, got {kernel_size}")
        if pooling not in POOLING_METHODS:
            raise ConfigError(f"unknown pooling {pooling!r}; expected one of {POOLING_METHODS}")
        if mode not in AGGREGATION_MODES:
            raise ConfigError(f"unknown aggregation {mode!r}; expected one of {AGGREGATION_MODES}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n = n
        self.channels = channels
        self.pooling = pooling
        self.mode = mode

        kernel = np.zeros((kernel_size, kernel_size, 1, channels), dtype=dtype)
        kernel[kernel_size // 2, kernel_size // 2, 0, :] = 1.0
        self.pre_pool_kernel = Tensor(kernel, requires_grad=True)

        hidden = channels // reduction
        self.w1 = Tensor(trunc_normal(rng, (channels, hidden), dtype=dtype), requires_grad=True)
        self.b1 = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(trunc_normal(rng, (hidden, channels * n), dtype=dtype), requires_grad=True)
        self.b2 = Tensor(np.zeros(channels * n, dtype=dtype), requires_grad=True)

    def selective_weights(self, g: Tensor) -> Tensor:
        """Map a pooled (..., C) descriptor to (..., C, n) softmax weights.

        The MLP output vector reshapes row-major, so logits for channel c
        occupy the block [c*n, (c+1)*n); softmax runs over that strategy
        axis independently per channel.
        """
        if g.shape[-1] != self.channels:
            raise ShapeError(f"pooled descriptor has {g.shape[-1]} channels, expected {self.channels}")
        lead = g.shape[:-1]
        gm = reshape(g, (*lead, 1, self.channels))
        h = gelu(add(matmul(gm, self.w1), self.b1))
        logits = add(matmul(h, self.w2), self.b2)
        logits = reshape(logits, (*lead, self.channels, self.n))
        return softmax(logits, axis=-1)

    def __call__(
        self,
        branch_outputs: list[Tensor],
        mode: str | None = None,
        rng: np.random.Generator | None = None,
        training: bool = False,
    ) -> Tensor:
        return selective_module(branch_outputs, self, mode=mode, rng=rng, training=training)


def selective_module(
    branch_outputs: list[Tensor],
    params: SelectiveFusion,
    mode: str | None = None,
    rng: np.random.Generator | None = None,
    training: bool = False,
) -> Tensor:
    """Aggregate branch maps by the configured (or overridden) mode."""
    mode = mode if mode is not None else params.mode
    if mode == "selective":
        if len(branch_outputs) != params.n:
            raise ShapeError(
                f"fusion built for {params.n} strategies, got {len(branch_outputs)} branch outputs"
            )
        fused = fuse_sum(branch_outputs)
        smoothed = conv2d(fused, params.pre_pool_kernel, padding="same", groups=params.channels)
        pooled = pool_global(smoothed, params.pooling, rng=rng, training=training)
        weights = params.selective_weights(pooled)
        return selective_combine(branch_outputs, weights)
    if mode == "elementwise-max":
        acc = branch_outputs[0]
        for f in branch_outputs[1:]:
            acc = maximum(acc, f)
        return acc
    if mode == "elementwise-average":
        return fuse_sum(branch_outputs) / float(len(branch_outputs))
    raise ValueError(f"unknown aggregation mode {mode!r}; expected one of {AGGREGATION_MODES}")
