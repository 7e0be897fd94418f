"""The four encoding strategies applied to one feature map.

A mixing block runs the same normalized feature map through four parallel
encoders: a local convolution, full self-attention, a per-position channel
MLP, and a four-direction selective state-space scan.  All four preserve
the map's shape, so they can be fused elementwise afterwards.
"""

import numpy as np

from mixssm import Tensor
from mixssm.encoders import (
    AttentionBranch,
    ChannelMlpBranch,
    ConvBranch,
    SsmBranch,
    cross_merge,
    cross_scan,
)

rng = np.random.default_rng(42)
H, W, C = 6, 5, 16
v = Tensor(rng.standard_normal((H, W, C)).astype(np.float32))

branches = {
    "conv (local features)": ConvBranch(C, rng=rng),
    "attention (global mixing)": AttentionBranch(C, heads=2, rng=rng),
    "channel MLP (per-position)": ChannelMlpBranch(C, rng=rng),
    "selective SSM (long range)": SsmBranch(C, state_dim=8, rng=rng),
}
for name, branch in branches.items():
    out = branch(v)
    print(f"{name:30s} {v.shape} -> {out.shape}")

# The SSM branch sees the 2-d grid as four 1-d traversals: row-major, its
# reverse, column-major, its reverse.  Re-ordering them back and summing
# reproduces the map exactly four times over.
tiny = Tensor(np.arange(6.0, dtype=np.float32).reshape(2, 3, 1))
seqs = cross_scan(tiny)
print("row-major order:   ", seqs[0].data[:, 0].tolist())
print("reverse row-major: ", seqs[1].data[:, 0].tolist())
print("column-major order:", seqs[2].data[:, 0].tolist())
merged = cross_merge(seqs, 2, 3)
print("merge(scan(V)) == 4V:", np.array_equal(merged.data, 4 * tiny.data))

# Attention rows are probability distributions over the token grid.
attn = branches["attention (global mixing)"].attention(v)
print("attention matrix shape (heads, T, T):", attn.shape)
print("every row sums to one:", np.allclose(attn.data.sum(-1), 1.0, atol=1e-6))
