"""How the selective module decides which encoder to trust, per channel.

The fused branch sum is pooled to one descriptor per channel; a small MLP
turns that descriptor into one logit per (channel, strategy) pair, and a
softmax over strategies yields convex mixing weights.
"""

import numpy as np

from mixssm import Tensor
from mixssm.fusion import SelectiveFusion, fuse_sum, pool_global, selective_module

rng = np.random.default_rng(7)
C, n = 8, 4
maps = [Tensor(rng.standard_normal((5, 5, C)).astype(np.float32)) for _ in range(n)]

fusion = SelectiveFusion(C, n=n, rng=rng)
pooled = pool_global(fuse_sum(maps), "average")
weights = fusion.selective_weights(pooled)
print("per-channel strategy weights (rows are channels):")
print(np.round(weights.data, 3))
print("rows sum to one:", np.allclose(weights.data.sum(-1), 1.0, atol=1e-6))

# The combined output is a convex combination, so it can never leave the
# per-element envelope of the branch outputs.
out = selective_module(maps, fusion)
stacked = np.stack([m.data for m in maps])
inside = (out.data >= stacked.min(0) - 1e-6).all() and (out.data <= stacked.max(0) + 1e-6).all()
print("output stays inside the branch envelope:", inside)

# The non-adaptive baselines replace the whole module.
for mode in ("elementwise-max", "elementwise-average"):
    alt = selective_module(maps, fusion, mode=mode)
    print(f"{mode:20s} -> {alt.shape}")

# Pooling variants for the descriptor; stochastic pooling needs an explicit
# random stream while training and is an expectation at evaluation time.
for method in ("average", "max", "l2", "stochastic"):
    g = pool_global(fuse_sum(maps), method)
    print(f"pool {method:10s} first channels: {np.round(g.data[:4], 3)}")
