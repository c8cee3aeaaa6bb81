"""
Attention blocks on a hand-written autodiff
===========================================

Every layer is built from a small reverse-mode engine over float64 numpy
arrays. Here we check one SE-residual block against central differences
and look at graph-attention weights on a 2x2x2 voxel grid.
"""
import numpy as np

from gliopipe import autodiff as ad
from gliopipe.nnlayers import GraphAttention, SEResidual, attention_coefficients, build_grid_graph, se_residual_seg

rng = np.random.default_rng(0)

# %%
# Analytic vs numeric gradient of sum(block(x) * r) w.r.t. the input.
blk = SEResidual(4, 2, rng)
x = ad.parameter(rng.standard_normal((1, 4, 3, 3, 3)))
r = rng.standard_normal(x.shape)
loss = ad.tsum(se_residual_seg(x, blk) * r)
ad.backward(loss)

eps, i = 1e-5, (0, 1, 1, 2, 0)
with ad.no_grad():
    x.values[i] += eps
    hi = ad.tsum(se_residual_seg(x, blk) * r).item()
    x.values[i] -= 2 * eps
    lo = ad.tsum(se_residual_seg(x, blk) * r).item()
    x.values[i] += eps
print("analytic", x.grad[i], "numeric", (hi - lo) / (2 * eps))

# %%
# Each node attends over itself and its 6-connected neighbours; the
# weights in every row sum to one.
g = build_grid_graph((2, 2, 2))
layer = GraphAttention(3, 4, rng)
alpha, _ = attention_coefficients(rng.standard_normal((g.n_nodes, 3)), g, layer.W, layer.a)
print("neighbours of node 0:", g.neighbours(0))
print("row sums:", alpha.values.sum(axis=-1).round(12))
