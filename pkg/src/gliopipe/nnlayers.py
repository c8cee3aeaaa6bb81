"""Composite blocks: squeeze-and-excitation, SE-residual units, attention gates, GAT."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor

LEAKY_SLOPE = 0.2


class SEBlock(Module):
    """Channel gate: global average pool -> dense -> ReLU -> dense -> sigmoid."""

    def __init__(self, channels, ratio=4, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = max(1, channels // ratio)
        self.channels = channels
        self.w1, self.b1 = self.add_dense("fc1", channels, hidden, rng)
        self.w2, self.b2 = self.add_dense("fc2", hidden, channels, rng)


def se_gate(x: Tensor, blk: SEBlock) -> Tensor:
    n, c = x.shape[:2]
    if c != blk.channels:
        raise ValueError(f"SE block expects {blk.channels} channels, got {c}")
    s = ad.reshape(ad.global_avg_pool(x), (n, c))
    s = ad.relu(ad.dense(s, blk.w1, blk.b1))
    s = ad.sigmoid(ad.dense(s, blk.w2, blk.b2))
    return ad.reshape(s, (n, c, 1, 1, 1))


class ResidualBranch(Module):
    """Two shape-preserving 3x3x3 convolutions with a ReLU between them."""

    def __init__(self, channels, rng, k=3):
        super().__init__()
        self.k = k
        self.w1, self.b1 = self.add_conv("conv1", channels, channels, k, rng)
        self.w2, self.b2 = self.add_conv("conv2", channels, channels, k, rng)

    def __call__(self, x):
        p = self.k // 2
        h = ad.relu(ad.conv3d(x, self.w1, self.b1, padding=p))
        return ad.conv3d(h, self.w2, self.b2, padding=p)


class SEResidual(Module):
    def __init__(self, channels, ratio=4, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.channels = channels
        self.branch = self.add_child("res", ResidualBranch(channels, rng))
        self.se = self.add_child("se", SEBlock(channels, ratio, rng))


def se_residual_seg(x: Tensor, blk: SEResidual) -> Tensor:
    """(F(x) + x) * gate(x): the gate, computed from the input, scales the whole sum."""
    fx = blk.branch(x)
    if fx.shape != x.shape:
        raise ValueError(f"residual branch changed shape {x.shape} -> {fx.shape}")
    return ad.mul(ad.add(fx, x), se_gate(x, blk.se))


def se_residual_cls(x: Tensor, blk: SEResidual) -> Tensor:
    """x + gate(F(x)) * F(x): only the residual branch is recalibrated."""
    fx = blk.branch(x)
    if fx.shape != x.shape:
        raise ValueError(f"residual branch changed shape {x.shape} -> {fx.shape}")
    return ad.add(x, ad.mul(fx, se_gate(fx, blk.se)))


class SpatialAttention(Module):
    """Single-channel sigmoid map from skip and deep features (1x1x1 convs).

    When the deep features have a different width a 1x1x1 projection
    brings them to the skip width before the additive fusion.
    """

    def __init__(self, skip_channels, deep_channels, rng):
        super().__init__()
        self.ws, self.bs = self.add_conv("f_s", 1, skip_channels, 1, rng)
        self.wp, self.bp = self.add_conv("f_p", 1, deep_channels, 1, rng)
        self.proj = None
        if skip_channels != deep_channels:
            self.proj = self.add_conv("proj", skip_channels, deep_channels, 1, rng)

    def attention_map(self, x_skip, x_deep):
        return ad.sigmoid(ad.add(ad.conv3d(x_skip, self.ws, self.bs), ad.conv3d(x_deep, self.wp, self.bp)))


def _align(x_skip, x_deep):
    if x_skip.shape[0] != x_deep.shape[0] or x_skip.shape[2:] != x_deep.shape[2:]:
        raise ValueError(f"skip {x_skip.shape} and deep {x_deep.shape} are not spatially aligned")


def spatial_attention_fuse(x_skip: Tensor, x_deep: Tensor, att: SpatialAttention) -> Tensor:
    """A * x_skip + x_deep with A = sigmoid(f_s(x_skip) + f_p(x_deep))."""
    _align(x_skip, x_deep)
    a = att.attention_map(x_skip, x_deep)
    deep = x_deep if att.proj is None else ad.conv3d(x_deep, *att.proj)
    return ad.add(ad.mul(a, x_skip), deep)


# ---------------------------------------------------------------------------
# graph attention
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridGraph:
    """Neighbour lists (self-loop included) stored as a padded index table.

    ``index[i, :degree[i]]`` are the neighbours of node ``i`` in ascending
    order; the remaining slots repeat ``i`` and are masked out.
    """

    index: np.ndarray
    degree: np.ndarray

    @classmethod
    def from_neighbours(cls, neighbours):
        n = len(neighbours)
        width = max(len(nb) for nb in neighbours)
        index = np.repeat(np.arange(n)[:, None], width, axis=1)
        degree = np.zeros(n, dtype=np.int64)
        for i, nb in enumerate(neighbours):
            nb = sorted(set(int(j) for j in nb))
            if not nb:
                raise ValueError(f"node {i} has no neighbours")
            if min(nb) < 0 or max(nb) >= n:
                raise ValueError(f"node {i} has out-of-range neighbours")
            index[i, :len(nb)] = nb
            degree[i] = len(nb)
        return cls(index, degree)

    @property
    def n_nodes(self):
        return self.index.shape[0]

    @property
    def mask(self):
        return np.arange(self.index.shape[1])[None, :] < self.degree[:, None]

    def neighbours(self, i):
        return [int(j) for j in self.index[i, :self.degree[i]]]

    def is_symmetric(self):
        edges = {(i, j) for i in range(self.n_nodes) for j in self.neighbours(i)}
        return all((j, i) in edges for i, j in edges)


def build_grid_graph(dims) -> GridGraph:
    """6-connected voxel grid with self-loops; node id = x + w*(y + h*z)."""
    d, h, w = (int(v) for v in dims)
    if min(d, h, w) < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    ids = np.arange(d * h * w).reshape(d, h, w)
    neighbours = [[i] for i in range(d * h * w)]
    for axis in range(3):
        lo = np.take(ids, np.arange(ids.shape[axis] - 1), axis=axis).ravel()
        hi = np.take(ids, np.arange(1, ids.shape[axis]), axis=axis).ravel()
        for a, b in zip(lo, hi):
            neighbours[a].append(int(b))
            neighbours[b].append(int(a))
    return GridGraph.from_neighbours(neighbours)


class GraphAttention(Module):
    """Single-head graph attention: projection W [Fin, Fout] and score vector a [2 Fout]."""

    def __init__(self, f_in, f_out, rng):
        super().__init__()
        self.W = self.add_param("W", ad.kaiming_uniform((f_in, f_out), f_in, rng))
        self.a = self.add_param("a", ad.kaiming_uniform((2 * f_out,), 2 * f_out, rng))


def attention_coefficients(h, g: GridGraph, W, a, slope=LEAKY_SLOPE):
    """Return (alpha, Wh): alpha [..., n, width] softmax-normalised over neighbours."""
    h, W, a = ad.as_tensor(h), ad.as_tensor(W), ad.as_tensor(a)
    if h.shape[-1] != W.shape[0]:
        raise ValueError(f"node features {h.shape[-1]} != W rows {W.shape[0]}")
    if h.shape[-2] != g.n_nodes:
        raise ValueError(f"{h.shape[-2]} node rows for a graph of {g.n_nodes} nodes")
    f_out = W.shape[1]
    if a.shape != (2 * f_out,):
        raise ValueError(f"score vector must have shape ({2 * f_out},), got {a.shape}")
    wh = ad.matmul(h, W)
    a2 = ad.reshape(a, (2, f_out, 1))
    src = ad.matmul(wh, a2[0])                        # [..., n, 1]
    dst = ad.matmul(wh, a2[1])[..., 0]                # [..., n]
    node_axis = wh.ndim - 2
    e = ad.add(src, ad.take(dst, g.index, axis=node_axis))  # [..., n, width]
    e = ad.leaky_relu(e, slope)
    # padded slots get a large negative score so they receive zero weight
    e = ad.add(e, np.where(g.mask, 0.0, -1e300))
    return ad.softmax(e, axis=-1), wh


def graph_attention(h, g: GridGraph, W, a, slope=LEAKY_SLOPE):
    """h' = sum over neighbours of alpha_ij W h_j. ``h`` is [n, Fin] or [N, n, Fin]."""
    alpha, wh = attention_coefficients(h, g, W, a, slope)
    node_axis = wh.ndim - 2
    nb = ad.take(wh, g.index, axis=node_axis)        # [..., n, width, Fout]
    return ad.tsum(ad.mul(nb, alpha[..., None]), axis=-2)
