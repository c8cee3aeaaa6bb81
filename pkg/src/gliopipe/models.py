"""The three networks: SGA-LinkNet (localisation), SE-residual LinkNet
(segmentation) and the SE-residual feature extractor used for grading."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Module, Tensor
from .config import ConfigError, ModelProfile
from .nnlayers import (
    GraphAttention,
    SEResidual,
    SpatialAttention,
    build_grid_graph,
    graph_attention,
    se_residual_cls,
    se_residual_seg,
    spatial_attention_fuse,
)


@dataclass
class SegOutput:
    logits: Tensor
    probabilities: Tensor


def norm_relu(x, norm="instance"):
    return ad.relu(ad.instance_norm(x) if norm == "instance" else x)


class ConvBlock(Module):
    """``n`` 3x3x3 same-padding convolutions, each followed by (optional
    instance norm and) ReLU."""

    def __init__(self, c_in, c_out, rng, n=2, norm="instance"):
        super().__init__()
        self.norm = norm
        self.convs = []
        for i in range(n):
            self.convs.append(self.add_conv(f"conv{i}", c_out, c_in if i == 0 else c_out, 3, rng))

    def __call__(self, x):
        for w, b in self.convs:
            x = norm_relu(ad.conv3d(x, w, b, padding=1), self.norm)
        return x


def _check_input(x, p: ModelProfile, divisor):
    if x.ndim != 5:
        raise ValueError(f"expected [N, C, D, H, W] input, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ValueError(f"expected {p.in_channels} input channels, got {x.shape[1]}")
    bad = [s for s in x.shape[2:] if s % divisor or s < divisor]
    if bad:
        raise ValueError(f"spatial extents {x.shape[2:]} must be positive multiples of {divisor}")


def center_input(x):
    """Fixed map [0, 1] -> [-1, 1]. With zero-initialised biases, ReLU units
    fed only non-negative inputs start out either linear or dead."""
    return ad.as_tensor(x) * 2.0 - 1.0


def class_softmax(logits, mode="class"):
    """Per-voxel softmax over classes, or the literal spatial normalisation."""
    if mode == "class":
        return ad.softmax(logits, axis=1)
    n, k = logits.shape[:2]
    flat = ad.reshape(logits, (n, k, -1))
    return ad.reshape(ad.softmax(flat, axis=2), logits.shape)


class _SegModel(Module):
    profile: ModelProfile

    def forward(self, x):
        raise NotImplementedError

    def __call__(self, x) -> SegOutput:
        logits = self.forward(ad.as_tensor(x))
        return SegOutput(logits, class_softmax(logits, self.profile.softmax_mode))


# ---------------------------------------------------------------------------
# localisation
# ---------------------------------------------------------------------------

class SGALinkNet(_SegModel):
    """VGG-style encoder, attention-fused decoder with transpose-conv
    upsampling and graph-attention refinement."""

    def __init__(self, p: ModelProfile):
        super().__init__()
        self.profile = p
        rng = np.random.default_rng(p.seed)
        self.dropout_rng = np.random.default_rng([p.seed, 1])
        ch = p.channels
        self.encoder = []
        c_prev = p.in_channels
        for l, c in enumerate(ch, 1):
            self.encoder.append(self.add_child(f"enc{l}", ConvBlock(c_prev, c, rng, norm=p.norm)))
            c_prev = c
        c_top = ch[-1]
        self.center_a = self.add_child("center_a", ConvBlock(c_top, c_top, rng, norm=p.norm))
        self.center_w = self.add_conv("center_conv", c_top, c_top, 3, rng)
        self.center_b = self.add_child("center_b", ConvBlock(c_top, c_top, rng, norm=p.norm))

        self.decoder = []
        widths = (ch[0],) + ch           # decoder stage l emits widths[l-1]
        for l in range(p.stages, 0, -1):
            stage = {}
            if p.spatial_attention:
                stage["att"] = self.add_child(f"dec{l}.att", SpatialAttention(ch[l - 1], ch[l - 1], rng))
            c_out = widths[l - 1]
            stage["up"] = (
                self.add_param(f"dec{l}.up.w", ad.kaiming_uniform((ch[l - 1], c_out, 2, 2, 2), ch[l - 1] * 8, rng)),
                self.add_param(f"dec{l}.up.b", np.zeros(c_out)),
            )
            stage["block"] = self.add_child(f"dec{l}.block", ConvBlock(c_out, c_out, rng, norm=p.norm))
            if p.gat and (p.gat_stages == "all" or l == p.stages):
                stage["gat"] = self.add_child(f"dec{l}.gat", GraphAttention(c_out, c_out, rng))
            self.decoder.append((l, stage))
        self.head = self.add_conv("head", p.n_classes, widths[0], 1, rng)
        self._graphs = {}

    def _graph(self, spatial):
        if spatial not in self._graphs:
            self._graphs[spatial] = build_grid_graph(spatial)
        return self._graphs[spatial]

    def _gat(self, x, gat):
        n, c = x.shape[:2]
        spatial = x.shape[2:]
        h = ad.reshape(ad.transpose(x, (0, 2, 3, 4, 1)), (n, -1, c))
        h = graph_attention(h, self._graph(spatial), gat.W, gat.a)
        return ad.transpose(ad.reshape(h, (n,) + spatial + (h.shape[-1],)), (0, 4, 1, 2, 3))

    def forward(self, x):
        p = self.profile
        _check_input(x, p, p.divisor)
        x = center_input(x)
        skips = []
        for block in self.encoder:
            x = block(x)
            x = ad.dropout(x, p.dropout, self.dropout_rng, self.training)
            x = ad.maxpool3d(x, 2)
            skips.append(x)
        xc = self.center_a(x)
        xc = ad.conv3d(ad.relu(xc), *self.center_w, padding=1)
        xc = self.center_b(xc)
        xd = xc
        for l, stage in self.decoder:
            skip = skips[l - 1]
            if "att" in stage:
                xd = spatial_attention_fuse(skip, xc, stage["att"])
            else:
                xd = ad.add(skip, xc)
            xd = ad.conv_transpose3d(xd, stage["up"][0], stride=2, b=stage["up"][1])
            xd = stage["block"](xd)
            if "gat" in stage:
                xd = self._gat(xd, stage["gat"])
            xc = xd
        return ad.conv3d(xd, *self.head)


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

class SEResLinkNet(_SegModel):
    """SE-residual encoder, additive skips into a conv -> upsample -> ReLU decoder."""

    def __init__(self, p: ModelProfile):
        super().__init__()
        self.profile = p
        rng = np.random.default_rng(p.seed)
        self.dropout_rng = np.random.default_rng([p.seed, 1])
        ch = p.channels
        self.stem = self.add_conv("stem", ch[0], p.in_channels, 3, rng)
        self.down = {}
        self.blocks = []
        for l, c in enumerate(ch, 1):
            if l > 1:
                self.down[l] = self.add_conv(f"enc{l}.down", c, ch[l - 2], 3, rng)
            self.blocks.append(self.add_child(f"enc{l}.se_res", SEResidual(c, p.se_ratio, rng)))
        self.center_down = self.add_conv("center.down", ch[-1], ch[-1], 3, rng)
        self.center = self.add_child("center", ConvBlock(ch[-1], ch[-1], rng, norm=p.norm))
        self.decoder = {}
        c_prev = ch[-1]
        for l in range(p.stages, 0, -1):
            self.decoder[l] = self.add_conv(f"dec{l}.conv", ch[l - 1], c_prev, 3, rng)
            c_prev = ch[l - 1]
        self.head = self.add_conv("head", p.n_classes, ch[0], 1, rng)

    def encode(self, x):
        p = self.profile
        _check_input(x, p, p.divisor)
        x = norm_relu(ad.conv3d(center_input(x), *self.stem, padding=1), p.norm)
        enc = []
        for l, blk in enumerate(self.blocks, 1):
            if l > 1:
                x = norm_relu(ad.conv3d(x, *self.down[l], stride=2, padding=1), p.norm)
            x = se_residual_seg(x, blk)
            x = ad.dropout(x, p.dropout, self.dropout_rng, self.training)
            enc.append(x)
        return enc

    def forward(self, x):
        enc = self.encode(x)
        xd = norm_relu(ad.conv3d(enc[-1], *self.center_down, stride=2, padding=1), self.profile.norm)
        xd = self.center(xd)
        for l in range(self.profile.stages, 0, -1):
            xd = norm_relu(ad.conv3d(xd, *self.decoder[l], padding=1), self.profile.norm)
            xd = ad.upsample_nearest(xd, 2)
            xd = ad.add(xd, enc[l - 1])
        return ad.conv3d(xd, *self.head)


# ---------------------------------------------------------------------------
# classification backbone
# ---------------------------------------------------------------------------

class SEResClassifier(Module):
    """Six SE-residual blocks (identity + gated residual) with stride-2
    downsampling between some of them; the flattened output is the feature
    vector. ``aux`` is a linear head used only to train the backbone.

    No instance norm and no input centring here: per-sample standardisation
    erases the absolute amounts (e.g. necrotic volume) grading depends on,
    and the masked-out background should stay an exact zero."""

    def __init__(self, p: ModelProfile, n_features=None):
        super().__init__()
        self.profile = p
        rng = np.random.default_rng([p.seed, 2])
        self.dropout_rng = np.random.default_rng([p.seed, 3])
        cc = p.classifier_channels
        self.stem = self.add_conv("stem", cc[0], p.in_channels, 3, rng)
        self.transitions = {}
        self.blocks = []
        c_prev = cc[0]
        for i, c in enumerate(cc):
            if p.classifier_downsample[i]:
                self.transitions[i] = ("down", self.add_conv(f"block{i}.down", c, c_prev, 3, rng))
            elif c != c_prev:
                self.transitions[i] = ("proj", self.add_conv(f"block{i}.proj", c, c_prev, 1, rng))
            self.blocks.append(self.add_child(f"block{i}", SEResidual(c, p.se_ratio, rng)))
            c_prev = c
        self.n_features = self.feature_length(p.image_shape) if n_features is None else n_features
        self.aux = self.add_dense("aux", self.n_features, 2, rng)

    def feature_shape(self, spatial):
        p = self.profile
        s = np.array(spatial)
        s = (s + 2 - 3) // p.classifier_stem_stride + 1
        for i in range(6):
            if p.classifier_downsample[i]:
                s = (s + 2 - 3) // 2 + 1
        return (p.classifier_channels[-1],) + tuple(int(v) for v in s)

    def feature_length(self, spatial):
        return int(np.prod(self.feature_shape(spatial)))

    def features(self, x):
        x = ad.as_tensor(x)
        p = self.profile
        if x.ndim != 5 or x.shape[1] != p.in_channels:
            raise ValueError(f"expected [N, {p.in_channels}, D, H, W] input, got {x.shape}")
        x = ad.relu(ad.conv3d(x, *self.stem, stride=p.classifier_stem_stride, padding=1))
        for i, blk in enumerate(self.blocks):
            if i in self.transitions:
                kind, (w, b) = self.transitions[i]
                x = ad.relu(ad.conv3d(x, w, b, stride=2 if kind == "down" else 1, padding=1 if kind == "down" else 0))
            x = se_residual_cls(x, blk)
        z = ad.flatten(x)
        if z.shape[1] != self.n_features:
            raise ValueError(f"feature length {z.shape[1]} != configured {self.n_features}")
        return z

    def logits(self, x):
        z = self.features(x)
        z = ad.dropout(z, self.profile.dropout, self.dropout_rng, self.training)
        return ad.dense(z, *self.aux)


def build_sga_linknet(p: ModelProfile) -> SGALinkNet:
    return SGALinkNet(p)


def build_seres_linknet(p: ModelProfile) -> SEResLinkNet:
    return SEResLinkNet(p)


def build_seres_classifier(p: ModelProfile) -> SEResClassifier:
    return SEResClassifier(p)


BUILDERS = {"localize": build_sga_linknet, "segment": build_seres_linknet, "classify": build_seres_classifier}


def build_model(task, p: ModelProfile):
    if task not in BUILDERS:
        raise ConfigError(f"unknown task {task!r}")
    return BUILDERS[task](p)
