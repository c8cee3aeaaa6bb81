"""Hierarchical MRI preprocessing: wavelet fusion, ROI crop, gamma, normalise, median."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volcore import Stage, Volume, minmax_normalize
from .wavelet import WaveletCoeffs2D, dwt2_bior13, idwt2_bior13, wavedec2, waverec2

__all__ = [
    "PreprocessConfig",
    "WaveletCoeffs2D",
    "dwt2_bior13",
    "idwt2_bior13",
    "mhf_fuse",
    "afrc_clip",
    "lgce_gamma",
    "dcs_median",
    "sfn_normalize",
    "margin_crop",
    "preprocess_pipeline",
    "enhance",
    "crop_labels",
]


@dataclass(frozen=True)
class PreprocessConfig:
    wavelet: str = "bior1.3"
    level: int = 1
    gamma: float = 0.8
    gain: float = 1.0
    kernel: int = 3
    s_roi: int = 0
    s_d: int = 0
    margin: int = 0

    def __post_init__(self):
        if self.wavelet != "bior1.3":
            raise ValueError(f"only bior1.3 is supported, got {self.wavelet!r}")
        if self.level < 1:
            raise ValueError("level must be >= 1")
        if self.gamma <= 0 or self.gain <= 0:
            raise ValueError("gamma and gain must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"median kernel must be odd and >= 1, got {self.kernel}")
        if min(self.s_roi, self.s_d, self.margin) < 0:
            raise ValueError("crop parameters must be non-negative")

    @classmethod
    def paper(cls):
        return cls(s_roi=56, s_d=13, margin=0)

    def output_dims(self, dims):
        nx, ny, nz = dims
        r = self.margin
        return (nx - 2 * self.s_roi - 2 * r, ny - 2 * self.s_roi - 2 * r, nz - 2 * self.s_d - 2 * r)


def mhf_fuse(modalities, level=1) -> Volume:
    """Fuse co-registered volumes by averaging their wavelet coefficients.

    Every axial slice of every modality is decomposed, the approximation
    and detail bands are averaged across modalities with equal weights,
    and the fused slice is reconstructed.
    """
    modalities = list(modalities)
    if len(modalities) < 2:
        raise ValueError("fusion needs at least two modalities")
    dims = {m.dims for m in modalities}
    if len(dims) != 1:
        raise ValueError(f"modalities disagree on dims: {sorted(dims)}")
    n = len(modalities)
    # the (nz, ny, nx) layout makes every axial slice a trailing 2D array
    decs = [wavedec2(m.data, level) for m in modalities]
    approx = sum(d[0] for d in decs) / n
    details = [
        tuple(sum(d[1][lev][b] for d in decs) / n for b in range(3))
        for lev in range(level)
    ]
    fused = waverec2(approx, details, decs[0][2])
    return Volume(fused, Stage.FUSED)


def afrc_clip(v: Volume, s_roi: int, s_d: int) -> Volume:
    """Crop ``s_roi`` voxels from both in-plane borders and ``s_d`` axially."""
    nx, ny, nz = v.dims
    if s_roi < 0 or s_d < 0:
        raise ValueError("crop sizes must be non-negative")
    if 2 * s_roi >= nx or 2 * s_roi >= ny or 2 * s_d >= nz:
        raise ValueError(f"crop (s_roi={s_roi}, s_d={s_d}) exceeds dims {v.dims}")
    return v.with_data(v.data[s_d:nz - s_d, s_roi:ny - s_roi, s_roi:nx - s_roi])


def margin_crop(v: Volume, r: int) -> Volume:
    if r == 0:
        return v
    nx, ny, nz = v.dims
    if 2 * r >= min(nx, ny, nz):
        raise ValueError(f"margin {r} exceeds dims {v.dims}")
    return v.with_data(v.data[r:nz - r, r:ny - r, r:nx - r])


def lgce_gamma(v: Volume, gamma: float, gain: float = 1.0) -> Volume:
    """Power-law contrast map ``gain * v ** gamma`` on non-negative data."""
    if v.data.min() < 0:
        raise ValueError("gamma correction needs non-negative intensities")
    return v.with_data(gain * np.power(v.data, gamma))


def dcs_median(v: Volume, k: int = 3) -> Volume:
    """k x k x k median filter with replicate (edge) padding."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    if k > min(v.dims):
        raise ValueError(f"kernel {k} larger than volume dims {v.dims}")
    if k == 1:
        return v
    h = k // 2
    padded = np.pad(v.data, h, mode="edge")
    out = np.empty_like(v.data)
    # one axial plane at a time keeps the k^3 window copy small
    for z in range(v.data.shape[0]):
        win = sliding_window_view(padded[z:z + k], (k, k, k))[0]
        out[z] = np.median(win.reshape(win.shape[0], win.shape[1], -1), axis=-1)
    return v.with_data(out)


def sfn_normalize(v: Volume) -> Volume:
    return minmax_normalize(v)


def enhance(v: Volume, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    """Everything after fusion: crop, gamma, normalise, median, trim, normalise.

    Gamma runs on data rescaled to [0, 1] first, so the gain acts on
    normalised intensities rather than an 8-bit range.
    """
    v = afrc_clip(v, cfg.s_roi, cfg.s_d)
    v = lgce_gamma(minmax_normalize(v), cfg.gamma, cfg.gain)
    v = sfn_normalize(v)
    v = dcs_median(v, cfg.kernel)
    v = margin_crop(v, cfg.margin)
    return minmax_normalize(v, Stage.PREPROCESSED)


def preprocess_pipeline(modalities, cfg: PreprocessConfig = PreprocessConfig()) -> Volume:
    """Fuse the modalities, then :func:`enhance` the fused volume."""
    return enhance(mhf_fuse(modalities, cfg.level), cfg)


def crop_labels(labels, cfg: PreprocessConfig):
    """Apply the same ROI crop and margin trim to a (z, y, x) label array."""
    a, r = cfg.s_roi + cfg.margin, cfg.s_d + cfg.margin
    nz, ny, nx = labels.shape
    return labels[r:nz - r, a:ny - a, a:nx - a]
