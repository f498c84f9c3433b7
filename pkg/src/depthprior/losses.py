"""Masked reconstruction, SSIM and photoconsistency losses.

All functions take torch tensors shaped (H, W) or (H, W, C) with an (H, W)
boolean mask, and are differentiable through autograd. Mask-false pixels
never influence a loss value: they are excluded with ``torch.where`` rather
than multiplied away, so even their bit patterns are irrelevant.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .geometry import ViewCalibration, warp_image


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 0.98
    gamma2: float = 0.01
    lambda_z: float = 0.8
    lambda_i: float = 0.5
    lambda_w: float = 0.5

    def __post_init__(self):
        for name in ("gamma1", "gamma2", "lambda_z", "lambda_i", "lambda_w"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if self.gamma1 + self.gamma2 > 1.0 + 1e-12:
            raise ValueError("gamma1 + gamma2 must not exceed 1")

    @property
    def warp_weight(self) -> float:
        return 1.0 - self.gamma1 - self.gamma2


LOSS_PRESETS = {
    "tnt": LossWeights(gamma1=0.96, gamma2=0.02),
    "default": LossWeights(gamma1=0.98, gamma2=0.01),
    "depth_only": LossWeights(gamma1=1.0, gamma2=0.0),
}


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0
    sigma: float = 1.5

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 3, got {self.window}")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ValueError("k1 and k2 must be positive")

    @property
    def c1(self) -> float:
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossBreakdown:
    disp: float
    rgb: float
    warp: float
    total: float


def _check_pair(a: torch.Tensor, b: torch.Tensor, mask) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if mask is None:
        return torch.ones(a.shape[:2], dtype=torch.bool, device=a.device)
    mask = torch.as_tensor(mask, dtype=torch.bool, device=a.device)
    if mask.shape != a.shape[:2]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match raster {tuple(a.shape[:2])}")
    return mask


def masked_l1(a: torch.Tensor, b: torch.Tensor, mask=None) -> torch.Tensor:
    """Mean absolute difference over mask-true pixels (and all channels); 0 for an empty mask."""
    mask = _check_pair(a, b, mask)
    m = mask if a.ndim == 2 else mask.unsqueeze(-1).expand_as(a)
    diff = torch.where(m, (a - b).abs(), torch.zeros((), dtype=a.dtype))
    count = int(m.sum())
    if count == 0:
        return diff.sum() * 0.0
    return diff.sum() / count


@functools.lru_cache(maxsize=16)
def _gaussian_taps(window: int, sigma: float) -> torch.Tensor:
    x = torch.arange(window, dtype=torch.float64) - (window - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, taps: torch.Tensor) -> torch.Tensor:
    # x: (C, H, W); zero padding, separable depthwise filter
    c = x.shape[0]
    k = taps.shape[0]
    pad = k // 2
    kv = taps.to(x.dtype).view(1, 1, k, 1).expand(c, 1, k, 1)
    kh = taps.to(x.dtype).view(1, 1, 1, k).expand(c, 1, 1, k)
    x = F.conv2d(F.pad(x.unsqueeze(0), (0, 0, pad, pad)), kv, groups=c)
    x = F.conv2d(F.pad(x, (pad, pad, 0, 0)), kh, groups=c)
    return x.squeeze(0)


def ssim_map(a: torch.Tensor, b: torch.Tensor, params: SsimParams, mask=None) -> torch.Tensor:
    """Per-pixel, per-channel SSIM with mask-renormalized Gaussian windows; shape (C, H, W)."""
    mask = _check_pair(a, b, mask)
    if a.ndim == 2:
        a, b = a.unsqueeze(-1), b.unsqueeze(-1)
    c = a.shape[-1]
    zero = torch.zeros((), dtype=a.dtype)
    m = mask.unsqueeze(-1)
    x = torch.where(m, a, zero).permute(2, 0, 1)
    y = torch.where(m, b, zero).permute(2, 0, 1)
    weight = mask.to(a.dtype).unsqueeze(0)
    taps = _gaussian_taps(params.window, params.sigma)
    stats = _blur(torch.cat([weight, x, y, x * x, y * y, x * y]), taps)
    norm = stats[:1]
    norm = torch.where(norm > 0, norm, torch.ones_like(norm))
    mu_x, mu_y = stats[1 : 1 + c] / norm, stats[1 + c : 1 + 2 * c] / norm
    e_xx, e_yy, e_xy = (stats[1 + k * c : 1 + (k + 1) * c] / norm for k in (2, 3, 4))
    var_x = e_xx - mu_x * mu_x
    var_y = e_yy - mu_y * mu_y
    cov = e_xy - mu_x * mu_y
    c1, c2 = params.c1, params.c2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return num / den


def ssim_index(a: torch.Tensor, b: torch.Tensor, params: SsimParams = SsimParams(), mask=None) -> torch.Tensor:
    """Mean SSIM over windows centred on mask-true pixels (1 for an empty mask)."""
    mask = _check_pair(a, b, mask)
    smap = ssim_map(a, b, params, mask)
    count = int(mask.sum()) * smap.shape[0]
    if count == 0:
        return smap.sum() * 0.0 + 1.0
    selected = torch.where(mask.unsqueeze(0), smap, torch.zeros((), dtype=smap.dtype))
    return selected.sum() / count


def ssim_loss(a, b, params: SsimParams = SsimParams(), mask=None) -> torch.Tensor:
    return 1.0 - ssim_index(a, b, params, mask)


def disparity_loss(z_in, z_out, mask, w: LossWeights, s: SsimParams = SsimParams()) -> torch.Tensor:
    return w.lambda_z * masked_l1(z_in, z_out, mask) + (1 - w.lambda_z) * ssim_loss(z_in, z_out, s, mask)


def rgb_loss(i_in, i_out, w: LossWeights, s: SsimParams = SsimParams()) -> torch.Tensor:
    return w.lambda_i * masked_l1(i_in, i_out) + (1 - w.lambda_i) * ssim_loss(i_in, i_out, s)


def warp_loss(
    i_ref: torch.Tensor,
    d_out: torch.Tensor,
    neighbors: Sequence[tuple[torch.Tensor, ViewCalibration]],
    ref: ViewCalibration,
    w: LossWeights,
    s: SsimParams = SsimParams(),
    valid=None,
) -> torch.Tensor:
    """Photoconsistency between the reference image and each neighbor warped through ``d_out``.

    Each neighbor term is restricted to its warp-validity raster; the terms
    are averaged over the neighbors.
    """
    if not neighbors:
        raise ValueError("warp_loss needs at least one neighbor")
    terms = []
    for image, calib in neighbors:
        result = warp_image(d_out, image, ref, calib, valid=valid)
        warped = result.warped.to(i_ref.dtype)
        terms.append(
            w.lambda_w * ssim_loss(i_ref, warped, s, result.validity)
            + (1 - w.lambda_w) * masked_l1(i_ref, warped, result.validity)
        )
    return torch.stack(terms).mean()


def combine_losses(disp, rgb, warp, w: LossWeights):
    """The weighted sum used for optimization; works on floats and tensors alike."""
    return w.gamma1 * disp + w.gamma2 * rgb + w.warp_weight * warp


def total_loss(disp: float, rgb: float, warp: float, w: LossWeights) -> LossBreakdown:
    disp, rgb, warp = float(disp), float(rgb), float(warp)
    return LossBreakdown(disp, rgb, warp, combine_losses(disp, rgb, warp, w))
