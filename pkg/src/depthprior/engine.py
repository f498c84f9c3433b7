"""Per-view test-time optimization of the generator against one RGB-D target."""

from __future__ import annotations

import csv
import logging
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .generator import Generator, GeneratorConfig, forward, init_generator, make_noise
from .geometry import ViewCalibration
from .imaging import DepthMap, DisparityMap, PreprocessParams, RgbdTarget, RgbImage, normalize_disparity
from .losses import (
    LOSS_PRESETS,
    LossBreakdown,
    LossWeights,
    SsimParams,
    combine_losses,
    disparity_loss,
    rgb_loss,
    total_loss,
    warp_loss,
)

logger = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, epoch: int, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss at epoch {epoch}: {breakdown}")
        self.epoch = epoch
        self.breakdown = breakdown


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 5e-5
    milestones: tuple[int, ...] = (12000, 15000)
    factor: float = 0.01
    total_epochs: int = 16000

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if list(self.milestones) != sorted(self.milestones):
            raise ValueError("milestones must be ascending")
        if any(m >= self.total_epochs for m in self.milestones):
            raise ValueError("milestones must precede total_epochs")
        if not 0 < self.factor <= 1:
            raise ValueError(f"factor must lie in (0, 1], got {self.factor}")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be positive")

    def with_epochs(self, total_epochs: int) -> Schedule:
        """Same schedule truncated (or extended) to ``total_epochs``; unreachable milestones drop."""
        return Schedule(
            self.base_lr, tuple(m for m in self.milestones if m < total_epochs), self.factor, total_epochs
        )


SCHEDULE_PRESETS = {
    "multiview": Schedule(),
    "single_pair": Schedule(milestones=(), total_epochs=10000),
    "depth_only": Schedule(milestones=(), total_epochs=6000),
    # small synthetic scenes: a short run at a higher constant rate
    "desk": Schedule(base_lr=1e-4, milestones=(), total_epochs=2000),
}

# The depth-only ablation: no RGB or warp terms, shorter run.
DEPTH_ONLY_PRESET = (LOSS_PRESETS["depth_only"], SCHEDULE_PRESETS["depth_only"])


def lr_at_epoch(schedule: Schedule, epoch: int) -> float:
    return schedule.base_lr * schedule.factor ** bisect_right(schedule.milestones, epoch)


@dataclass
class AdamState:
    exp_avg: list[torch.Tensor]
    exp_avg_sq: list[torch.Tensor]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor], **kwargs) -> AdamState:
        return cls(
            [torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kwargs
        )


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState, lr: float, names=None):
    """Bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.exp_avg):
        raise ValueError("params, grads and optimizer state must have equal length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {i}")
    # one fused reduction in the common case; per-tensor scan only to name the culprit
    if not torch.isfinite(torch.stack(torch._foreach_norm(list(grads)))).all():
        for i, g in enumerate(grads):
            if not torch.isfinite(g).all():
                label = names[i] if names is not None else f"#{i}"
                raise NonFiniteGradientError(f"non-finite gradient for parameter {label}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    step_size = lr / (1 - b1**state.step)
    root_correction = math.sqrt(1 - b2**state.step)
    params, grads = list(params), list(grads)
    torch._foreach_lerp_(state.exp_avg, grads, 1 - b1)
    torch._foreach_mul_(state.exp_avg_sq, b2)
    torch._foreach_addcmul_(state.exp_avg_sq, grads, grads, value=1 - b2)
    denom = torch._foreach_sqrt(state.exp_avg_sq)
    torch._foreach_div_(denom, root_correction)
    torch._foreach_add_(denom, state.eps)
    torch._foreach_addcdiv_(params, state.exp_avg, denom, value=-step_size)
    return params, state


@dataclass
class OptimizeResult:
    disparity: DisparityMap  # metric disparity, dense
    depth: DepthMap
    rgb: RgbImage
    trace: list[LossBreakdown]
    learning_rates: list[float]
    epochs: int
    params: Generator
    warp_calls: int = 0
    normalized_disparity: np.ndarray = field(default=None, repr=False)


def disparity_to_metric_depth(z_norm: torch.Tensor, preprocess: PreprocessParams) -> torch.Tensor:
    """Depth in scene units from normalized network disparity (inverse of clip, invert, normalize)."""
    return preprocess.d_min / z_norm - preprocess.d_offset


def optimize_view(
    target: RgbdTarget,
    neighbors: Sequence[tuple[RgbImage, ViewCalibration]],
    ref_calib: ViewCalibration | None,
    preprocess: PreprocessParams,
    weights: LossWeights = LOSS_PRESETS["tnt"],
    ssim: SsimParams = SsimParams(),
    config: GeneratorConfig = GeneratorConfig(),
    schedule: Schedule = SCHEDULE_PRESETS["multiview"],
    *,
    dtype=torch.float32,
    callback: Callable | None = None,
    log_every: int = 0,
) -> OptimizeResult:
    """Fit a fresh generator to ``target`` and return its final prediction.

    ``callback(epoch, rgb_out, z_out, breakdown)`` is invoked every epoch with
    the outputs that produced the traced losses, before the parameter update.
    """
    use_warp = weights.warp_weight > 0
    if use_warp and (not neighbors or ref_calib is None):
        raise ValueError("a non-zero warp weight needs neighbor views and the reference calibration")
    h, w = target.disparity.data.shape
    z_in = torch.from_numpy(normalize_disparity(target.disparity, preprocess)).to(dtype)
    mask = torch.from_numpy(target.mask)
    i_in = torch.from_numpy(target.image.data).to(dtype)
    nbrs = [(torch.from_numpy(img.data).to(dtype), calib) for img, calib in neighbors] if use_warp else []

    noise = make_noise(h, w, config.input_channels, seed=config.seed, dtype=dtype)
    net = init_generator(config, dtype)
    names, params = zip(*net.named_parameters())
    state = AdamState.zeros_like(params)

    trace: list[LossBreakdown] = []
    lrs: list[float] = []
    warp_calls = 0
    for epoch in range(schedule.total_epochs):
        lr = lr_at_epoch(schedule, epoch)
        rgb_out, z_out = forward(net, config, noise, check=False)
        l_disp = disparity_loss(z_in, z_out, mask, weights, ssim)
        if weights.gamma2 > 0:
            l_rgb = rgb_loss(i_in, rgb_out, weights, ssim)
        else:
            with torch.no_grad():
                l_rgb = rgb_loss(i_in, rgb_out, weights, ssim)
        if use_warp:
            depth = disparity_to_metric_depth(z_out, preprocess)
            l_warp = warp_loss(i_in, depth, nbrs, ref_calib, weights, ssim)
            warp_calls += 1
            objective = combine_losses(l_disp, l_rgb, l_warp, weights)
        else:
            l_warp = torch.zeros((), dtype=dtype)
            objective = weights.gamma1 * l_disp + weights.gamma2 * l_rgb.detach()
        breakdown = total_loss(l_disp.item(), l_rgb.item(), l_warp.item(), weights)
        if not (math.isfinite(breakdown.total) and torch.isfinite(objective)):
            raise NonFiniteLossError(epoch, breakdown)
        trace.append(breakdown)
        lrs.append(lr)
        if callback is not None:
            callback(epoch, rgb_out.detach(), z_out.detach(), breakdown)
        if log_every and epoch % log_every == 0:
            logger.info("epoch %d lr %.3g loss %.6f (disp %.6f rgb %.6f warp %.6f)",
                        epoch, lr, breakdown.total, breakdown.disp, breakdown.rgb, breakdown.warp)
        grads = torch.autograd.grad(objective, params)
        adam_step(params, grads, state, lr, names=names)

    z_final = z_out.detach().double().numpy()
    depth_final = disparity_to_metric_depth(z_out.detach().double(), preprocess).numpy()
    depth_valid = np.isfinite(depth_final) & (depth_final > 0)
    return OptimizeResult(
        disparity=DisparityMap(z_final / preprocess.d_min, np.ones_like(depth_valid)),
        depth=DepthMap(np.where(depth_valid, depth_final, 0.0), depth_valid),
        rgb=RgbImage(rgb_out.detach().double().numpy()),
        trace=trace,
        learning_rates=lrs,
        epochs=schedule.total_epochs,
        params=net,
        warp_calls=warp_calls,
        normalized_disparity=z_final,
    )


def combine_hole_fill(original: DepthMap, refined: DepthMap) -> DepthMap:
    """Keep every valid original pixel; take holes from the refined map."""
    if original.data.shape != refined.data.shape:
        raise ValueError("depth maps differ in size")
    data = np.where(original.valid, original.data, refined.data)
    return DepthMap(data, original.valid | refined.valid)


def write_trace_csv(result: OptimizeResult, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "lr", "disp", "rgb", "warp", "total"])
        for epoch, (lr, b) in enumerate(zip(result.learning_rates, result.trace)):
            writer.writerow([epoch, repr(lr), repr(b.disp), repr(b.rgb), repr(b.warp), repr(b.total)])


def read_trace_csv(path) -> list[tuple[int, float, LossBreakdown]]:
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows.append((int(row["epoch"]), float(row["lr"]),
                         LossBreakdown(float(row["disp"]), float(row["rgb"]), float(row["warp"]), float(row["total"]))))
    return rows
