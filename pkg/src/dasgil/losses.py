"""Training objectives. All functions are pure and differentiable in any floating dtype."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .errors import (
    ClassOutOfRange,
    DimensionMismatch,
    EmptyBatch,
    InvalidConfig,
    LayerOutOfRange,
    NonFiniteInput,
    NoValidPixels,
    ShapeMismatch,
)


@dataclass
class LossWeights:
    lambda_T: float = 1.0
    lambda_D: float = 1.0
    lambda_S: float = 1.0
    margins: dict = field(default_factory=dict)
    default_margin: float = 1.0

    def validate(self, triplet_layers=()):
        if min(self.lambda_T, self.lambda_D, self.lambda_S) < 0:
            raise InvalidConfig("loss weights must be nonnegative")
        for l in triplet_layers:
            if self.margin(l) <= 0:
                raise InvalidConfig(f"margin for layer {l} must be positive")
        return self

    def margin(self, layer: int) -> float:
        return float(self.margins.get(layer, self.margins.get(str(layer), self.default_margin)))

    def margin_map(self, layers) -> dict:
        return {l: self.margin(l) for l in layers}


# --------------------------------------------------------------------------- depth

def resize_depth_gt(gt: torch.Tensor, valid: torch.Tensor, size, mode: str = "area"):
    """Downsample (B,1,H,W) ground truth to ``size`` by averaging valid pixels per block.

    Returns (resized gt, resized validity). A target pixel is valid when its block held at
    least one valid source pixel. ``mode="nearest"`` samples the block centre instead.
    """
    H, W = gt.shape[-2:]
    h, w = size
    if H % h or W % w:
        raise ShapeMismatch(f"ground truth {H}x{W} is not an integer multiple of {h}x{w}")
    fh, fw = H // h, W // w
    validf = valid.to(gt.dtype)
    if mode == "nearest":
        g = gt[..., fh // 2::fh, fw // 2::fw]
        v = valid[..., fh // 2::fh, fw // 2::fw]
        return g * v.to(gt.dtype), v
    if fh == 1 and fw == 1:
        return gt * validf, valid
    s = F.avg_pool2d(gt * validf, (fh, fw)) * (fh * fw)
    n = F.avg_pool2d(validf, (fh, fw)) * (fh * fw)
    v = n > 0
    return torch.where(v, s / n.clamp_min(1), torch.zeros_like(s)), v


def depth_loss(predictions: dict, gt: torch.Tensor, valid: torch.Tensor = None, resize_mode: str = "area"):
    """Sum over layers of the mean absolute error over valid (resized) pixels.

    ``predictions`` maps layer index to (B,1,h,w); ``gt`` is (B,1,H,W); ``valid`` defaults to gt > 0.
    """
    if gt.dim() == 3:
        gt = gt.unsqueeze(1)
    if valid is None:
        valid = gt > 0
    elif valid.dim() == 3:
        valid = valid.unsqueeze(1)
    if valid.shape != gt.shape:
        raise ShapeMismatch("validity mask must match ground-truth shape")
    total = gt.new_zeros(())
    for layer in sorted(predictions):
        pred = predictions[layer]
        if pred.dim() == 3:
            pred = pred.unsqueeze(1)
        if pred.shape[:2] != gt.shape[:2]:
            raise ShapeMismatch(f"layer {layer}: prediction {tuple(pred.shape)} vs gt {tuple(gt.shape)}")
        g, v = resize_depth_gt(gt, valid, pred.shape[-2:], resize_mode)
        count = v.sum()
        if count == 0:
            raise NoValidPixels(f"layer {layer} has no valid depth pixels")
        diff = torch.where(v, (pred - g).abs(), torch.zeros_like(pred))
        total = total + diff.sum() / count
    return total


# --------------------------------------------------------------------------- segmentation

def seg_loss(scores: torch.Tensor, gt: torch.Tensor):
    """Mean per-pixel cross entropy of softmax(scores) against class ids."""
    if scores.dim() == 3:
        scores = scores.unsqueeze(0)
    if gt.dim() == 2:
        gt = gt.unsqueeze(0)
    if scores.shape[0] != gt.shape[0] or scores.shape[-2:] != gt.shape[-2:]:
        raise ShapeMismatch(f"scores {tuple(scores.shape)} vs gt {tuple(gt.shape)}")
    M = scores.shape[1]
    if gt.numel() and (int(gt.min()) < 0 or int(gt.max()) >= M):
        raise ClassOutOfRange(f"class ids must lie in [0, {M})")
    return F.cross_entropy(scores, gt.long(), reduction="mean")


# --------------------------------------------------------------------------- adversarial (least squares)

def dis_loss(d_virtual: torch.Tensor, d_real: torch.Tensor):
    """Discriminator objective: virtual features labelled 0, real features labelled 1."""
    if d_virtual.numel() == 0 or d_real.numel() == 0:
        raise EmptyBatch("discriminator loss needs nonempty batches")
    return 0.5 * ((d_virtual ** 2).mean() + ((d_real - 1) ** 2).mean())


def gen_loss(d_virtual: torch.Tensor):
    if d_virtual.numel() == 0:
        raise EmptyBatch("generator loss needs a nonempty batch")
    return 0.5 * ((d_virtual - 1) ** 2).mean()


# --------------------------------------------------------------------------- triplets

def triplet_loss_single(a: torch.Tensor, p: torch.Tensor, n: torch.Tensor, margin: float = 1.0):
    """Ratio hinge max(0, 1 - |a-n| / (margin + |a-p|)), averaged over a leading batch dim if present."""
    if a.shape != p.shape or a.shape != n.shape:
        raise DimensionMismatch(f"{tuple(a.shape)}, {tuple(p.shape)}, {tuple(n.shape)}")
    if margin <= 0:
        raise InvalidConfig("margin must be positive")
    d_neg = torch.linalg.vector_norm(a - n, dim=-1)
    d_pos = torch.linalg.vector_norm(a - p, dim=-1)
    return torch.clamp(1.0 - d_neg / (margin + d_pos), min=0.0).mean()


def triplet_loss_multi(anchor, positive, negative, layers, margins=None):
    """Sum over ``layers`` of the single-scale loss on flattened pyramid levels.

    Pyramids may be FeaturePyramid objects or plain sequences of (B, ...) tensors, level 1 first.
    """
    if not layers:
        raise LayerOutOfRange("at least one triplet layer is required")
    margins = margins or {}
    levels = [getattr(x, "levels", x) for x in (anchor, positive, negative)]
    n_levels = len(levels[0])
    total = None
    for l in layers:
        if not 1 <= l <= n_levels:
            raise LayerOutOfRange(f"triplet layer {l} not in 1..{n_levels}")
        qa, qp, qn = (lv[l - 1].flatten(1) for lv in levels)
        term = triplet_loss_single(qa, qp, qn, float(margins.get(l, 1.0)))
        total = term if total is None else total + term
    return total


# --------------------------------------------------------------------------- totals

def _finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return math.isfinite(float(x))


def total_gen_objective(gen, triplet, depth, seg, weights: LossWeights):
    """Generator-side objective: gen + lambda_T*triplet + lambda_D*depth + lambda_S*seg."""
    for name, v in (("gen", gen), ("triplet", triplet), ("depth", depth), ("seg", seg)):
        if not _finite(v):
            raise NonFiniteInput(f"{name} loss is not finite")
    return gen + weights.lambda_T * triplet + weights.lambda_D * depth + weights.lambda_S * seg


def total_dis_objective(d_virtual, d_real):
    return dis_loss(d_virtual, d_real)
