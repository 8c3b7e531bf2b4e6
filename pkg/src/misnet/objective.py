"""Weighted BCE + weighted IoU loss, deep supervision, optimizer and poly schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .layers import resize_to

IOU_SMOOTH = 1.0


def _as_4d(x):
    x = torch.as_tensor(x)
    while x.ndim < 4:
        x = x.unsqueeze(0)
    return x


def pixel_weight(mask, kernel_size=31, multiplier=5.0):
    """``1 + multiplier * |local_mean(mask) - mask|``; large near boundaries and small objects.

    The local mean is a zero-padded ``kernel_size`` box filter, so values lie
    in ``[1, 1 + multiplier]``.
    """
    g = _as_4d(mask)
    if not torch.is_floating_point(g):
        g = g.to(torch.get_default_dtype())
    local = F.avg_pool2d(g, kernel_size, stride=1, padding=kernel_size // 2, count_include_pad=True)
    return 1.0 + multiplier * (local - g).abs()


def _check_finite(logits):
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")


def weighted_bce(logits, mask, weight):
    """Weight-normalised per-image BCE on ``sigmoid(logits)``, averaged over the batch."""
    logits, mask, weight = _as_4d(logits), _as_4d(mask), _as_4d(weight)
    _check_finite(logits)
    per_pixel = F.binary_cross_entropy_with_logits(logits, mask.to(logits.dtype), reduction="none")
    per_image = (weight * per_pixel).sum(dim=(2, 3)) / weight.sum(dim=(2, 3))
    return per_image.mean()


def weighted_iou(logits, mask, weight, smooth=IOU_SMOOTH):
    logits, mask, weight = _as_4d(logits), _as_4d(mask), _as_4d(weight)
    _check_finite(logits)
    p = torch.sigmoid(logits)
    g = mask.to(logits.dtype)
    inter = (weight * p * g).sum(dim=(2, 3))
    union = (weight * (p + g - p * g)).sum(dim=(2, 3))
    return (1.0 - (inter + smooth) / (union + smooth)).mean()


def structure_loss(logits, mask, kernel_size=31, multiplier=5.0):
    """Return ``(bce, iou)`` for one logit map already at mask resolution."""
    w = pixel_weight(mask, kernel_size, multiplier).to(logits.dtype)
    return weighted_bce(logits, mask, w), weighted_iou(logits, mask, w)


@dataclass
class LossReport:
    total: torch.Tensor
    per_map: dict = field(default_factory=dict)
    bce_part: float = 0.0
    iou_part: float = 0.0


def total_loss(outputs, mask, kernel_size=31, multiplier=5.0) -> LossReport:
    """Sum of weighted BCE + IoU over the guidance map and the three level maps.

    ``outputs`` is a :class:`~misnet.decoder.SideOutputs` or a mapping of
    name -> logits. Every map is upsampled to the mask resolution.
    """
    maps = outputs.supervised() if hasattr(outputs, "supervised") else dict(outputs)
    mask = _as_4d(mask)
    total = 0.0
    report = LossReport(total=torch.zeros(()))
    for name, logits in maps.items():
        up = resize_to(logits, mask.shape[-2:])
        bce, iou = structure_loss(up, mask, kernel_size, multiplier)
        loss = bce + iou
        total = total + loss
        report.per_map[name] = loss.item()
        report.bce_part += bce.item()
        report.iou_part += iou.item()
    report.total = total
    return report


def poly_lr(epoch, total_epochs, base_lr=1e-5, power=0.9):
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch must lie in [0, {total_epochs}), got {epoch}")
    return base_lr * (1.0 - epoch / total_epochs) ** power


def make_optimizer(params, lr=1e-5, weight_decay=1e-5):
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def set_lr(optimizer, lr):
    for group in optimizer.param_groups:
        group["lr"] = lr
