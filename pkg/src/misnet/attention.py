"""Parallel attention: axial self-attention with reverse and boundary weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from PIL import Image

from .layers import ConvBN, resize_to


class AxialAttention(nn.Module):
    """Row-wise plus column-wise scaled dot-product attention.

    One set of 1x1 query/key/value projections is shared by both axes, so the
    output for a single-pixel input is twice the value projection.
    """

    def __init__(self, channels, key_dim=None):
        super().__init__()
        self.key_dim = key_dim or max(channels // 8, 1)
        self.query = nn.Conv2d(channels, self.key_dim, 1)
        self.key = nn.Conv2d(channels, self.key_dim, 1)
        self.value = nn.Conv2d(channels, channels, 1)

    @staticmethod
    def _attend(q, k, v):
        # q, k: (N, L, dk); v: (N, L, C)
        scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
        return torch.softmax(scores, dim=-1) @ v

    def horizontal(self, q, k, v):
        B, _, H, W = v.shape
        rows = lambda t: t.permute(0, 2, 3, 1).reshape(B * H, W, t.shape[1])
        out = self._attend(rows(q), rows(k), rows(v))
        return out.reshape(B, H, W, -1).permute(0, 3, 1, 2)

    def vertical(self, q, k, v):
        B, _, H, W = v.shape
        cols = lambda t: t.permute(0, 3, 2, 1).reshape(B * W, H, t.shape[1])
        out = self._attend(cols(q), cols(k), cols(v))
        return out.reshape(B, W, H, -1).permute(0, 3, 2, 1)

    def forward(self, x):
        q, k, v = self.query(x), self.key(x), self.value(x)
        return self.horizontal(q, k, v) + self.vertical(q, k, v)


def reverse_weight(m_next, size):
    return 1.0 - torch.sigmoid(resize_to(m_next, size))


def boundary_weight(m_next, size):
    return 1.0 - (torch.sigmoid(resize_to(m_next, size)) - 0.5).abs() / 0.5


@dataclass
class AttentionBundle:
    f_rb: torch.Tensor
    r: torch.Tensor | None = None
    b: torch.Tensor | None = None
    f_r: torch.Tensor | None = None
    f_b: torch.Tensor | None = None


class ParallelAttention(nn.Module):
    def __init__(self, channels=32, use_ra=True, use_ba=True, enabled=True):
        super().__init__()
        self.enabled = enabled
        self.use_ra = use_ra
        self.use_ba = use_ba
        if not enabled:
            return
        if not (use_ra or use_ba):
            raise ValueError("at least one of the reverse/boundary branches must be enabled")
        both = use_ra and use_ba
        if both and channels % 2:
            raise ValueError(f"channels must be even to split across two branches, got {channels}")
        out = channels // 2 if both else channels
        self.axial = AxialAttention(channels)
        self.compress_r = ConvBN(channels, out, 3) if use_ra else None
        self.compress_b = ConvBN(channels, out, 3) if use_ba else None

    def attend(self, f, m_next) -> AttentionBundle:
        """Weighted residual features before compression (``f_rb`` left as the input)."""
        ff = self.axial(f)
        size = f.shape[-2:]
        bundle = AttentionBundle(f_rb=f)
        if self.use_ra:
            bundle.r = reverse_weight(m_next, size)
            bundle.f_r = ff * bundle.r + f
        if self.use_ba:
            bundle.b = boundary_weight(m_next, size)
            bundle.f_b = ff * bundle.b + f
        return bundle

    def forward(self, f, m_next) -> AttentionBundle:
        if not self.enabled:
            return AttentionBundle(f_rb=f)
        bundle = self.attend(f, m_next)
        parts = []
        if self.use_ra:
            parts.append(self.compress_r(bundle.f_r))
        if self.use_ba:
            parts.append(self.compress_b(bundle.f_b))
        bundle.f_rb = torch.cat(parts, 1)
        return bundle


def export_attention_maps(weights: dict, out_dir, stem="sample") -> list[Path]:
    """Save each (B, 1, H, W) weight map in ``weights`` as 8-bit grayscale PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, w in weights.items():
        if w is None:
            continue
        arr = w.detach().cpu().double().numpy()
        for i in range(arr.shape[0]):
            img = np.clip(np.rint(arr[i, 0] * 255), 0, 255).astype(np.uint8)
            path = out_dir / f"{stem}_{i}_{name}.png"
            Image.fromarray(img).save(path)
            written.append(path)
    return written
