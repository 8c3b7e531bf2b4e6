"""Low-level fusion, high-level fusion and the selectively shared fusion module."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import RFB
from .core import reduced_dim
from .layers import ConvBN, resize_to


class LowLevelFusion(nn.Module):
    """Fuse backbone levels 1-2 into a single C-channel map at the working resolution."""

    def __init__(self, c1, c2, channels=32):
        super().__init__()
        self.rfb1 = RFB(c1, channels)
        self.rfb2 = RFB(c2, channels)
        self.adjust1 = ConvBN(channels, channels, 1)
        self.adjust2 = ConvBN(channels, channels, 1)
        self.conv1 = ConvBN(channels, channels, 3)
        self.conv2 = ConvBN(channels, channels, 3)
        self.fuse = nn.Sequential(ConvBN(2 * channels, channels, 3), ConvBN(channels, channels, 3))

    def forward(self, f1, f2, out_size=None):
        x1 = self.adjust1(self.rfb1(f1))
        x2 = resize_to(self.adjust2(self.rfb2(f2)), x1.shape[-2:])
        if x1.shape[-2:] != x2.shape[-2:]:
            raise ValueError("level-2 feature does not match level-1 resolution after upsampling")
        x = self.fuse(torch.cat((self.conv1(x1), self.conv2(x2)), 1))
        if out_size is None:
            # level 1 sits at stride 2, the working resolution at stride 8
            out_size = [-(-s // 4) for s in x.shape[-2:]]
        return F.adaptive_avg_pool2d(x, out_size)


class CascadedPartialDecoder(nn.Module):
    """Partial decoder over three levels; deepest first when calling ``forward``."""

    def __init__(self, channels):
        super().__init__()
        c = channels
        self.conv_up1 = ConvBN(c, c, 3)
        self.conv_up2 = ConvBN(c, c, 3)
        self.conv_up3 = ConvBN(c, c, 3)
        self.conv_up4 = ConvBN(c, c, 3)
        self.conv_up5 = ConvBN(2 * c, 2 * c, 3)
        self.conv_concat2 = ConvBN(2 * c, 2 * c, 3)
        self.conv_concat3 = ConvBN(3 * c, 3 * c, 3)
        self.conv4 = ConvBN(3 * c, 3 * c, 3)
        self.out = nn.Conv2d(3 * c, c, 1)

    def forward(self, x5, x4, x3):
        s4, s3 = x4.shape[-2:], x3.shape[-2:]
        x4_1 = self.conv_up1(resize_to(x5, s4)) * x4
        x3_1 = self.conv_up2(resize_to(x5, s3)) * self.conv_up3(resize_to(x4, s3)) * x3
        x4_2 = self.conv_concat2(torch.cat((x4_1, self.conv_up4(resize_to(x5, s4))), 1))
        x3_2 = self.conv_concat3(torch.cat((x3_1, self.conv_up5(resize_to(x4_2, s3))), 1))
        return self.out(self.conv4(x3_2))


class HighLevelFusion(nn.Module):
    """RFB-condition levels 3-5, then aggregate them with the partial decoder."""

    def __init__(self, c3, c4, c5, channels=32, aggregate=True):
        super().__init__()
        self.rfb3 = RFB(c3, channels)
        self.rfb4 = RFB(c4, channels)
        self.rfb5 = RFB(c5, channels)
        self.cpd = CascadedPartialDecoder(channels) if aggregate else None

    def reduce(self, f3, f4, f5):
        return self.rfb3(f3), self.rfb4(f4), self.rfb5(f5)

    def aggregate(self, x3, x4, x5):
        if self.cpd is None:
            raise RuntimeError("high-level aggregation is disabled for this model")
        return self.cpd(x5, x4, x3)

    def forward(self, f3, f4, f5):
        return self.aggregate(*self.reduce(f3, f4, f5))


@dataclass
class GuidanceOutput:
    feature: torch.Tensor
    logits: torch.Tensor
    g: torch.Tensor | None = None
    h: torch.Tensor | None = None


def combine(s_lf, s_hf, g, h):
    """Per-channel convex combination of the two squeezed features."""
    return g[..., None, None] * s_lf + h[..., None, None] * s_hf


class SelectiveSharedFusion(nn.Module):
    """Cross-fuse squeezed low/high features and select between them per channel.

    ``mode`` is ``"select"`` for the full module, ``"add"`` for plain
    elementwise addition of the squeezed inputs, and ``"lf"`` / ``"hf"`` when
    only one branch is available (it is passed through a 3x3 conv).
    """

    def __init__(self, channels=32, reduction_ratio=4, min_dim=16, mode="select"):
        super().__init__()
        if mode not in ("select", "add", "lf", "hf"):
            raise ValueError(f"unknown fusion mode {mode!r}")
        c = channels
        self.mode = mode
        self.squeeze_lf = ConvBN(c, c, 1, relu=False) if mode != "hf" else None
        self.squeeze_hf = ConvBN(c, c, 1, relu=False) if mode != "lf" else None
        if mode == "select":
            d = reduced_dim(c, reduction_ratio, min_dim)
            self.reduced_dim = d
            self.cross3_1 = ConvBN(2 * c, c, 3)
            self.cross5_1 = ConvBN(2 * c, c, 5)
            self.cross3_2 = ConvBN(2 * c, c, 3)
            self.cross5_2 = ConvBN(2 * c, c, 5)
            self.fc = nn.Linear(c, d, bias=False)
            self.bn = nn.BatchNorm1d(d)
            self.G = nn.Parameter(torch.empty(c, d))
            self.H = nn.Parameter(torch.empty(c, d))
            nn.init.kaiming_uniform_(self.G, a=5 ** 0.5)
            nn.init.kaiming_uniform_(self.H, a=5 ** 0.5)
        elif mode in ("lf", "hf"):
            self.single = ConvBN(c, c, 3)
        self.head = nn.Conv2d(c, 1, 1)

    def cross_fuse(self, s_lf, s_hf):
        if s_lf.shape != s_hf.shape:
            raise ValueError(f"branch shapes differ: {tuple(s_lf.shape)} vs {tuple(s_hf.shape)}")
        s1 = self.cross3_1(torch.cat((s_lf, s_hf), 1))
        s2 = self.cross5_1(torch.cat((s_hf, s_lf), 1))
        s3 = self.cross3_2(torch.cat((s1, s2), 1))
        s4 = self.cross5_2(torch.cat((s2, s1), 1))
        return s3, s4

    def selection_weights(self, s_lhf3, s_lhf4):
        s = s_lhf3 + s_lhf4
        k = s.mean(dim=(2, 3))
        q = torch.sigmoid(self.bn(self.fc(k)))
        if q.shape[1] != self.G.shape[1]:
            raise ValueError(f"descriptor width {q.shape[1]} does not match selection weights {self.G.shape[1]}")
        logits = torch.stack((q @ self.G.t(), q @ self.H.t()), dim=-1)
        gh = torch.softmax(logits, dim=-1)
        return gh[..., 0], gh[..., 1]

    def select(self, s_lf, s_hf, s_lhf3, s_lhf4):
        g, h = self.selection_weights(s_lhf3, s_lhf4)
        return combine(s_lf, s_hf, g, h), g, h

    def forward(self, f_lf, f_hf) -> GuidanceOutput:
        g = h = None
        if self.mode == "lf":
            d = self.single(self.squeeze_lf(f_lf))
        elif self.mode == "hf":
            d = self.single(self.squeeze_hf(f_hf))
        else:
            s_lf, s_hf = self.squeeze_lf(f_lf), self.squeeze_hf(f_hf)
            if self.mode == "add":
                d = s_lf + s_hf
            else:
                d, g, h = self.select(s_lf, s_hf, *self.cross_fuse(s_lf, s_hf))
        return GuidanceOutput(d, self.head(d), g, h)


def dump_selection_weights(g, h, path) -> Path:
    """Write per-channel selection weights as CSV rows ``sample,channel,g,h``."""
    g = torch.as_tensor(g).detach().cpu().double()
    h = torch.as_tensor(h).detach().cpu().double()
    if g.ndim == 1:
        g, h = g[None], h[None]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample", "channel", "g", "h"])
        for b in range(g.shape[0]):
            for c in range(g.shape[1]):
                writer.writerow([b, c, f"{g[b, c].item():.9g}", f"{h[b, c].item():.9g}"])
    return path
