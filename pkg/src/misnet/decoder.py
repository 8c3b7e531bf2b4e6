"""Balancing-weight decoding and the full network assembly."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .attention import ParallelAttention
from .backbone import Backbone, BackboneDescriptor, get_descriptor
from .core import ModelConfig, validate_config
from .fusion import HighLevelFusion, LowLevelFusion, SelectiveSharedFusion
from .layers import ConvBN, resize_to


class CBAM(nn.Module):
    """Channel attention followed by spatial attention."""

    def __init__(self, channels, reduction=16, kernel_size=7):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1),
        )
        self.spatial = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        avg = self.mlp(x.mean(dim=(2, 3), keepdim=True))
        mx = self.mlp(x.amax(dim=(2, 3), keepdim=True))
        x = x * torch.sigmoid(avg + mx)
        pooled = torch.cat((x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)), 1)
        return x * torch.sigmoid(self.spatial(pooled))


class BalancingWeight(nn.Module):
    """Merge low-level, attention and level features; emit refined level logits.

    With ``balance=False`` the resized inputs are simply summed before the head.
    """

    def __init__(self, channels=32, use_low=True, balance=True):
        super().__init__()
        self.use_low = use_low
        self.balance = balance
        if balance:
            n_in = 3 if use_low else 2
            self.compress = ConvBN(n_in * channels, channels, 3)
        self.head = nn.Conv2d(channels, 1, 1)

    def forward(self, f_rb, f_i, m_next, f_clf=None, work_size=None):
        if self.use_low:
            if f_clf is None:
                raise ValueError("this balancing module expects the filtered low-level feature")
            work_size = f_clf.shape[-2:]
        elif work_size is None:
            raise ValueError("work_size is required when the low-level feature is not used")
        parts = [resize_to(f_rb, work_size), resize_to(f_i, work_size)]
        if self.use_low:
            parts.insert(0, f_clf)
        if any(p.shape[-2:] != parts[0].shape[-2:] for p in parts):
            raise ValueError("inputs do not share a resolution after resizing")
        if self.balance:
            x = self.compress(torch.cat(parts, 1))
            x = x * x.mean(dim=(2, 3), keepdim=True)
        else:
            x = torch.stack(parts).sum(0)
        size = f_i.shape[-2:]
        logits = resize_to(self.head(x), size) + resize_to(m_next, size)
        return x, logits


@dataclass
class SideOutputs:
    m_fuse: torch.Tensor
    m5: torch.Tensor
    m4: torch.Tensor
    m3: torch.Tensor
    final: torch.Tensor
    aux: dict = field(default_factory=dict)

    def supervised(self) -> dict:
        return {"fuse": self.m_fuse, "l5": self.m5, "l4": self.m4, "l3": self.m3}


def _fusion_mode(cfg: ModelConfig) -> str:
    if cfg.use_ssfm:
        return "select"
    if cfg.use_lfm_ssfm and cfg.use_hfm:
        return "add"
    return "lf" if cfg.use_lfm_ssfm else "hf"


class MISNet(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), descriptor: BackboneDescriptor | None = None,
                 load_pretrained=True):
        super().__init__()
        self.cfg = validate_config(cfg)
        desc = descriptor or get_descriptor(cfg.backbone_id)
        c = cfg.squeeze_channels
        ch = desc.channels
        self.backbone = Backbone(desc, load_pretrained=load_pretrained)
        self.lfm = LowLevelFusion(ch[0], ch[1], c) if (cfg.use_lfm_ssfm or cfg.use_lfm_bwm) else None
        self.hfm = HighLevelFusion(ch[2], ch[3], ch[4], c, aggregate=cfg.use_hfm)
        self.ssfm = SelectiveSharedFusion(c, cfg.reduction_ratio, cfg.min_reduced_dim, _fusion_mode(cfg))
        self.cbam = CBAM(c) if cfg.use_lfm_bwm else None
        self.pam = nn.ModuleDict({
            str(i): ParallelAttention(c, cfg.use_pa_ra, cfg.use_pa_ba, enabled=cfg.use_pam)
            for i in (5, 4, 3)
        })
        self.bwm = nn.ModuleDict({
            str(i): BalancingWeight(c, use_low=cfg.use_lfm_bwm, balance=cfg.use_bwm)
            for i in (5, 4, 3)
        })

    def forward(self, x) -> SideOutputs:
        cfg = self.cfg
        f1, f2, f3, f4, f5 = self.backbone(x)
        work_size = f3.shape[-2:]
        f_lf = self.lfm(f1, f2, work_size) if self.lfm is not None else None
        x3, x4, x5 = self.hfm.reduce(f3, f4, f5)
        f_hf = self.hfm.aggregate(x3, x4, x5) if cfg.use_hfm else None
        guide = self.ssfm(f_lf if cfg.use_lfm_ssfm else None, f_hf)
        f_clf = self.cbam(f_lf) if self.cbam is not None else None

        aux = {"g": guide.g, "h": guide.h}
        maps = {}
        m_next = guide.logits
        for level, f_i in ((5, x5), (4, x4), (3, x3)):
            bundle = self.pam[str(level)](f_i, m_next)
            _, m_next = self.bwm[str(level)](bundle.f_rb, f_i, m_next, f_clf, work_size)
            maps[level] = m_next
            aux[f"r{level}"] = bundle.r
            aux[f"b{level}"] = bundle.b
        final = torch.sigmoid(resize_to(maps[3], x.shape[-2:]))
        return SideOutputs(guide.logits, maps[5], maps[4], maps[3], final, aux)


def build_model(cfg: ModelConfig, load_pretrained=True, dtype=None) -> MISNet:
    model = MISNet(cfg, load_pretrained=load_pretrained)
    if dtype is not None:
        model = model.to(dtype)
    return model
