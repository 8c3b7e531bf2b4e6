"""Five-level feature pyramid backbones and the Receptive Field Block."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .core import MultiScaleFeatures, check_image_batch
from .layers import ConvBN

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
WEIGHTS_ENV = "MISNET_WEIGHTS_DIR"


class BackboneWeightError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackboneDescriptor:
    id: str
    strides: tuple = (2, 4, 8, 16, 32)
    channels: tuple = (64, 256, 512, 1024, 2048)
    pretrained_weights_path: str | None = None
    norm_mean: tuple = IMAGENET_MEAN
    norm_std: tuple = IMAGENET_STD

    def __post_init__(self):
        if len(self.strides) != 5 or len(self.channels) != 5:
            raise ValueError("a backbone descriptor declares exactly five levels")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing, got {self.strides}")
        if min(self.channels) < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")


DESCRIPTORS = {
    "res2net50": BackboneDescriptor("res2net50"),
    "toy": BackboneDescriptor("toy", channels=(8, 16, 32, 64, 128)),
}


def get_descriptor(backbone_id: str) -> BackboneDescriptor:
    try:
        return DESCRIPTORS[backbone_id]
    except KeyError:
        raise KeyError(f"unknown backbone {backbone_id!r}; known: {sorted(DESCRIPTORS)}") from None


# -- Res2Net-50 (v1b, 26w x 4s) ---------------------------------------------

class Bottle2neck(nn.Module):
    expansion = 4

    def __init__(self, inplanes, planes, stride=1, downsample=None, base_width=26, scale=4, stype="normal"):
        super().__init__()
        width = int(math.floor(planes * (base_width / 64.0)))
        self.conv1 = nn.Conv2d(inplanes, width * scale, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(width * scale)
        self.nums = 1 if scale == 1 else scale - 1
        if stype == "stage":
            self.pool = nn.AvgPool2d(3, stride=stride, padding=1)
        self.convs = nn.ModuleList(
            nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False) for _ in range(self.nums))
        self.bns = nn.ModuleList(nn.BatchNorm2d(width) for _ in range(self.nums))
        self.conv3 = nn.Conv2d(width * scale, planes * self.expansion, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(planes * self.expansion)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = downsample
        self.stype = stype
        self.scale = scale
        self.width = width

    def forward(self, x):
        residual = x
        out = self.relu(self.bn1(self.conv1(x)))
        spx = torch.split(out, self.width, 1)
        for i in range(self.nums):
            sp = spx[i] if i == 0 or self.stype == "stage" else sp + spx[i]
            sp = self.relu(self.bns[i](self.convs[i](sp)))
            out = sp if i == 0 else torch.cat((out, sp), 1)
        if self.scale != 1:
            tail = spx[self.nums] if self.stype == "normal" else self.pool(spx[self.nums])
            out = torch.cat((out, tail), 1)
        out = self.bn3(self.conv3(out))
        if self.downsample is not None:
            residual = self.downsample(x)
        return self.relu(out + residual)


class Res2Net(nn.Module):
    def __init__(self, layers=(3, 4, 6, 3), base_width=26, scale=4):
        super().__init__()
        self.inplanes = 64
        self.base_width = base_width
        self.scale = scale
        self.conv1 = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1, bias=False), nn.BatchNorm2d(32), nn.ReLU(inplace=True),
            nn.Conv2d(32, 32, 3, 1, 1, bias=False), nn.BatchNorm2d(32), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, 1, 1, bias=False),
        )
        self.bn1 = nn.BatchNorm2d(64)
        self.relu = nn.ReLU(inplace=True)
        self.maxpool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer1 = self._make_layer(64, layers[0])
        self.layer2 = self._make_layer(128, layers[1], stride=2)
        self.layer3 = self._make_layer(256, layers[2], stride=2)
        self.layer4 = self._make_layer(512, layers[3], stride=2)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def _make_layer(self, planes, blocks, stride=1):
        downsample = None
        if stride != 1 or self.inplanes != planes * Bottle2neck.expansion:
            downsample = nn.Sequential(
                nn.AvgPool2d(stride, stride=stride, ceil_mode=True, count_include_pad=False),
                nn.Conv2d(self.inplanes, planes * Bottle2neck.expansion, 1, bias=False),
                nn.BatchNorm2d(planes * Bottle2neck.expansion),
            )
        layers = [Bottle2neck(self.inplanes, planes, stride, downsample,
                              self.base_width, self.scale, stype="stage")]
        self.inplanes = planes * Bottle2neck.expansion
        layers += [Bottle2neck(self.inplanes, planes, base_width=self.base_width, scale=self.scale)
                   for _ in range(1, blocks)]
        return nn.Sequential(*layers)

    def forward(self, x):
        f1 = self.relu(self.bn1(self.conv1(x)))
        f2 = self.layer1(self.maxpool(f1))
        f3 = self.layer2(f2)
        f4 = self.layer3(f3)
        f5 = self.layer4(f4)
        return MultiScaleFeatures(f1, f2, f3, f4, f5)


class ToyBackbone(nn.Module):
    """Five stride-2 conv stages; small enough for finite-difference tests."""

    def __init__(self, channels=(8, 16, 32, 64, 128)):
        super().__init__()
        ins = (3,) + tuple(channels[:-1])
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )
            for cin, cout in zip(ins, channels)
        )

    def forward(self, x):
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return MultiScaleFeatures(*feats)


class Backbone(nn.Module):
    """Wraps a feature extractor with the descriptor it was built from."""

    def __init__(self, desc: BackboneDescriptor, load_pretrained=True):
        super().__init__()
        self.desc = desc
        if desc.id == "toy":
            self.body = ToyBackbone(desc.channels)
        elif desc.id == "res2net50":
            self.body = Res2Net()
        else:
            raise KeyError(f"no feature extractor registered for {desc.id!r}")
        if load_pretrained:
            path = resolve_weights_path(desc)
            if path is None:
                log.info("no pretrained weights for %s; using random init", desc.id)
            else:
                load_weights(self.body, path)

    def forward(self, x) -> MultiScaleFeatures:
        return extract_features(x, self)


def extract_features(batch: torch.Tensor, backbone: Backbone) -> MultiScaleFeatures:
    check_image_batch(batch)
    feats = backbone.body(batch)
    for f, c in zip(feats, backbone.desc.channels):
        if f.shape[1] != c:
            raise BackboneWeightError(f"feature has {f.shape[1]} channels, descriptor declares {c}")
    return feats


def resolve_weights_path(desc: BackboneDescriptor) -> Path | None:
    if desc.pretrained_weights_path:
        path = Path(desc.pretrained_weights_path)
        if not path.is_file():
            raise BackboneWeightError(f"weight file not found: {path}")
        return path
    root = os.environ.get(WEIGHTS_ENV)
    if root:
        for suffix in (".pth", ".pt"):
            path = Path(root) / f"{desc.id}{suffix}"
            if path.is_file():
                return path
    return None


def load_weights(module: nn.Module, path) -> None:
    """Load a checkpoint after checking every parameter shape against ``module``.

    Keys present only in the checkpoint (e.g. a classifier head) are ignored;
    missing keys and shape mismatches are errors.
    """
    state = torch.load(path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    state = {k.removeprefix("module."): v for k, v in state.items()}
    expected = module.state_dict()
    missing = [k for k in expected if k not in state]
    if missing:
        raise BackboneWeightError(f"{path}: missing {len(missing)} tensors, e.g. {missing[:3]}")
    bad = [(k, tuple(state[k].shape), tuple(v.shape)) for k, v in expected.items()
           if tuple(state[k].shape) != tuple(v.shape)]
    if bad:
        k, got, want = bad[0]
        raise BackboneWeightError(f"{path}: shape mismatch for {k}: file {got}, model {want}")
    module.load_state_dict({k: state[k] for k in expected})


class RFB(nn.Module):
    """Receptive Field Block: dilated branches (1, 3, 5, 7) plus a residual shortcut."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.branch0 = ConvBN(in_channels, out_channels, 1, relu=False)
        self.branches = nn.ModuleList()
        for k, d in ((3, 3), (5, 5), (7, 7)):
            self.branches.append(nn.Sequential(
                ConvBN(in_channels, out_channels, 1, relu=False),
                ConvBN(out_channels, out_channels, (1, k), relu=False),
                ConvBN(out_channels, out_channels, (k, 1), relu=False),
                ConvBN(out_channels, out_channels, 3, dilation=d, relu=False),
            ))
        self.project = ConvBN(4 * out_channels, out_channels, 1, relu=False)
        self.shortcut = ConvBN(in_channels, out_channels, 1, relu=False)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        outs = [self.branch0(x)] + [b(x) for b in self.branches]
        return self.relu(self.project(torch.cat(outs, 1)) + self.shortcut(x))

