"""Residual backbones (18/34/50-layer) built from scratch.

Only the convolutional trunk is defined here: stem, four residual stages,
no pooling head and no dense layers. ``width_multiplier`` scales every
stage uniformly so desk-scale experiments can shrink the network without
changing its shape.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError


def conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1, bias=False)


def conv1x1(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(in_ch, planes, stride)
        self.bn1 = nn.BatchNorm2d(planes)
        self.relu = nn.ReLU(inplace=True)
        self.conv2 = conv3x3(planes, planes)
        self.bn2 = nn.BatchNorm2d(planes)
        self.downsample = None
        if stride != 1 or in_ch != planes:
            self.downsample = nn.Sequential(conv1x1(in_ch, planes, stride), nn.BatchNorm2d(planes))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, planes: int, stride: int = 1):
        super().__init__()
        out_ch = planes * self.expansion
        self.conv1 = conv1x1(in_ch, planes)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = conv3x3(planes, planes, stride)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv3 = conv1x1(planes, out_ch)
        self.bn3 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(conv1x1(in_ch, out_ch, stride), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


_DEPTH_SPECS = {
    18: (BasicBlock, (2, 2, 2, 2)),
    34: (BasicBlock, (3, 4, 6, 3)),
    50: (Bottleneck, (3, 4, 6, 3)),
}


class ResNetTrunk(nn.Module):
    """Stem plus four residual stages; forward returns the final feature map.

    Exposes ``stem``, ``stages`` (ModuleList of 4) and channel metadata so a
    wrapper can interleave attention modules between stages.
    """

    # total downsampling factor stem(4) * stages(8)
    min_input_size = 32

    def __init__(self, depth: int, width_multiplier: float = 1.0):
        super().__init__()
        if depth not in _DEPTH_SPECS:
            raise ConfigError(f"unsupported resnet depth {depth}; choose from {sorted(_DEPTH_SPECS)}")
        if width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {width_multiplier}")
        block, repeats = _DEPTH_SPECS[depth]
        self.depth = depth
        widths = [max(1, int(round(w * width_multiplier))) for w in (64, 128, 256, 512)]
        self.stem_channels = widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], kernel_size=7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(kernel_size=3, stride=2, padding=1),
        )
        stages = []
        in_ch = widths[0]
        self.stage_channels = []
        for i, (planes, n_blocks) in enumerate(zip(widths, repeats)):
            stride = 1 if i == 0 else 2
            blocks = [block(in_ch, planes, stride)]
            in_ch = planes * block.expansion
            blocks += [block(in_ch, planes) for _ in range(n_blocks - 1)]
            stages.append(nn.Sequential(*blocks))
            self.stage_channels.append(in_ch)
        self.stages = nn.ModuleList(stages)
        self.out_channels = in_ch

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            x = stage(x)
        return x
