"""Channel-shuffle mobile trunk for the smallest model variant.

Stage table (width_multiplier 1.0), pinned here so parameter and FLOP
figures are reproducible from this file alone:

    stem     conv 3x3 /2      3 ->   24   ReLU
    stage 1  4 blocks  /2    24 ->   48   ReLU
    stage 2  4 blocks  /2    48 ->  104   ReLU
    stage 3  8 blocks  /2   104 ->  208   hard-swish, SE in every block
    stage 4  4 blocks  /2   208 ->  416   hard-swish, no SE
    final    conv 1x1       416 -> 1280   hard-swish

Each stage opens with a stride-2 block; the remaining blocks split
channels in half and process one half. Squeeze-excite gates are built
from 1x1 convolutions, so the feature path stays free of dense layers.
An optional Xception-style block (three depthwise/pointwise pairs) can
be appended after the first block of stage 1; the wrapper uses it to add
capacity right after the local-attention site.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError

STAGE_REPEATS = (4, 4, 8, 4)
STAGE_WIDTHS = (48, 104, 208, 416)
STEM_WIDTH = 24
FINAL_WIDTH = 1280


def channel_shuffle(x: torch.Tensor, groups: int = 2) -> torch.Tensor:
    b, c, h, w = x.shape
    return x.view(b, groups, c // groups, h, w).transpose(1, 2).reshape(b, c, h, w)


def _act(hs: bool) -> nn.Module:
    return nn.Hardswish(inplace=True) if hs else nn.ReLU(inplace=True)


class SqueezeExcite(nn.Module):
    """Channel gate from globally pooled statistics, via 1x1 convolutions."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        squeezed = max(1, channels // reduction)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Conv2d(channels, squeezed, kernel_size=1)
        self.relu = nn.ReLU(inplace=True)
        self.fc2 = nn.Conv2d(squeezed, channels, kernel_size=1)

    def forward(self, x):
        gate = torch.sigmoid(self.fc2(self.relu(self.fc1(self.pool(x)))))
        return x * gate


def _branch(width: int, hs: bool, se: bool) -> nn.Sequential:
    layers = [
        nn.Conv2d(width, width, 1, bias=False),
        nn.BatchNorm2d(width),
        _act(hs),
        nn.Conv2d(width, width, 3, padding=1, groups=width, bias=False),
        nn.BatchNorm2d(width),
        nn.Conv2d(width, width, 1, bias=False),
        nn.BatchNorm2d(width),
        _act(hs),
    ]
    if se:
        layers.append(SqueezeExcite(width))
    return nn.Sequential(*layers)


class ShuffleBlock(nn.Module):
    """Stride-1 unit: split channels, transform one half, shuffle on concat."""

    def __init__(self, channels: int, hs: bool = False, se: bool = False):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"shuffle block needs an even channel count, got {channels}")
        self.branch = _branch(channels // 2, hs, se)

    def forward(self, x):
        x1, x2 = x.chunk(2, dim=1)
        return channel_shuffle(torch.cat((x1, self.branch(x2)), dim=1))


class ShuffleDownBlock(nn.Module):
    """Stride-2 unit: both halves of the output see the strided input."""

    def __init__(self, in_ch: int, out_ch: int, hs: bool = False, se: bool = False):
        super().__init__()
        if out_ch % 2:
            raise ConfigError(f"shuffle block needs an even channel count, got {out_ch}")
        half = out_ch // 2
        self.branch1 = nn.Sequential(
            nn.Conv2d(in_ch, in_ch, 3, stride=2, padding=1, groups=in_ch, bias=False),
            nn.BatchNorm2d(in_ch),
            nn.Conv2d(in_ch, half, 1, bias=False),
            nn.BatchNorm2d(half),
            _act(hs),
        )
        branch2 = [
            nn.Conv2d(in_ch, half, 1, bias=False),
            nn.BatchNorm2d(half),
            _act(hs),
            nn.Conv2d(half, half, 3, stride=2, padding=1, groups=half, bias=False),
            nn.BatchNorm2d(half),
            nn.Conv2d(half, half, 1, bias=False),
            nn.BatchNorm2d(half),
            _act(hs),
        ]
        if se:
            branch2.append(SqueezeExcite(half))
        self.branch2 = nn.Sequential(*branch2)

    def forward(self, x):
        return channel_shuffle(torch.cat((self.branch1(x), self.branch2(x)), dim=1))


class ShuffleXceptionBlock(nn.Module):
    """Stride-1 unit whose branch stacks three depthwise/pointwise pairs."""

    def __init__(self, channels: int, hs: bool = False, se: bool = False):
        super().__init__()
        if channels % 2:
            raise ConfigError(f"shuffle block needs an even channel count, got {channels}")
        width = channels // 2
        layers = []
        for _ in range(3):
            layers += [
                nn.Conv2d(width, width, 3, padding=1, groups=width, bias=False),
                nn.BatchNorm2d(width),
                nn.Conv2d(width, width, 1, bias=False),
                nn.BatchNorm2d(width),
                _act(hs),
            ]
        if se:
            layers.append(SqueezeExcite(width))
        self.branch = nn.Sequential(*layers)

    def forward(self, x):
        x1, x2 = x.chunk(2, dim=1)
        return channel_shuffle(torch.cat((x1, self.branch(x2)), dim=1))


class ShuffleNetTrunk(nn.Module):
    """Stem plus four shuffle stages plus the final pointwise expansion.

    Stage modules are ModuleLists of blocks (not Sequentials) so a wrapper
    can splice attention between blocks.
    """

    min_input_size = 32

    def __init__(self, width_multiplier: float = 1.0):
        super().__init__()
        if width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be positive, got {width_multiplier}")

        def scaled(w: int) -> int:
            return max(2, 2 * int(round(w * width_multiplier / 2)))  # keep widths even

        self.stem_channels = scaled(STEM_WIDTH)
        self.stem = nn.Sequential(
            nn.Conv2d(3, self.stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(self.stem_channels),
            nn.ReLU(inplace=True),
        )
        self.stage_channels = [scaled(w) for w in STAGE_WIDTHS]
        stages = []
        in_ch = self.stem_channels
        for i, (out_ch, repeats) in enumerate(zip(self.stage_channels, STAGE_REPEATS)):
            hs = i >= 2  # hard-swish in the two deepest stages
            se = i == 2  # squeeze-excite in stage 3 only; none on the last stage
            blocks = [ShuffleDownBlock(in_ch, out_ch, hs=hs, se=se)]
            blocks += [ShuffleBlock(out_ch, hs=hs, se=se) for _ in range(repeats - 1)]
            stages.append(nn.ModuleList(blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.out_channels = scaled(FINAL_WIDTH)
        self.final_conv = nn.Sequential(
            nn.Conv2d(in_ch, self.out_channels, 1, bias=False),
            nn.BatchNorm2d(self.out_channels),
            nn.Hardswish(inplace=True),
        )

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages:
            for block in stage:
                x = block(x)
        return self.final_conv(x)
