"""Attention modules: global sigmoid gating, per-kernel local attention,
and learned channel-mask mixing of local and global features.

All modules are pooling-free and preserve the spatial shape of their input,
so attended features can be mixed elementwise with the unattended stream.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .errors import ConfigError


def _check_channels(x: torch.Tensor, expected: int, module: str) -> None:
    if x.dim() != 4:
        raise ConfigError(f"{module} expects a 4-D (B, C, H, W) tensor, got {tuple(x.shape)}")
    if x.shape[1] != expected:
        raise ConfigError(f"{module} built for {expected} channels, input has {x.shape[1]}")


class GlobalAttention(nn.Module):
    """Elementwise sigmoid gate produced by two full 3x3 convolutions.

    The gate is applied by multiplication, so every output magnitude is
    bounded by the corresponding input magnitude. Leaky ReLU between the
    convolutions keeps negative pre-activations alive.
    """

    def __init__(self, channels: int, leaky_slope: float = 0.01):
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be >= 1, got {channels}")
        if not 0.0 < leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {leaky_slope}")
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.LeakyReLU(leaky_slope)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Gate values in (0, 1), same shape as ``x``."""
        _check_channels(x, self.channels, "GlobalAttention")
        return torch.sigmoid(self.conv2(self.act(self.conv1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_weights(x)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        reset_conv_parameters(self, generator)


class LocalAttention(nn.Module):
    """Per-kernel spatial attention: one independent map per channel.

    Each channel's map is produced from that channel alone (grouped
    convolutions, no cross-channel mixing) and no pooling is used anywhere.
    ``expansion`` is the hidden width of the per-channel subnetwork; it
    trades parameters/compute for capacity without breaking the per-channel
    factorization.
    """

    def __init__(self, channels: int, expansion: int = 2, leaky_slope: float = 0.01):
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be >= 1, got {channels}")
        if expansion < 1:
            raise ConfigError(f"expansion must be >= 1, got {expansion}")
        self.channels = channels
        self.expansion = expansion
        hidden = channels * expansion
        self.conv1 = nn.Conv2d(channels, hidden, kernel_size=3, padding=1, groups=channels)
        self.conv2 = nn.Conv2d(hidden, channels, kernel_size=3, padding=1, groups=channels)
        self.act = nn.LeakyReLU(leaky_slope)

    def attention_maps(self, x: torch.Tensor) -> torch.Tensor:
        """Attention tensor in (0, 1) with the same (B, C, H, W) shape as ``x``."""
        _check_channels(x, self.channels, "LocalAttention")
        return torch.sigmoid(self.conv2(self.act(self.conv1(x))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_maps(x)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        reset_conv_parameters(self, generator)


def channel_mask_mix(f_l: torch.Tensor, f_g: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-channel convex mix: ``mask[c] * f_l[c] + (1 - mask[c]) * f_g[c]``.

    ``mask`` is a length-C vector with entries in [0, 1].
    """
    if f_l.shape != f_g.shape:
        raise ConfigError(f"feature shapes differ: {tuple(f_l.shape)} vs {tuple(f_g.shape)}")
    if mask.dim() != 1 or mask.shape[0] != f_l.shape[1]:
        raise ConfigError(
            f"mask must have one entry per channel ({f_l.shape[1]}), got shape {tuple(mask.shape)}"
        )
    if bool((mask < 0).any()) or bool((mask > 1).any()):
        raise ConfigError("mask entries must lie in [0, 1]")
    m = mask.view(1, -1, 1, 1)
    return m * f_l + (1.0 - m) * f_g


class ChannelMask(nn.Module):
    """Learned per-channel mask blending a local and a global feature stream.

    The mask is a sigmoid of free logits so it stays in (0, 1) and remains
    trainable end to end. ``hard=True`` thresholds the mask at 0.5 for a
    binary blend at inference. Logits start at zero: an even 0.5/0.5 blend.
    """

    def __init__(self, channels: int):
        super().__init__()
        if channels < 1:
            raise ConfigError(f"channels must be >= 1, got {channels}")
        self.channels = channels
        self.logits = nn.Parameter(torch.zeros(channels))

    def mask(self, hard: bool = False) -> torch.Tensor:
        soft = torch.sigmoid(self.logits)
        if hard:
            return (soft >= 0.5).to(soft.dtype)
        return soft

    def forward(self, f_l: torch.Tensor, f_g: torch.Tensor, hard: bool = False) -> torch.Tensor:
        return channel_mask_mix(f_l, f_g, self.mask(hard=hard))

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        del generator  # logits always restart at the even blend
        with torch.no_grad():
            self.logits.zero_()


class LocalAttentionSite(nn.Module):
    """One local-attention insertion point in a backbone.

    Computes locally attended features from the incoming stream and blends
    them back with the unattended stream through a learned channel mask.
    Output shape equals input shape, so the site is drop-in anywhere.
    """

    def __init__(self, channels: int, expansion: int = 2, leaky_slope: float = 0.01):
        super().__init__()
        self.local = LocalAttention(channels, expansion=expansion, leaky_slope=leaky_slope)
        self.mix = ChannelMask(channels)
        self.hard_mask = False  # flip for binary-mask inference

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mix(self.local(x), x, hard=self.hard_mask)

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        self.local.reset_parameters(generator)
        self.mix.reset_parameters(generator)


def reset_conv_parameters(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Re-draw conv/linear weights fan-in scaled (He normal); zero the biases.

    Deterministic for a fixed generator: modules are visited in registration
    order, so the same seed reproduces parameters bitwise.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="leaky_relu", generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
