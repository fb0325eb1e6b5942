"""Model variants: configuration, construction, inspection, checkpoints.

Five builds share one wrapper:

    baseline  50-layer residual trunk, no attention
    large     50-layer trunk, global gate, local attention after every stage
    medium    34-layer trunk, global gate, local attention after stage 1
    small     18-layer trunk, global gate, local attention after stage 1
    micro     channel-shuffle trunk, global gate, local attention after the
              first block, one extra Xception block right after it

The feature path (stem -> stages -> global average pool) contains no dense
layers; the layer-norm neck plus linear classifier exist only for training
and are reported separately by the instrumentation.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import torch
import torch.nn as nn

from .attention import ChannelMask, GlobalAttention, LocalAttention, LocalAttentionSite
from .errors import ConfigError
from .resnet import ResNetTrunk
from .shufflenet import ShuffleNetTrunk, ShuffleXceptionBlock

VARIANTS = ("baseline", "large", "medium", "small", "micro")

# variant -> (trunk family, resnet depth, global attention, local-attention stages)
_VARIANT_DEFAULTS = {
    "baseline": ("resnet", 50, False, ()),
    "large": ("resnet", 50, True, (0, 1, 2, 3)),
    "medium": ("resnet", 34, True, (0,)),
    "small": ("resnet", 18, True, (0,)),
    "micro": ("shufflenet", None, True, (0,)),
}

# Hidden width of the per-channel attention subnetwork, indexed by stage.
# Grows with depth: deep stages are spatially small (cheap) but wide, which
# is where the published size/speed budgets place the module's capacity.
DEFAULT_LOCAL_EXPANSION = (2, 8, 32, 128)


@dataclass
class ModelConfig:
    """Declarative description of one model build. JSON round-trippable."""

    variant: str
    num_classes: int
    width_multiplier: float = 1.0
    input_size: int | None = None
    global_attention: bool | None = None
    local_attention_stages: tuple[int, ...] | None = None
    local_attention_expansion: tuple[int, ...] = DEFAULT_LOCAL_EXPANSION
    leaky_slope: float = 0.01
    hard_channel_mask: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.local_attention_stages is not None:
            self.local_attention_stages = tuple(self.local_attention_stages)
        self.local_attention_expansion = tuple(self.local_attention_expansion)
        if len(self.local_attention_expansion) != 4:
            raise ConfigError("local_attention_expansion needs one entry per stage (4)")

    def resolved(self) -> "ModelConfig":
        """Fill variant-dependent defaults; validate placement indices."""
        family, _, default_global, default_local = _VARIANT_DEFAULTS[self.variant]
        cfg = dataclasses.replace(
            self,
            input_size=self.input_size if self.input_size is not None else (224 if self.variant == "micro" else 350),
            global_attention=self.global_attention if self.global_attention is not None else default_global,
            local_attention_stages=(
                self.local_attention_stages if self.local_attention_stages is not None else default_local
            ),
        )
        allowed = {0} if family == "shufflenet" else {0, 1, 2, 3}
        bad = set(cfg.local_attention_stages) - allowed
        if bad:
            raise ConfigError(
                f"unsupported local-attention stage index {sorted(bad)} for variant {self.variant!r}"
            )
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["local_attention_expansion"] = list(self.local_attention_expansion)
        if self.local_attention_stages is not None:
            d["local_attention_stages"] = list(self.local_attention_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        d = dict(d)
        if d.get("local_attention_stages") is not None:
            d["local_attention_stages"] = tuple(d["local_attention_stages"])
        if d.get("local_attention_expansion") is not None:
            d["local_attention_expansion"] = tuple(d["local_attention_expansion"])
        return cls(**d)


class SafrModel(nn.Module):
    """Trunk + attention + pooled embedding + (training-only) classifier head.

    ``forward_features`` yields the re-id embedding: global-average-pooled
    final conv features, before the layer-norm neck. ``forward_classifier``
    applies the neck and the linear classifier; the triplet/center losses
    consume the pre-norm embedding, the softmax loss the logits.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        cfg = config.resolved()
        self.config = cfg
        family, depth, _, _ = _VARIANT_DEFAULTS[cfg.variant]
        self.family = family
        if family == "resnet":
            self.trunk = ResNetTrunk(depth, cfg.width_multiplier)
        else:
            self.trunk = ShuffleNetTrunk(cfg.width_multiplier)

        self.global_attention = (
            GlobalAttention(self.trunk.stem_channels, cfg.leaky_slope) if cfg.global_attention else None
        )
        sites = {}
        for stage_idx in cfg.local_attention_stages:
            channels = (
                self.trunk.stage_channels[stage_idx]
                if family == "resnet"
                else self.trunk.stage_channels[stage_idx]
            )
            sites[f"stage{stage_idx + 1}"] = LocalAttentionSite(
                channels,
                expansion=cfg.local_attention_expansion[stage_idx],
                leaky_slope=cfg.leaky_slope,
            )
        self.local_sites = nn.ModuleDict(sites)
        for site in self.local_sites.values():
            site.hard_mask = cfg.hard_channel_mask

        # micro only: extra capacity right after the local-attention site
        self.extra_block = None
        if family == "shufflenet" and cfg.local_attention_stages:
            hs = False  # sits in stage 1, which runs plain ReLU
            self.extra_block = ShuffleXceptionBlock(self.trunk.stage_channels[0], hs=hs)

        self.gap = nn.AdaptiveAvgPool2d(1)
        self.neck = nn.LayerNorm(self.trunk.out_channels)
        self.classifier = nn.Linear(self.trunk.out_channels, cfg.num_classes)

    @property
    def embedding_dim(self) -> int:
        return self.trunk.out_channels

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def _check_input(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConfigError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        min_size = self.trunk.min_input_size
        if images.shape[2] < min_size or images.shape[3] < min_size:
            raise ConfigError(
                f"input {images.shape[2]}x{images.shape[3]} below the minimum size "
                f"{min_size}x{min_size} for variant {self.config.variant!r}"
            )

    def _trunk_features(self, images: torch.Tensor) -> torch.Tensor:
        x = self.trunk.stem(images)
        if self.global_attention is not None:
            x = self.global_attention(x)
        if self.family == "resnet":
            for i, stage in enumerate(self.trunk.stages):
                x = stage(x)
                site = self.local_sites.get(f"stage{i + 1}")
                if site is not None:
                    x = site(x)
        else:
            for i, stage in enumerate(self.trunk.stages):
                for j, block in enumerate(stage):
                    x = block(x)
                    if i == 0 and j == 0:
                        site = self.local_sites.get("stage1")
                        if site is not None:
                            x = site(x)
                        if self.extra_block is not None:
                            x = self.extra_block(x)
            x = self.trunk.final_conv(x)
        return x

    def forward_features(self, images: torch.Tensor) -> torch.Tensor:
        """Re-id embeddings, (B, embedding_dim), independent of input size."""
        self._check_input(images)
        fmap = self._trunk_features(images)
        return self.gap(fmap).flatten(1)

    def forward_classifier(self, emb: torch.Tensor) -> torch.Tensor:
        """Layer-norm neck then linear logits, (B, num_classes)."""
        if emb.dim() != 2 or emb.shape[1] != self.embedding_dim:
            raise ConfigError(
                f"expected (B, {self.embedding_dim}) embeddings, got {tuple(emb.shape)}"
            )
        return self.classifier(self.neck(emb))

    def forward(self, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        emb = self.forward_features(images)
        return emb, self.forward_classifier(emb)

    def feature_points(self) -> list[tuple[str, nn.Module]]:
        """Ordered (name, module) hooks for per-layer activation measurements.

        The module under ``input`` emits the tensor entering stage 1 (gated
        when global attention is present); each ``L<i>`` emits that stage's
        output after any local attention.
        """
        points = [("input", self.global_attention if self.global_attention is not None else self.trunk.stem)]
        if self.family == "resnet":
            for i, stage in enumerate(self.trunk.stages):
                site = self.local_sites.get(f"stage{i + 1}")
                points.append((f"L{i + 1}", site if site is not None else stage))
        else:
            for i, stage in enumerate(self.trunk.stages):
                points.append((f"L{i + 1}", stage[-1]))
            points.append(("final", self.trunk.final_conv))
        return points


def build_model(config: ModelConfig, seed: int = 0) -> SafrModel:
    """Construct a variant and initialize it deterministically from ``seed``."""
    model = SafrModel(config)
    initialize_parameters(model, seed)
    return model


def initialize_parameters(model: SafrModel, seed: int) -> None:
    """Deterministic init: He-normal (fan-in) convolutions, unit norms,
    zero biases and mask logits, classifier drawn tight (std 0.01).

    Walks modules in registration order with a dedicated generator, so a
    fixed seed reproduces every parameter bitwise.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu", generator=g)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.Linear):
                if module is model.classifier:
                    nn.init.normal_(module.weight, std=0.01, generator=g)
                else:
                    nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu", generator=g)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
                if module.weight is not None:
                    module.weight.fill_(1.0)
                if module.bias is not None:
                    module.bias.zero_()
                if isinstance(module, nn.BatchNorm2d):
                    module.reset_running_stats()
            elif isinstance(module, ChannelMask):
                module.logits.zero_()


@dataclass
class LayerInfo:
    name: str
    kind: str
    shape: tuple[int, ...] | None
    params: int


def describe_model(model: nn.Module) -> list[LayerInfo]:
    """Ordered inventory of leaf layers with their parameter counts."""
    inventory = []
    for name, module in model.named_modules():
        if list(module.children()):
            continue
        params = sum(p.numel() for p in module.parameters(recurse=False))
        weight = getattr(module, "weight", None)
        shape = tuple(weight.shape) if isinstance(weight, torch.Tensor) else None
        if shape is None and isinstance(module, ChannelMask):
            shape = tuple(module.logits.shape)
        inventory.append(LayerInfo(name=name or "<root>", kind=type(module).__name__, shape=shape, params=params))
    return inventory


def format_inventory(inventory: list[LayerInfo]) -> str:
    lines = [f"{'layer':<60} {'kind':<22} {'params':>12}"]
    for info in inventory:
        lines.append(f"{info.name:<60} {info.kind:<22} {info.params:>12}")
    lines.append(f"{'total':<60} {'':<22} {sum(i.params for i in inventory):>12}")
    return "\n".join(lines)


# --- checkpoint container ----------------------------------------------------
#
# Single file, little-endian throughout:
#   bytes 0..7    magic "SAFRCKP1"
#   bytes 8..15   uint64 header length H
#   bytes 16..16+H-1   UTF-8 JSON header:
#       {"manifest": {...}, "tensors": {name: {"shape": [...], "offset": n}}}
#   remainder     float32 tensor payloads, row-major, at their stated offsets
#                 (offsets count floats from the start of the payload region)
#
# Integer buffers (batch-norm step counters) are not stored; they are
# irrelevant to inference and re-created at load time.

_CKPT_MAGIC = b"SAFRCKP1"


def save_checkpoint(
    path: str | Path,
    model: SafrModel,
    seed: int | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
    manifest_extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, torch.Tensor] = {}
    for name, tensor in model.state_dict().items():
        if not tensor.is_floating_point():
            continue
        tensors[f"model/{name}"] = tensor
    for name, tensor in (extra_tensors or {}).items():
        tensors[f"extra/{name}"] = tensor

    manifest = {
        "format": "safr-checkpoint",
        "version": 1,
        "variant": model.config.variant,
        "config": model.config.to_dict(),
        "seed": seed,
        "created": datetime.now(timezone.utc).isoformat(),
    }
    manifest.update(manifest_extra or {})

    index = {}
    offset = 0
    blobs = []
    for name, tensor in tensors.items():
        array = tensor.detach().to(torch.float32).contiguous()
        index[name] = {"shape": list(array.shape), "offset": offset}
        offset += array.numel()
        blobs.append(array)
    header = json.dumps({"manifest": manifest, "tensors": index}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for array in blobs:
            fh.write(array.numpy().astype("<f4", copy=False).tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Read a checkpoint file; returns (manifest, name -> float32 tensor)."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _CKPT_MAGIC:
        raise ConfigError(f"{path} is not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    payload = raw[16 + header_len :]
    tensors = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        numel = 1
        for s in shape:
            numel *= s
        start = meta["offset"] * 4
        flat = torch.frombuffer(bytearray(payload[start : start + numel * 4]), dtype=torch.float32)
        tensors[name] = flat.reshape(shape).clone()
    return header["manifest"], tensors


def model_from_checkpoint(path: str | Path) -> tuple[SafrModel, dict, dict[str, torch.Tensor]]:
    """Rebuild the architecture named in the manifest and load its weights.

    Returns (model, manifest, extra tensors such as loss centers).
    """
    manifest, tensors = load_checkpoint(path)
    config = ModelConfig.from_dict(manifest["config"])
    model = SafrModel(config)
    state = {name[len("model/") :]: t for name, t in tensors.items() if name.startswith("model/")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise ConfigError(f"checkpoint holds unknown tensors: {unexpected[:3]}")
    real_missing = [m for m in missing if not m.endswith("num_batches_tracked")]
    if real_missing:
        raise ConfigError(f"checkpoint is missing tensors: {real_missing[:3]}")
    extra = {name[len("extra/") :]: t for name, t in tensors.items() if name.startswith("extra/")}
    model.eval()
    return model, manifest, extra
