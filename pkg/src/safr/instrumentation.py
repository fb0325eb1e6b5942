"""Size, speed, and activation-density accounting.

FLOP conventions (documented once, used everywhere):
 * convolution: 2 * k_h * k_w * (C_in / groups) * C_out * H_out * W_out
   (+ C_out * H_out * W_out when a bias is present)
 * linear: 2 * in_features * out_features (+ out_features with bias)
 * norm layers: 2 ops per element; activations: 1 op per element;
   pooling: 1 op per input element
 * a multiply-accumulate counts as 2 FLOPs; halve for MACs (both reported)

Activation density is the fraction of entries with magnitude above a
threshold (default: strictly nonzero), measured at each model feature
point after its final nonlinearity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

from .models import SafrModel, describe_model


def count_params(model: nn.Module, include_head: bool = True) -> int:
    """Exact number of learnable scalars.

    ``include_head=False`` drops the layer-norm neck and the linear
    classifier, i.e. counts the deployed feature extractor only.
    """
    total = sum(p.numel() for p in model.parameters())
    if include_head and not isinstance(model, SafrModel):
        return total
    if include_head:
        return total
    head = sum(p.numel() for p in model.neck.parameters())
    head += sum(p.numel() for p in model.classifier.parameters())
    return total - head


@dataclass
class LayerCost:
    name: str
    kind: str
    flops: int
    output_shape: tuple[int, ...]


def _conv_flops(module: nn.Conv2d, out: torch.Tensor) -> int:
    k_h, k_w = module.kernel_size
    c_in = module.in_channels // module.groups
    positions = out.shape[0] * out.shape[2] * out.shape[3]
    flops = 2 * k_h * k_w * c_in * module.out_channels * positions
    if module.bias is not None:
        flops += module.out_channels * positions
    return flops


def _linear_flops(module: nn.Linear, out: torch.Tensor) -> int:
    rows = out.numel() // module.out_features
    flops = 2 * module.in_features * module.out_features * rows
    if module.bias is not None:
        flops += module.out_features * rows
    return flops


def count_flops(
    model: SafrModel,
    input_size: int | None = None,
    batch_size: int = 1,
    per_layer: bool = False,
) -> int | tuple[int, list[LayerCost]]:
    """Deterministic FLOP estimate at the given square input size.

    Defaults to the model's configured input size. Counts are taken from a
    shape-tracing forward pass in inference mode.
    """
    size = input_size if input_size is not None else model.config.input_size
    costs: list[LayerCost] = []
    names = {id(m): n for n, m in model.named_modules()}

    def hook(module, args, out):
        if not isinstance(out, torch.Tensor):
            return
        if isinstance(module, nn.Conv2d):
            flops = _conv_flops(module, out)
        elif isinstance(module, nn.Linear):
            flops = _linear_flops(module, out)
        elif isinstance(module, (nn.BatchNorm2d, nn.LayerNorm)):
            flops = 2 * out.numel()
        elif isinstance(module, (nn.ReLU, nn.LeakyReLU, nn.Hardswish, nn.Sigmoid)):
            flops = out.numel()
        elif isinstance(module, (nn.MaxPool2d, nn.AdaptiveAvgPool2d)):
            flops = args[0].numel()
        else:
            return
        costs.append(
            LayerCost(names.get(id(module), "?"), type(module).__name__, flops, tuple(out.shape))
        )

    handles = [m.register_forward_hook(hook) for m in model.modules() if not list(m.children())]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            images = torch.zeros(batch_size, 3, size, size)
            model(images)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    total = sum(c.flops for c in costs)
    if per_layer:
        return total, costs
    return total


def count_macs(model: SafrModel, input_size: int | None = None) -> int:
    """Multiply-accumulate count: half the FLOP figure."""
    return count_flops(model, input_size) // 2


def activation_density(
    model: SafrModel,
    batch: torch.Tensor,
    threshold: float = 0.0,
) -> list[tuple[str, float]]:
    """Fraction of activations with |a| > threshold at each feature point,
    averaged over the batch, in network order."""
    if batch.numel() == 0:
        raise ValueError("batch must be nonempty")
    captured: dict[str, float] = {}

    def make_hook(name):
        def hook(module, args, out):
            captured[name] = float((out.abs() > threshold).float().mean())

        return hook

    handles = [module.register_forward_hook(make_hook(name)) for name, module in model.feature_points()]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model.forward_features(batch)
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return [(name, captured[name]) for name, _ in model.feature_points()]


@dataclass
class ProfileReport:
    """Per-variant size/speed card, with optional layer breakdowns."""

    variant: str
    input_size: int
    params_total: int
    params_feature_path: int
    params_head: int
    flops: int
    macs: int
    layer_params: list[dict] = field(default_factory=list)
    layer_flops: list[dict] = field(default_factory=list)
    densities: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "input_size": self.input_size,
            "params_total": self.params_total,
            "params_feature_path": self.params_feature_path,
            "params_head": self.params_head,
            "flops": self.flops,
            "macs": self.macs,
            "layer_params": self.layer_params,
            "layer_flops": self.layer_flops,
            "densities": self.densities,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProfileReport":
        return cls(**d)


def profile_model(
    model: SafrModel,
    input_size: int | None = None,
    density_batch: torch.Tensor | None = None,
) -> ProfileReport:
    size = input_size if input_size is not None else model.config.input_size
    total = count_params(model, include_head=True)
    feature = count_params(model, include_head=False)
    flops, layer_costs = count_flops(model, size, per_layer=True)
    inventory = describe_model(model)
    densities = []
    if density_batch is not None:
        densities = [{"layer": n, "density": d} for n, d in activation_density(model, density_batch)]
    return ProfileReport(
        variant=model.config.variant,
        input_size=size,
        params_total=total,
        params_feature_path=feature,
        params_head=total - feature,
        flops=flops,
        macs=flops // 2,
        layer_params=[
            {"layer": i.name, "kind": i.kind, "params": i.params} for i in inventory if i.params
        ],
        layer_flops=[
            {"layer": c.name, "kind": c.kind, "flops": c.flops} for c in layer_costs
        ],
        densities=densities,
    )


def emit_model_card(report: ProfileReport, path: str | Path) -> tuple[Path, Path]:
    """Write the card as markdown plus a JSON twin; returns both paths.

    ``path`` names the markdown file; the JSON twin sits beside it with a
    ``.json`` suffix and round-trips the full report losslessly.
    """
    md_path = Path(path)
    md_path.parent.mkdir(parents=True, exist_ok=True)
    json_path = md_path.with_suffix(".json")
    lines = [
        f"# Model card: {report.variant}",
        "",
        f"- profiling input size: {report.input_size}x{report.input_size}",
        f"- parameters (feature path): {report.params_feature_path:,}",
        f"- parameters (with classifier head): {report.params_total:,}",
        f"- FLOPs at stated size: {report.flops:,} ({report.flops / 1e9:.3f} GFLOPs)",
        f"- MACs at stated size: {report.macs:,} ({report.macs / 1e9:.3f} GMACs)",
        "",
    ]
    if report.densities:
        lines.append("## Activation density")
        lines.append("")
        for row in report.densities:
            lines.append(f"- {row['layer']}: {row['density']:.4f}")
        lines.append("")
    lines.append("## Largest layers by parameters")
    lines.append("")
    for row in sorted(report.layer_params, key=lambda r: -r["params"])[:10]:
        lines.append(f"- {row['layer']} ({row['kind']}): {row['params']:,}")
    md_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    json_path.write_text(json.dumps(report.to_dict(), indent=2), encoding="utf-8")
    return md_path, json_path


def load_model_card(json_path: str | Path) -> ProfileReport:
    return ProfileReport.from_dict(json.loads(Path(json_path).read_text(encoding="utf-8")))
