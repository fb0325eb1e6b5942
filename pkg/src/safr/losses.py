"""Training losses: smoothed softmax, batch-hard triplet, center loss,
and their weighted combination.

Conventions pinned here:
 * smoothing targets are q_target = 1 - eps, q_other = +eps, used verbatim
   (they sum to 1 + (N-2)*eps); pass ``normalize_smoothing`` to renormalize.
 * triplet distance is plain Euclidean; anchors are all samples whose
   identity occurs at least twice in the batch.
 * center loss sums 0.5 * ||x - c_y||^2 over the batch by default; a mean
   reduction is available.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigError


@dataclass
class LossConfig:
    """Knobs for the three-term loss.

    ``epsilon=None`` means "one over the number of classes", resolved when
    logits are first seen.
    """

    epsilon: float | None = None
    margin: float = 0.3
    lambda_center: float = 0.0005
    center_lr: float = 0.5
    normalize_smoothing: bool = False

    def __post_init__(self):
        if self.epsilon is not None and not 0.0 <= self.epsilon < 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.margin <= 0:
            raise ConfigError(f"margin must be positive, got {self.margin}")
        if self.lambda_center < 0:
            raise ConfigError(f"lambda_center must be >= 0, got {self.lambda_center}")
        if self.center_lr < 0:
            raise ConfigError(f"center_lr must be >= 0, got {self.center_lr}")


def smoothed_softmax_loss(
    logits: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float,
    normalize: bool = False,
) -> torch.Tensor:
    """Cross-entropy against smoothed targets, averaged over the batch.

    Targets are 1 - eps on the true class and +eps elsewhere. At eps = 0
    this is exactly standard cross-entropy.
    """
    if not 0.0 <= epsilon < 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1), got {epsilon}")
    if logits.dim() != 2:
        raise ConfigError(f"logits must be (batch, classes), got {tuple(logits.shape)}")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite logits")
    batch, num_classes = logits.shape
    _check_labels(labels, batch, num_classes)

    q = torch.full_like(logits, epsilon)
    q.scatter_(1, labels.view(-1, 1), 1.0 - epsilon)
    if normalize:
        q = q / q.sum(dim=1, keepdim=True)
    log_p = torch.log_softmax(logits, dim=1)
    return -(q * log_p).sum(dim=1).mean()


def pairwise_euclidean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Exact pairwise L2 distances via explicit differences (no matmul trick)."""
    return (a.unsqueeze(1) - b.unsqueeze(0)).pow(2).sum(dim=-1).sqrt()


def batch_hard_triplet_terms(
    emb: torch.Tensor, labels: torch.Tensor, margin: float
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample hinge terms max(0, d_hard_pos + margin - d_hard_neg).

    Returns (terms, anchor_mask): ``terms`` has one entry per batch row,
    ``anchor_mask`` marks rows whose identity occurs at least twice (only
    those carry a meaningful term). Raises if the batch holds one identity.
    """
    if emb.dim() != 2:
        raise ConfigError(f"embeddings must be (batch, dim), got {tuple(emb.shape)}")
    if labels.shape[0] != emb.shape[0]:
        raise ConfigError("labels and embeddings disagree on batch size")
    labels = labels.view(-1)
    if torch.unique(labels).numel() < 2:
        raise ConfigError("triplet loss needs at least two identities in the batch")

    dist = pairwise_euclidean(emb, emb)
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    eye = torch.eye(len(labels), dtype=torch.bool, device=emb.device)
    pos_mask = same & ~eye
    neg_mask = ~same

    # hardest positive: max distance among same-identity rows (self excluded)
    neg_inf = torch.finfo(dist.dtype).min
    hardest_pos = torch.where(pos_mask, dist, torch.full_like(dist, neg_inf)).max(dim=1).values
    # hardest negative: min distance among other-identity rows
    pos_inf = torch.finfo(dist.dtype).max
    hardest_neg = torch.where(neg_mask, dist, torch.full_like(dist, pos_inf)).min(dim=1).values

    anchor_mask = pos_mask.any(dim=1)
    terms = torch.clamp(hardest_pos + margin - hardest_neg, min=0.0)
    terms = torch.where(anchor_mask, terms, torch.zeros_like(terms))
    return terms, anchor_mask


def batch_hard_triplet_loss(emb: torch.Tensor, labels: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Mean hinge over anchors, each paired with its hardest positive/negative."""
    terms, anchor_mask = batch_hard_triplet_terms(emb, labels, margin)
    if not bool(anchor_mask.any()):
        raise ConfigError("no identity occurs twice in the batch; no anchors available")
    return terms[anchor_mask].mean()


def init_centers(num_classes: int, dim: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Per-identity centroids, started at the origin."""
    if num_classes < 1 or dim < 1:
        raise ConfigError("num_classes and dim must be >= 1")
    return torch.zeros(num_classes, dim, dtype=dtype)


def center_loss(
    emb: torch.Tensor,
    labels: torch.Tensor,
    centers: torch.Tensor,
    reduction: str = "sum",
) -> torch.Tensor:
    """0.5 * sum_i ||x_i - c_{y_i}||^2 over the batch (or its mean)."""
    _check_labels(labels, emb.shape[0], centers.shape[0])
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    residual = emb - centers[labels]
    per_sample = 0.5 * residual.pow(2).sum(dim=1)
    return per_sample.sum() if reduction == "sum" else per_sample.mean()


@torch.no_grad()
def update_centers(
    centers: torch.Tensor,
    emb: torch.Tensor,
    labels: torch.Tensor,
    center_lr: float,
) -> torch.Tensor:
    """Move each referenced center toward the mean of its batch members.

    c_y <- c_y - lr * delta_y with delta_y = sum_{i: y_i = y}(c_y - x_i) / (1 + n_y).
    Centers of identities absent from the batch are untouched.
    """
    _check_labels(labels, emb.shape[0], centers.shape[0])
    emb = emb.detach().to(centers.dtype)
    counts = torch.bincount(labels, minlength=centers.shape[0]).to(centers.dtype)
    sums = torch.zeros_like(centers)
    sums.index_add_(0, labels, emb)
    delta = (counts.unsqueeze(1) * centers - sums) / (1.0 + counts.unsqueeze(1))
    referenced = (counts > 0).unsqueeze(1)
    return torch.where(referenced, centers - center_lr * delta, centers)


def combined_loss(
    logits: torch.Tensor,
    emb_prenorm: torch.Tensor,
    labels: torch.Tensor,
    centers: torch.Tensor | None,
    cfg: LossConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Total = softmax + triplet + lambda * center, with a per-term breakdown.

    The softmax term sees the classifier logits; triplet and center terms see
    the pre-normalization embeddings. With lambda_center == 0 the centers are
    never touched (``centers`` may be None).
    """
    eps = cfg.epsilon if cfg.epsilon is not None else 1.0 / logits.shape[1]
    l_softmax = smoothed_softmax_loss(logits, labels, eps, normalize=cfg.normalize_smoothing)
    l_triplet = batch_hard_triplet_loss(emb_prenorm, labels, cfg.margin)
    if cfg.lambda_center == 0:
        l_center = torch.zeros((), dtype=l_softmax.dtype, device=l_softmax.device)
    else:
        if centers is None:
            raise ConfigError("lambda_center > 0 requires centers")
        l_center = center_loss(emb_prenorm, labels, centers)
    total = l_softmax + l_triplet + cfg.lambda_center * l_center
    breakdown = {
        "softmax": float(l_softmax),
        "triplet": float(l_triplet),
        "center": float(l_center),
        "total": float(total),
    }
    return total, breakdown


def _check_labels(labels: torch.Tensor, batch: int, num_classes: int) -> None:
    if labels.dim() != 1 or labels.shape[0] != batch:
        raise ConfigError(f"labels must be a length-{batch} vector, got {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ConfigError(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
