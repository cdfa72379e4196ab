"""Loss terms of the two training stages and their weighted composition."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import torch
import torch.nn.functional as F

from .errors import BatchCompositionError, ConfigurationError, NumericError


class Metric(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    COSINE = "cosine"


@dataclass(frozen=True)
class LossConfig:
    tau: float = 10.0
    alpha: float = 1e-1
    beta: float = 1e-4
    enable_ce: bool = True
    enable_tr: bool = True
    enable_kd: bool = True
    enable_dp: bool = True
    distance: Metric = Metric.EUCLIDEAN

    def __post_init__(self):
        object.__setattr__(self, "distance", Metric(self.distance))
        if not self.tau > 0:
            raise ConfigurationError("tau must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if not (self.enable_ce or self.enable_tr or self.enable_kd or self.enable_dp):
            raise ConfigurationError("at least one loss term must be enabled")


def pairwise_distance_matrix(x: torch.Tensor, metric=Metric.EUCLIDEAN) -> torch.Tensor:
    """(B, D) -> (B, B) symmetric distances with an exactly zero diagonal."""
    x = torch.as_tensor(x)
    if x.dim() != 2 or x.shape[0] < 1:
        raise ValueError(f"expected a (B, D) matrix with B >= 1, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise NumericError("embeddings contain NaN or infinite values")
    metric = Metric(metric)
    eye = torch.eye(x.shape[0], dtype=torch.bool, device=x.device)
    if metric == Metric.EUCLIDEAN:
        sq = ((x[:, None, :] - x[None, :, :]) ** 2).sum(-1)
        pos = sq > 0
        # sqrt has an infinite slope at 0; route zero entries around it
        dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    else:
        u = F.normalize(x, dim=1, eps=1e-12)
        dist = (1.0 - u @ u.t()).clamp_min(0.0)
        dist = 0.5 * (dist + dist.t())
    return dist.masked_fill(eye, 0.0)


def cross_entropy_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() != 2 or labels.shape != logits.shape[:1]:
        raise ValueError("logits must be (B, C) and labels (B,)")
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    return F.cross_entropy(logits, labels)


def _hardest(dist: torch.Tensor, labels: torch.Tensor):
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool, device=dist.device)
    pos_mask = same & ~eye
    d_ap = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    d_an = dist.masked_fill(same, float("inf")).min(dim=1).values
    return d_ap, d_an


def check_triplet_batch(labels: torch.Tensor) -> None:
    uniq, counts = torch.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise BatchCompositionError("batch-hard mining needs at least two identities")
    if (counts < 2).any():
        lone = uniq[counts < 2].tolist()
        raise BatchCompositionError(f"identities with a single sample in the batch: {lone}")


def batch_hard_triplet_loss(embeddings: torch.Tensor, labels, metric=Metric.EUCLIDEAN) -> torch.Tensor:
    """Soft-margin batch-hard triplet loss, averaged over anchors."""
    labels = torch.as_tensor(labels)
    check_triplet_batch(labels)
    dist = pairwise_distance_matrix(embeddings, metric)
    d_ap, d_an = _hardest(dist, labels)
    return F.softplus(d_ap - d_an).mean()


def knowledge_distillation_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, tau=10.0) -> torch.Tensor:
    """tau^2 * KL(softmax(h_T / tau) || softmax(h_S / tau)), batch mean.

    The teacher side is detached, so the gradient equals that of the
    cross-entropy against the teacher distribution.
    """
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"shape mismatch {tuple(teacher_logits.shape)} vs {tuple(student_logits.shape)}")
    if not tau > 0:
        raise ValueError("tau must be positive")
    log_p = F.log_softmax(teacher_logits.detach() / tau, dim=1)
    log_q = F.log_softmax(student_logits / tau, dim=1)
    kl = (log_p.exp() * (log_p - log_q)).sum(dim=1)
    return tau**2 * kl.mean()


def distance_preservation_loss(teacher_emb: torch.Tensor, student_emb: torch.Tensor, metric=Metric.EUCLIDEAN) -> torch.Tensor:
    """Sum over unordered pairs of squared teacher/student distance gaps."""
    if teacher_emb.shape[0] != student_emb.shape[0]:
        raise ValueError("teacher and student batches differ in size")
    if teacher_emb.shape[0] < 2:
        raise ValueError("distance preservation needs a batch of at least 2")
    d_t = pairwise_distance_matrix(teacher_emb.detach(), metric)
    d_s = pairwise_distance_matrix(student_emb, metric)
    iu = torch.triu_indices(len(d_s), len(d_s), offset=1, device=d_s.device)
    gap = d_t[iu[0], iu[1]] - d_s[iu[0], iu[1]]
    return (gap**2).sum()


@dataclass
class LossInputs:
    logits: Optional[torch.Tensor] = None
    labels: Optional[torch.Tensor] = None
    triplet_features: Optional[torch.Tensor] = None
    teacher_logits: Optional[torch.Tensor] = None
    teacher_features: Optional[torch.Tensor] = None
    student_features: Optional[torch.Tensor] = None


TERMS = ("ce", "tr", "kd", "dp")


def vkd_objective(parts: LossInputs, cfg: LossConfig) -> Tuple[torch.Tensor, Dict[str, float]]:
    """CE + TR + alpha * KD + beta * DP over the enabled terms.

    The breakdown holds unweighted term values (0.0 for disabled terms) plus
    the weighted ``total``.
    """
    if not (cfg.enable_ce or cfg.enable_tr or cfg.enable_kd or cfg.enable_dp):
        raise ConfigurationError("at least one loss term must be enabled")
    terms = {}
    if cfg.enable_ce:
        terms["ce"] = (1.0, cross_entropy_loss(parts.logits, parts.labels))
    if cfg.enable_tr:
        terms["tr"] = (1.0, batch_hard_triplet_loss(parts.triplet_features, parts.labels, cfg.distance))
    if cfg.enable_kd:
        terms["kd"] = (cfg.alpha, knowledge_distillation_loss(parts.teacher_logits, parts.logits, cfg.tau))
    if cfg.enable_dp:
        terms["dp"] = (cfg.beta, distance_preservation_loss(parts.teacher_features, parts.student_features, cfg.distance))
    total = sum(w * v for w, v in terms.values())
    breakdown = {name: float(terms[name][1].detach()) if name in terms else 0.0 for name in TERMS}
    breakdown["total"] = float(total.detach())
    return total, breakdown
