"""Training objective: batch-hard triplet + per-head cross-entropy + penalty.

The triplet operates on the concatenation of the raw global feature and the
part vectors (unnormalised Euclidean distances); cross-entropy heads see the
BN-necked global feature and the reduced part features.
"""

import torch
import torch.nn.functional as F

from .config import LossConfig


class NumericalError(RuntimeError):
    """A loss component went non-finite; carries the component name."""

    def __init__(self, component, value):
        super().__init__(f"loss component {component!r} is non-finite ({value})")
        self.component = component


def triplet_feature(global_feat, part_feats):
    """Concatenate [global, part_1, ..., part_N] per sample."""
    single = global_feat.dim() == 1
    if single:
        global_feat = global_feat.unsqueeze(0)
        part_feats = part_feats.unsqueeze(0)
    if part_feats.dim() != 3:
        raise ValueError("part features must be (B x) N x D")
    out = torch.cat([global_feat, part_feats.reshape(part_feats.shape[0], -1)], dim=1)
    return out.squeeze(0) if single else out


def pairwise_euclidean(features):
    sq = features.pow(2).sum(dim=1)
    d2 = sq.unsqueeze(1) + sq.unsqueeze(0) - 2.0 * features @ features.t()
    return d2.clamp(min=1e-12).sqrt()


def batch_hard_triplet(features, labels, cfg: LossConfig):
    """Mean over anchors of hinge(hardest-positive - hardest-negative + margin)."""
    if features.dim() != 2:
        raise ValueError("features must be B x D")
    labels = torch.as_tensor(labels, device=features.device)
    b = features.shape[0]
    if b < 4:
        raise ValueError(f"batch too small for triplet mining (got {b}, need >= 4)")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    counts = same.sum(dim=1)
    if int(counts.min()) < 2:
        bad = labels[counts < 2][0]
        raise ValueError(f"identity {int(bad)} has a single instance in the batch")
    dist = pairwise_euclidean(features)
    eye = torch.eye(b, dtype=torch.bool, device=features.device)
    pos_mask = same & ~eye
    neg_mask = ~same
    if not neg_mask.any():
        raise ValueError("batch contains a single identity; no negatives to mine")
    hardest_pos = dist.masked_fill(~pos_mask, float("-inf")).max(dim=1).values
    hardest_neg = dist.masked_fill(~neg_mask, float("inf")).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + cfg.margin).mean()


def ce_head(logits, labels, label_smoothing=0.0):
    labels = torch.as_tensor(labels, device=logits.device)
    if labels.dim() == 0:
        logits, labels = logits.unsqueeze(0), labels.unsqueeze(0)
    k = logits.shape[-1]
    if int(labels.min()) < 0 or int(labels.max()) >= k:
        raise ValueError(f"label out of range for {k} classes")
    return F.cross_entropy(logits, labels, label_smoothing=label_smoothing)


def total_loss(outputs, labels, cor_value, cfg: LossConfig):
    """Weighted sum of the triplet, the 1 + N cross-entropies and the penalty.

    Returns (total, breakdown). Any non-finite component aborts with a
    diagnostic naming it.
    """
    labels = torch.as_tensor(labels)
    breakdown = {}
    feats = triplet_feature(outputs.global_feat, outputs.part_feats)
    breakdown["triplet"] = batch_hard_triplet(feats, labels, cfg)
    breakdown["ce_global"] = ce_head(outputs.global_logits, labels, cfg.label_smoothing)
    for n, logits in enumerate(outputs.part_logits):
        breakdown[f"ce_part_{n}"] = ce_head(logits, labels, cfg.label_smoothing)
    if cor_value is not None:
        breakdown["cor"] = cor_value if torch.is_tensor(cor_value) else torch.tensor(float(cor_value))
    for name, value in breakdown.items():
        if not torch.isfinite(value):
            raise NumericalError(name, float(value))
    total = cfg.alpha * breakdown["triplet"]
    total = total + breakdown["ce_global"]
    for n in range(len(outputs.part_logits)):
        total = total + breakdown[f"ce_part_{n}"]
    if "cor" in breakdown:
        total = total + breakdown["cor"]
    breakdown["total"] = total
    return total, breakdown
