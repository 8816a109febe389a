"""Full dual-branch model: global branch + pyramid branch + classifier heads.

Inference features are the L2-normalised concatenation of the BN-necked
global feature and the part vectors; training additionally exposes the raw
global feature, the reduced part features and per-head logits.
"""

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import GlobalBranch, kaiming_init
from .config import FUSION_WIRING, ModelConfig
from .pyramid import PyramidBranch


@dataclass
class ModelOutputs:
    global_feat: torch.Tensor            # B x 2048 (pre-BN, triplet side)
    global_feat_bn: torch.Tensor         # B x 2048 (post-BN, classifier/inference side)
    part_feats: torch.Tensor | None      # B x N x 1024
    part_feats_reduced: torch.Tensor | None  # B x N x 256
    stage2_map: torch.Tensor             # post-attention backbone tap
    lateral_map: torch.Tensor | None     # post-attention shallow lateral
    stage4_map: torch.Tensor             # last backbone stage, pre-pooling
    fpb_map: torch.Tensor | None         # recovered pyramid map, pre-pooling
    global_logits: torch.Tensor | None
    part_logits: list


class ReidModel(nn.Module):
    fusion_wiring = FUSION_WIRING

    def __init__(self, cfg: ModelConfig, num_identities=None, expected_input_hw=None):
        super().__init__()
        self.cfg = cfg
        self.num_identities = num_identities
        self.global_branch = GlobalBranch(cfg.backbone, expected_input_hw)
        self.pyramid = PyramidBranch(cfg.fpb) if cfg.fpb.enabled else None
        if num_identities is not None:
            if num_identities < 2:
                raise ValueError("need at least two identities for classification heads")
            self.global_head = nn.Linear(2048, num_identities, bias=False)
            parts = cfg.fpb.parts if cfg.fpb.enabled else 0
            self.part_heads = nn.ModuleList(
                nn.Linear(cfg.fpb.reduced_dim, num_identities, bias=False) for _ in range(parts)
            )
        else:
            self.global_head = None
            self.part_heads = nn.ModuleList()
        # He init for everything added on top of the backbone.
        for mod in self._addition_modules().values():
            kaiming_init(mod)
        if self.global_head is not None:
            kaiming_init(self.global_head)
            kaiming_init(self.part_heads)

    def _addition_modules(self):
        mods = {}
        if self.global_branch.stage2_attention is not None:
            mods["stage2_attention"] = self.global_branch.stage2_attention
        if self.pyramid is not None:
            mods["pyramid_branch"] = self.pyramid
        mods["bnneck"] = self.global_branch.bnneck
        return mods

    def forward(self, images) -> ModelOutputs:
        g = self.global_branch(images)
        part_feats = part_feats_reduced = lateral_map = fpb_map = None
        part_logits = []
        if self.pyramid is not None:
            part_feats, part_feats_reduced, lateral_map, fpb_map = self.pyramid(
                g.tap_stage2, g.tap_stage3)
            if self.part_heads:
                part_logits = [
                    head(part_feats_reduced[:, n]) for n, head in enumerate(self.part_heads)
                ]
        global_logits = self.global_head(g.global_feat_bn) if self.global_head is not None else None
        return ModelOutputs(
            global_feat=g.global_feat,
            global_feat_bn=g.global_feat_bn,
            part_feats=part_feats,
            part_feats_reduced=part_feats_reduced,
            stage2_map=g.tap_stage2,
            lateral_map=lateral_map,
            stage4_map=g.stage4_map,
            fpb_map=fpb_map,
            global_logits=global_logits,
            part_logits=part_logits,
        )

    def inference_features(self, images):
        """Deterministic matching feature: normalised [bn-global, parts...]."""
        out = self.forward(images)
        pieces = [out.global_feat_bn]
        if out.part_feats is not None:
            pieces.append(out.part_feats.reshape(out.part_feats.shape[0], -1))
        return F.normalize(torch.cat(pieces, dim=1), dim=1)

    @property
    def feature_dim(self):
        dim = 2048
        if self.pyramid is not None:
            dim += self.cfg.fpb.parts * self.cfg.fpb.out_channels
        return dim


def _count(module):
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def parameter_table(model: ReidModel) -> dict:
    """Learnable parameter counts by component.

    Counting rule: learnable parameters only (requires_grad, no BN running
    stats); the backbone is the complete standard classification network
    including its own class head; the identity classifier heads are listed
    but excluded from the totals because their size tracks the dataset.
    """
    rows = {"backbone": _count(model.global_branch.backbone)}
    rows.update({name: _count(mod) for name, mod in model._addition_modules().items()})
    additions = sum(v for k, v in rows.items() if k != "backbone")
    heads = 0
    if model.global_head is not None:
        heads = _count(model.global_head) + _count(model.part_heads)
    return {
        "components": rows,
        "backbone_only": rows["backbone"],
        "additions": additions,
        "classifier_heads_excluded": heads,
        "total_excluding_heads": rows["backbone"] + additions,
    }


def format_parameter_table(model: ReidModel) -> str:
    table = parameter_table(model)
    lines = [
        "learnable parameters (BN running stats not counted; identity",
        "classifier heads excluded from totals, listed for reference)",
        "-" * 58,
    ]
    for name, count in table["components"].items():
        lines.append(f"{name:<28s} {count:>12,d}")
    lines.append("-" * 58)
    lines.append(f"{'backbone only':<28s} {table['backbone_only']:>12,d}")
    lines.append(f"{'additions over backbone':<28s} {table['additions']:>12,d}")
    lines.append(f"{'total (heads excluded)':<28s} {table['total_excluding_heads']:>12,d}")
    lines.append(f"{'identity heads (excluded)':<28s} {table['classifier_heads_excluded']:>12,d}")
    return "\n".join(lines)


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, optimizer=None, epoch=None, step=None,
                    config_echo=None, rng_state=None, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": config_echo,
        "num_identities": model.num_identities,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "epoch": epoch,
        "step": step,
        "rng_state": rng_state,
        "extra": extra,
    }
    torch.save(payload, path)


def load_checkpoint(path, model=None, optimizer=None):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version!r}")
    if model is not None:
        model.load_state_dict(payload["model_state"])
    if optimizer is not None and payload["optimizer_state"] is not None:
        optimizer.load_state_dict(payload["optimizer_state"])
    return payload
