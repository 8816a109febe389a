"""Global branch: ResNet backbone with intermediate taps, GAP and a BN neck.

The backbone is a stock torchvision ResNet (its own classification head kept
as dormant parameters so the module IS the standard network) with the final
down-sampling stride set to 1, which doubles the last stage's spatial extent
without touching the parameter count.
"""

import os
from dataclasses import dataclass

import torch
import torch.nn as nn
import torchvision

from .attention import AttentionBlock
from .config import BackboneConfig

STAGE_CHANNELS = (256, 512, 1024, 2048)


def kaiming_init(module):
    """He initialisation for conv/linear weights, identity-style BN init."""
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.kaiming_normal_(m.weight, mode="fan_out")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm1d)):
            if m.affine:
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)


@dataclass
class GlobalOutputs:
    global_feat: torch.Tensor      # B x 2048, spatial mean of the last stage
    global_feat_bn: torch.Tensor   # B x 2048, BN-necked version
    tap_stage2: torch.Tensor       # B x 512 x H/8 x W/8, post-attention when enabled
    tap_stage3: torch.Tensor       # B x 1024 x H/16 x W/16
    stage4_map: torch.Tensor       # B x 2048 x H/16 x W/16 with last stride 1


def build_resnet(cfg: BackboneConfig) -> nn.Module:
    cfg.validate()
    factory = {"resnet50": torchvision.models.resnet50,
               "resnet101": torchvision.models.resnet101}[cfg.variant]
    net = factory(weights=None)
    if cfg.last_stride == 1:
        net.layer4[0].conv2.stride = (1, 1)
        net.layer4[0].downsample[0].stride = (1, 1)
    if cfg.pretrained_weights_path:
        if not os.path.isfile(cfg.pretrained_weights_path):
            raise FileNotFoundError(
                f"backbone weights file not found: {cfg.pretrained_weights_path}"
            )
        state = torch.load(cfg.pretrained_weights_path, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    return net


class BnNeck(nn.Module):
    """1D batch norm separating the metric feature from the classifier feature.

    The shift is frozen at zero; only the per-dimension scale is learned.
    """

    def __init__(self, dim=2048):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim)
        nn.init.ones_(self.bn.weight)
        nn.init.zeros_(self.bn.bias)
        self.bn.bias.requires_grad_(False)

    def forward(self, x):
        return self.bn(x)


class GlobalBranch(nn.Module):
    """Backbone adapter exposing pyramid taps and the pooled global features."""

    def __init__(self, cfg: BackboneConfig, expected_input_hw=None):
        super().__init__()
        self.cfg = cfg
        self.expected_input_hw = tuple(expected_input_hw) if expected_input_hw else None
        self.backbone = build_resnet(cfg)
        self.stage2_attention = AttentionBlock(STAGE_CHANNELS[1]) if cfg.attention_after_stage2 else None
        self.bnneck = BnNeck(STAGE_CHANNELS[3])

    def forward(self, images) -> GlobalOutputs:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValueError(f"expected a Bx3xHxW batch, got shape {tuple(images.shape)}")
        if self.expected_input_hw and tuple(images.shape[2:]) != self.expected_input_hw:
            raise ValueError(
                f"expected {self.expected_input_hw} input, got {tuple(images.shape[2:])}"
            )
        if not torch.isfinite(images).all():
            raise ValueError("image batch contains non-finite values")
        net = self.backbone
        x = net.maxpool(net.relu(net.bn1(net.conv1(images))))
        x = net.layer1(x)
        x = net.layer2(x)
        if self.stage2_attention is not None:
            x = self.stage2_attention(x)
        tap2 = x
        x = net.layer3(x)
        tap3 = x
        stage4 = net.layer4(x)
        global_feat = stage4.mean(dim=(2, 3))
        global_feat_bn = self.bnneck(global_feat)
        return GlobalOutputs(global_feat, global_feat_bn, tap2, tap3, stage4)


def global_classifier(feat_bn, weight):
    """Identity logits from the BN-necked feature; no softmax applied."""
    if feat_bn.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"feature dim {feat_bn.shape[-1]} does not match classifier dim {weight.shape[1]}"
        )
    return feat_bn @ weight.t()
