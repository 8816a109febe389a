"""Two-level bidirectional feature pyramid branch.

Taps from backbone stages 2 and 3 are channel-unified by lateral filters,
fused through one top-down and one bottom-up edge plus per-scale shortcut
edges from the raw taps, then channel-recovered and pooled into horizontal
part vectors. Fusion sums are unweighted; the 3x3 fusion convs and the
shortcut projections are grouped to keep the whole branch lightweight.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attention import AttentionBlock
from .config import FpbConfig


class ConvBnRelu(nn.Module):
    def __init__(self, in_ch, out_ch, kernel=1, groups=1):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2,
                              groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class ShortcutProjection(nn.Module):
    """Grouped 1x1 projection + BN, the residual-style edge from a raw tap."""

    def __init__(self, in_ch, out_ch, groups):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 1, groups=groups, bias=False)
        self.bn = nn.BatchNorm2d(out_ch)

    def forward(self, x):
        return self.bn(self.conv(x))


class FusionBlock(nn.Module):
    """Fixed fusion graph over the two lateral maps and the two raw taps.

    t2 = conv(lat2 + upsample2(lat3))
    o2 = conv(t2 + sc2(raw2))
    t3 = conv(lat3 + maxpool2(o2))
    o3 = conv(t3 + sc3(raw3))
    """

    def __init__(self, inner, raw_channels=(512, 1024), groups=32,
                 shortcut_groups=8, shortcut_edges=True):
        super().__init__()
        self.conv_topdown = ConvBnRelu(inner, inner, 3, groups=groups)
        self.conv_shallow_out = ConvBnRelu(inner, inner, 3, groups=groups)
        self.conv_bottomup = ConvBnRelu(inner, inner, 3, groups=groups)
        self.conv_deep_out = ConvBnRelu(inner, inner, 3, groups=groups)
        if shortcut_edges:
            self.shortcut2 = ShortcutProjection(raw_channels[0], inner, shortcut_groups)
            self.shortcut3 = ShortcutProjection(raw_channels[1], inner, shortcut_groups)
        else:
            self.shortcut2 = None
            self.shortcut3 = None

    def forward(self, lat2, lat3, raw2, raw3):
        if lat2.shape[-2:] != tuple(2 * s for s in lat3.shape[-2:]):
            raise ValueError(
                f"shallow scale {tuple(lat2.shape[-2:])} must be twice the deep "
                f"scale {tuple(lat3.shape[-2:])}"
            )
        up = F.interpolate(lat3, scale_factor=2, mode="nearest")
        t2 = self.conv_topdown(lat2 + up)
        o2 = self.conv_shallow_out(t2 if self.shortcut2 is None else t2 + self.shortcut2(raw2))
        t3 = self.conv_bottomup(lat3 + F.max_pool2d(o2, 2))
        o3 = self.conv_deep_out(t3 if self.shortcut3 is None else t3 + self.shortcut3(raw3))
        return o3


def part_pool(x, parts):
    """Split a map into equal-height stripes and average each to a vector."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    b, c, h, w = x.shape
    if h % parts != 0:
        raise ValueError(f"parts ({parts}) must divide the map height ({h})")
    stripes = x.reshape(b, c, parts, h // parts, w)
    pooled = stripes.mean(dim=(3, 4)).transpose(1, 2)  # b x parts x c
    return pooled.squeeze(0) if single else pooled


class DimReduction(nn.Module):
    """Shared 1x1 reduction head applied to each part vector independently."""

    def __init__(self, in_dim=1024, out_dim=256):
        super().__init__()
        self.proj = nn.Linear(in_dim, out_dim, bias=False)
        self.bn = nn.BatchNorm1d(out_dim)

    def forward(self, part_vectors):
        single = part_vectors.dim() == 1
        if single:
            part_vectors = part_vectors.unsqueeze(0)
        squeeze_parts = part_vectors.dim() == 2
        if squeeze_parts:
            part_vectors = part_vectors.unsqueeze(1)
        b, n, d = part_vectors.shape
        flat = self.proj(part_vectors.reshape(b * n, d))
        out = F.relu(self.bn(flat)).reshape(b, n, -1)
        if squeeze_parts:
            out = out.squeeze(1)
        return out.squeeze(0) if single else out


class PyramidBranch(nn.Module):
    """Lateral filters, attention on the shallow lateral, fusion, recovery,
    part pooling and the shared reduction head."""

    def __init__(self, cfg: FpbConfig, tap_channels=(512, 1024)):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        inner = cfg.inner_channels
        self.lateral_shallow = ConvBnRelu(tap_channels[0], inner, 1)
        self.lateral_deep = ConvBnRelu(tap_channels[1], inner, 1)
        self.lateral_attention = (
            AttentionBlock(inner) if cfg.attention_on_shallow_lateral else None
        )
        self.fusion = FusionBlock(
            inner, tap_channels, groups=cfg.fusion_groups,
            shortcut_groups=cfg.shortcut_groups, shortcut_edges=cfg.shortcut_edges,
        )
        self.recovery = ConvBnRelu(inner, cfg.out_channels, 1)
        self.reduction = DimReduction(cfg.out_channels, cfg.reduced_dim)

    def forward(self, raw2, raw3):
        lat2 = self.lateral_shallow(raw2)
        if self.lateral_attention is not None:
            lat2 = self.lateral_attention(lat2)
        lat3 = self.lateral_deep(raw3)
        fused = self.fusion(lat2, lat3, raw2, raw3)
        recovered = self.recovery(fused)
        part_feats = part_pool(recovered, self.cfg.parts)      # B x N x 1024
        part_feats_reduced = self.reduction(part_feats)        # B x N x 256
        return part_feats, part_feats_reduced, lat2, recovered


def lateral(x, module: ConvBnRelu):
    single = x.dim() == 3
    out = module(x.unsqueeze(0) if single else x)
    return out.squeeze(0) if single else out


def fpb_fuse(lat2, lat3, raw2, raw3, module: FusionBlock):
    single = lat2.dim() == 3
    if single:
        lat2, lat3, raw2, raw3 = (t.unsqueeze(0) for t in (lat2, lat3, raw2, raw3))
    out = module(lat2, lat3, raw2, raw3)
    return out.squeeze(0) if single else out


def recover_channels(fused, module: ConvBnRelu):
    single = fused.dim() == 3
    out = module(fused.unsqueeze(0) if single else fused)
    return out.squeeze(0) if single else out


def reduce_dim(part_vector, module: DimReduction):
    return module(part_vector)
