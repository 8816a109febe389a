"""Position and channel self-attention blocks.

Both modules are residual with a scalar gate initialised to zero, so a fresh
block is the identity map and training can open it gradually.
"""

import torch
import torch.nn as nn


def _check_finite(x, name):
    if not torch.isfinite(x).all():
        raise ValueError(f"{name} contains non-finite values")


def _as_batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"expected a CxHxW or BxCxHxW map, got shape {tuple(x.shape)}")


class PositionAttention(nn.Module):
    """Reweighs each spatial position by its affinity to every other position.

    Query/key project the input to channels/reduction dims, value keeps the
    full channel count; the S x S affinity (S = H*W) is softmax-normalised so
    the weights attending to each output position sum to one.
    """

    def __init__(self, channels, reduction=8):
        super().__init__()
        if channels % reduction != 0 or channels // reduction < 1:
            raise ValueError(f"channels ({channels}) must be divisible by reduction ({reduction})")
        self.channels = channels
        self.reduction = reduction
        inner = channels // reduction
        self.query_proj = nn.Conv2d(channels, inner, 1, bias=False)
        self.key_proj = nn.Conv2d(channels, inner, 1, bias=False)
        self.value_proj = nn.Conv2d(channels, channels, 1, bias=False)
        self.gate = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        xb, squeeze = _as_batched(x)
        _check_finite(xb, "position attention input")
        b, c, h, w = xb.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        s = h * w
        q = self.query_proj(xb).reshape(b, -1, s)
        k = self.key_proj(xb).reshape(b, -1, s)
        v = self.value_proj(xb).reshape(b, c, s)
        affinity = torch.bmm(q.transpose(1, 2), k)        # b x S x S, [i, j] = q_i . k_j
        weights = torch.softmax(affinity, dim=1)          # each output column sums to 1
        attended = torch.bmm(v, weights).reshape(b, c, h, w)
        out = xb + self.gate * attended
        return out.squeeze(0) if squeeze else out


class ChannelAttention(nn.Module):
    """Projection-free channel reweighing from the channel Gram matrix."""

    def __init__(self):
        super().__init__()
        self.gate = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        xb, squeeze = _as_batched(x)
        _check_finite(xb, "channel attention input")
        b, c, h, w = xb.shape
        flat = xb.reshape(b, c, h * w)
        affinity = torch.bmm(flat, flat.transpose(1, 2))  # b x C x C
        weights = torch.softmax(affinity, dim=2)          # each output row sums to 1
        attended = torch.bmm(weights, flat).reshape(b, c, h, w)
        out = xb + self.gate * attended
        return out.squeeze(0) if squeeze else out


class AttentionBlock(nn.Module):
    """Position attention followed by channel attention, shape preserving."""

    def __init__(self, channels, reduction=8):
        super().__init__()
        self.position = PositionAttention(channels, reduction)
        self.channel = ChannelAttention()

    def forward(self, x):
        return self.channel(self.position(x))


def pam_forward(x, module: PositionAttention):
    return module(x)


def cam_forward(x, module: ChannelAttention):
    return module(x)


def attention_block(x, module: AttentionBlock):
    return module(x)
