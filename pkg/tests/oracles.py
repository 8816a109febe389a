"""Independent brute-force reference implementations.

Everything here is deliberately written with plain loops and numpy so it
shares no code path with the package: dense attention, explicit
convolutions, exhaustive triplet mining, full eigendecompositions and a
from-the-definition retrieval scorer.
"""

import numpy as np


def softmax_cols(a):
    e = np.exp(a - a.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def softmax_rows(a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def pam_oracle(x, w_query, w_key, w_value, gamma):
    """Dense position attention: x is CxHxW, weights are (out, in) matrices."""
    c, h, w = x.shape
    flat = x.reshape(c, h * w)
    q = w_query @ flat
    k = w_key @ flat
    v = w_value @ flat
    affinity = q.T @ k                       # S x S, [i, j] = q_i . k_j
    attended = v @ softmax_cols(affinity)    # weights over sources i sum to 1
    return (flat + gamma * attended).reshape(c, h, w)


def cam_oracle(x, gamma):
    c, h, w = x.shape
    flat = x.reshape(c, h * w)
    affinity = flat @ flat.T
    attended = softmax_rows(affinity) @ flat
    return (flat + gamma * attended).reshape(c, h, w)


def conv2d_oracle(x, weight, groups=1, padding=0):
    """Direct convolution, x: CinxHxW, weight: Cout x Cin/g x kh x kw."""
    cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    assert cin == cin_g * groups
    cout_g = cout // groups
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh, ow = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((cout, oh, ow), dtype=x.dtype)
    for oc in range(cout):
        g = oc // cout_g
        sl = slice(g * cin_g, (g + 1) * cin_g)
        for i in range(oh):
            for j in range(ow):
                out[oc, i, j] = (xp[sl, i:i + kh, j:j + kw] * weight[oc]).sum()
    return out


def batchnorm_oracle(x, weight, bias, running_mean, running_var, eps=1e-5):
    """Eval-mode BN over the channel axis of CxHxW (or a 1D vector)."""
    shape = (-1,) + (1,) * (x.ndim - 1)
    return ((x - running_mean.reshape(shape)) / np.sqrt(running_var.reshape(shape) + eps)
            * weight.reshape(shape) + bias.reshape(shape))


def maxpool2_oracle(x, kernel=2):
    c, h, w = x.shape
    out = np.zeros((c, h // kernel, w // kernel), dtype=x.dtype)
    for i in range(h // kernel):
        for j in range(w // kernel):
            out[:, i, j] = x[:, i * kernel:(i + 1) * kernel, j * kernel:(j + 1) * kernel].max(axis=(1, 2))
    return out


def upsample_nearest2_oracle(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def stripe_mean_oracle(x, parts):
    c, h, w = x.shape
    step = h // parts
    return np.stack([x[:, n * step:(n + 1) * step].mean(axis=(1, 2)) for n in range(parts)])


def eig_extremes_oracle(mat):
    vals = np.linalg.eigvalsh(mat)
    return float(vals[-1]), float(vals[0])


def batch_hard_triplet_oracle(features, labels, margin):
    """Exhaustive per-anchor mining over every positive/negative pair."""
    b = len(features)
    def dist(i, j):
        return float(np.sqrt(((features[i] - features[j]) ** 2).sum()))
    losses = []
    for a in range(b):
        worst = -np.inf
        for p in range(b):
            if p == a or labels[p] != labels[a]:
                continue
            for n in range(b):
                if labels[n] == labels[a]:
                    continue
                worst = max(worst, dist(a, p) - dist(a, n))
        losses.append(max(0.0, worst + margin))
    return float(np.mean(losses))


def cross_entropy_oracle(logits, label, smoothing=0.0):
    z = np.asarray(logits, dtype=np.float64)
    logp = z - (np.log(np.exp(z - z.max()).sum()) + z.max())
    nll = -logp[label]
    if smoothing == 0.0:
        return float(nll)
    return float((1 - smoothing) * nll + smoothing * (-logp.mean()))


def retrieval_oracle(dist, q_pids, q_camids, g_pids, g_camids, max_rank=10):
    """mAP and CMC straight from the definitions, plain python only."""
    num_gallery = len(g_pids)
    aps = []
    cmc = [0] * max_rank
    for qi in range(len(q_pids)):
        order = sorted(range(num_gallery), key=lambda j: (dist[qi][j], j))
        kept = [j for j in order
                if g_pids[j] != -1
                and not (g_pids[j] == q_pids[qi] and g_camids[j] == q_camids[qi])]
        hits = [rank for rank, j in enumerate(kept) if g_pids[j] == q_pids[qi]]
        if not hits:
            continue
        precisions = []
        seen = 0
        for rank, j in enumerate(kept):
            if g_pids[j] == q_pids[qi]:
                seen += 1
                precisions.append(seen / (rank + 1))
        aps.append(sum(precisions) / len(precisions))
        if hits[0] < max_rank:
            for k in range(hits[0], max_rank):
                cmc[k] += 1
    if not aps:
        raise ValueError("no valid query")
    return sum(aps) / len(aps), [c / len(aps) for c in cmc]


def finite_difference(fn, tensor, step=1e-3):
    """Central finite differences of a scalar torch function w.r.t. a tensor."""
    import torch

    grad = np.zeros(tensor.numel())
    flat = tensor.detach().reshape(-1)
    for i in range(flat.numel()):
        orig = float(flat[i])
        with torch.no_grad():
            flat[i] = orig + step
            up = float(fn())
            flat[i] = orig - step
            down = float(fn())
            flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad.reshape(tuple(tensor.shape))


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))
