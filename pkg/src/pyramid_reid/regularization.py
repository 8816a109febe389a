"""Soft orthogonality penalty on feature Gram spectra.

The penalty pushes the spread between the largest and smallest eigenvalue of
X X^T toward zero, flattening the channel correlation spectrum. Extreme
eigenvalues come from plain power iteration so the whole computation stays
differentiable; the smallest one is recovered by iterating on the spectrum
reflected around the largest.
"""

import torch
import torch.nn.functional as F

from .config import SpectralPenaltyConfig

# Fixed seed for the power-iteration start vector: runs are deterministic and
# the start direction is almost surely non-orthogonal to the top eigenvector.
_START_SEED = 20210715


def _start_vector(n, dtype, device):
    gen = torch.Generator()
    gen.manual_seed(_START_SEED + n)
    v = torch.randn(n, generator=gen, dtype=torch.float64).to(dtype=dtype, device=device)
    return v / v.norm()


def _power_iteration(mat, iters, tol):
    v = _start_vector(mat.shape[0], mat.dtype, mat.device)
    eigval = v @ (mat @ v)
    for _ in range(iters):
        w = mat @ v
        norm = w.norm()
        if norm == 0:  # start vector sits in the kernel; eigenvalue is 0
            return torch.zeros((), dtype=mat.dtype, device=mat.device)
        v = w / norm
        new_eigval = v @ (mat @ v)
        done = tol > 0 and abs(float(new_eigval) - float(eigval)) <= tol * max(1.0, abs(float(new_eigval)))
        eigval = new_eigval
        if done:
            break
    return eigval


def _validate_symmetric(mat):
    if mat.dim() != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {tuple(mat.shape)}")
    if not torch.isfinite(mat).all():
        raise ValueError("matrix contains non-finite values")
    scale = float(mat.abs().max().clamp(min=1.0))
    if float((mat - mat.t()).abs().max()) > 1e-6 * scale:
        raise ValueError("matrix is not symmetric within tolerance")


def eig_extremes(mat, cfg: SpectralPenaltyConfig):
    """Largest and smallest eigenvalue of a symmetric PSD matrix.

    Both values are differentiable through the iteration arithmetic.
    """
    _validate_symmetric(mat)
    sym = 0.5 * (mat + mat.t())
    lam_max = _power_iteration(sym, cfg.power_iters, cfg.iter_tolerance)
    eye = torch.eye(sym.shape[0], dtype=sym.dtype, device=sym.device)
    spread = _power_iteration(lam_max.detach() * eye - sym, cfg.power_iters, cfg.iter_tolerance)
    lam_min = lam_max - spread
    return lam_max, lam_min


def gram_penalty(gram, cfg: SpectralPenaltyConfig):
    lam_max, lam_min = eig_extremes(gram, cfg)
    return cfg.beta * (lam_max - lam_min) ** 2


def or_penalty(x, cfg: SpectralPenaltyConfig):
    """beta * (lambda_max - lambda_min)^2 of the Gram of a C x S feature matrix."""
    if x.dim() != 2:
        raise ValueError(f"expected a CxS matrix, got shape {tuple(x.shape)}")
    if x.shape[0] < 2:
        raise ValueError("need at least two channel rows")
    return gram_penalty(x @ x.t(), cfg)


def _pool_to(x, target_hw):
    h, w = x.shape[-2:]
    th, tw = target_hw
    if h % th != 0 or w % tw != 0:
        raise ValueError(
            f"map of size {h}x{w} cannot be max-pooled to {th}x{tw} with integer kernels"
        )
    kh, kw = h // th, w // tw
    if (kh, kw) == (1, 1):
        return x
    return F.max_pool2d(x, (kh, kw))


def concat_gram(map_high, map_low, cfg: SpectralPenaltyConfig):
    """Batch-averaged Gram of the channel concatenation of two pooled maps.

    Maps are max-pooled to a shared scale (the coarser of the two unless the
    config pins one) and concatenated along channels. Accepts single CxHxW
    maps or batches.
    """
    single = map_high.dim() == 3
    if single != (map_low.dim() == 3):
        raise ValueError("both maps must be batched or both single")
    if single:
        map_high, map_low = map_high.unsqueeze(0), map_low.unsqueeze(0)
    if map_high.shape[0] != map_low.shape[0]:
        raise ValueError("batch sizes differ")
    target = cfg.pool_target_scale
    if target is None:
        target = tuple(min(a, b) for a, b in zip(map_high.shape[-2:], map_low.shape[-2:]))
    pooled = [_pool_to(m, target) for m in (map_high, map_low)]
    stacked = torch.cat([m.reshape(m.shape[0], m.shape[1], -1) for m in pooled], dim=1)
    return torch.einsum("bcs,bds->cd", stacked, stacked) / stacked.shape[0]


def cor_penalty(map_high, map_low, cfg: SpectralPenaltyConfig):
    """Joint orthogonality penalty over two branches' concatenated channels."""
    return gram_penalty(concat_gram(map_high, map_low, cfg), cfg)
