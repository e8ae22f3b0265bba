"""Training objectives: reconstruction, latent consistency and the margin similarity loss."""

from __future__ import annotations

import logging
import math

import torch
import torch.nn.functional as F

from .config import LossWeights
from .errors import TrainingDivergenceError
from .nets import BatchBundle

log = logging.getLogger(__name__)

TERMS = ("L_self", "L_cross", "L_latent", "L_sim_s", "L_sim_z")


class _ZeroNormCounter:
    count = 0


zero_norm_pairs = _ZeroNormCounter()


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis; pairs with a zero-norm vector give 0."""
    dot = (a * b).sum(-1)
    den = a.norm(dim=-1) * b.norm(dim=-1)
    zero = den == 0
    if bool(zero.any()):
        n = int(zero.sum())
        zero_norm_pairs.count += n
        log.warning("cosine: %d pair(s) with a zero-norm vector, using 0", n)
    return torch.where(zero, torch.zeros_like(dot), dot / torch.where(zero, torch.ones_like(den), den))


def margin_hinge(anchor, positive, negative, margin: float) -> torch.Tensor:
    """``max(0, margin - cos(anchor, positive) + cos(anchor, negative))``."""
    return F.relu(margin - cosine(anchor, positive) + cosine(anchor, negative))


def pool_features(s: torch.Tensor, pool_size: int = 8) -> torch.Tensor:
    """Max-pool each channel of ``s[..., A, H, W]`` with a ``pool_size`` window and flatten."""
    lead = s.shape[:-3]
    pooled = F.max_pool2d(s.reshape(-1, *s.shape[-3:]), pool_size, pool_size)
    return pooled.reshape(*lead, -1)


def recon_losses(b: BatchBundle, w: LossWeights) -> tuple[torch.Tensor, torch.Tensor]:
    m = b.m
    self_terms = [(b.xt[:, i, i] - b.x[:, i]).abs().mean() for i in range(m)]
    cross_terms = [(b.xt[:, i, j] - b.x[:, j]).abs().mean() for i in range(m) for j in range(m) if i != j]
    l_self = torch.stack(self_terms).sum() / m
    l_cross = w.lambda_c / (m * m - m) * torch.stack(cross_terms).sum()
    return l_self, l_cross


def latent_consistency(b: BatchBundle, w: LossWeights) -> torch.Tensor:
    # zt[:, j, i] is re-encoded from D(s_j, z_i) and is compared against z_i
    diff = (b.zt - b.z[:, None, :, :]).abs().mean(dim=(0, 3))
    return w.lambda_l / b.m**2 * diff.sum()


def similarity_loss(
    b: BatchBundle, w: LossWeights, pool_size: int = 8, exclude_diagonal: bool = False
) -> tuple[torch.Tensor, torch.Tensor]:
    """Margin loss on anatomy (pooled ``s``) and modality (``z``) codes.

    For subject ``p`` with partner ``q``, modalities ``i, j``:

    * anatomy:  ``max(0, a_s - cos(f(s_i^p), f(s_j^p)) + cos(f(s_i^p), f(s_i^q)))``
    * modality: ``max(0, a_z - cos(z_i^p, z_i^q) + cos(z_i^p, z_j^p))``

    Each hinge is averaged over subjects and summed over ``(i, j)`` with weight
    ``lambda / m**2``. With ``exclude_diagonal`` the ``i == j`` terms are dropped
    and the weight becomes ``lambda / (m**2 - m)``.
    """
    m = b.m
    q = b.partner
    fs = pool_features(b.s, pool_size)  # (B, m, D)
    s_pos = cosine(fs[:, :, None], fs[:, None, :])  # [p, i, j]
    s_neg = cosine(fs, fs[q])  # [p, i]
    s_h = F.relu(w.alpha_s - s_pos + s_neg[:, :, None])

    z = b.z
    z_pos = cosine(z, z[q])  # [p, i]
    z_neg = cosine(z[:, :, None], z[:, None, :])  # [p, i, j]
    z_h = F.relu(w.alpha_z - z_pos[:, :, None] + z_neg)

    if exclude_diagonal:
        keep = ~torch.eye(m, dtype=torch.bool)
        return (
            w.lambda_s / (m * m - m) * s_h.mean(0)[keep].sum(),
            w.lambda_z / (m * m - m) * z_h.mean(0)[keep].sum(),
        )
    return w.lambda_s / m**2 * s_h.mean(0).sum(), w.lambda_z / m**2 * z_h.mean(0).sum()


def total_loss(
    b: BatchBundle, w: LossWeights, pool_size: int = 8, exclude_diagonal: bool = False
) -> tuple[torch.Tensor, dict[str, float]]:
    """Unweighted sum of all terms (the lambdas live inside each term).

    Returns the scalar loss and a float breakdown including ``total``.
    """
    l_self, l_cross = recon_losses(b, w)
    l_lat = latent_consistency(b, w)
    if w.lambda_s == 0 and w.lambda_z == 0:
        zero = l_self.new_zeros(())
        l_ss, l_sz = zero, zero
    else:
        l_ss, l_sz = similarity_loss(b, w, pool_size, exclude_diagonal)
    terms = dict(zip(TERMS, (l_self, l_cross, l_lat, l_ss, l_sz)))
    breakdown = {}
    for name, t in terms.items():
        v = float(t.detach())
        if not math.isfinite(v):
            raise TrainingDivergenceError(name, v)
        breakdown[name] = v
    total = l_self + l_cross + l_lat + l_ss + l_sz
    breakdown["total"] = float(total.detach())
    return total, breakdown
