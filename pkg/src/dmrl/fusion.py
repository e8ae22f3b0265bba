"""Order-invariant fusion of anatomical representations across available modalities."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .errors import ShapeError

STATS = ("max", "mean", "min")


def fuse(reps: Sequence[torch.Tensor] | torch.Tensor) -> torch.Tensor:
    """Max, mean and min over the modality axis, concatenated channel-wise.

    ``reps`` is a list of ``(..., A, H, W)`` tensors (one per available modality)
    or a stacked ``(k, ..., A, H, W)`` tensor. The output has ``3 * A`` channels
    ordered ``(max[0..A-1], mean[0..A-1], min[0..A-1])`` regardless of ``k``.
    """
    if isinstance(reps, torch.Tensor):
        stacked = reps
        if stacked.shape[0] == 0:
            raise ValueError("fuse needs at least one representation")
    else:
        if len(reps) == 0:
            raise ValueError("fuse needs at least one representation")
        shapes = {tuple(r.shape) for r in reps}
        if len(shapes) != 1:
            raise ShapeError(f"representations differ in shape: {sorted(shapes)}")
        stacked = torch.stack(list(reps))
    # +0.0 turns -0.0 into +0.0 so ties sort identically; sorting makes the
    # summation order, and hence the mean, independent of input order
    ordered, _ = torch.sort(stacked + 0.0, dim=0)
    mx = ordered[-1]
    mn = ordered[0]
    mean = _bounded(ordered.double().sum(dim=0) / ordered.shape[0], mn, mx)
    return torch.cat([mx, mean, mn], dim=-3)


def _bounded(mean64: torch.Tensor, lo: torch.Tensor, hi: torch.Tensor) -> torch.Tensor:
    # float64 accumulation, clamped so rounding can never leave [min, max]
    return torch.minimum(torch.maximum(mean64.to(lo.dtype), lo), hi)


def fuse_np(reps: Sequence[np.ndarray]) -> np.ndarray:
    return fuse([torch.from_numpy(np.asarray(r)) for r in reps]).numpy()


def fuse_subset(s: torch.Tensor, available: Sequence[int]) -> torch.Tensor:
    """Fuse ``s[:, available]`` for a batch ``s`` of shape ``(B, m, A, H, W)``."""
    if len(available) == 0:
        raise ValueError("at least one modality must be available")
    idx = torch.as_tensor(sorted(available), dtype=torch.long)
    return fuse(s[:, idx].transpose(0, 1))


def fuse_masked(s: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-sample fusion with a boolean availability mask ``(B, m)``.

    Unavailable modalities are excluded from all three statistics. Every row
    of ``mask`` needs at least one ``True``.
    """
    if not bool(mask.any(dim=1).all()):
        raise ValueError("every sample needs at least one available modality")
    mk = mask[:, :, None, None, None].to(s.dtype)
    big = torch.finfo(s.dtype).max
    mx = torch.where(mk > 0, s, torch.full_like(s, -big)).amax(dim=1)
    mn = torch.where(mk > 0, s, torch.full_like(s, big)).amin(dim=1)
    mean = _bounded((s * mk).double().sum(dim=1) / mk.double().sum(dim=1), mn, mx)
    return torch.cat([mx, mean, mn], dim=1)
