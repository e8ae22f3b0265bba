"""Image quality, overlap and representation-structure metrics."""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import numpy as np
import torch
from skimage.metrics import structural_similarity
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score
from sklearn.model_selection import GroupKFold

from . import tensorio
from .errors import ShapeError
from .fusion import fuse_subset
from .objectives import pool_features
from .synthdata import MultiModalSample

log = logging.getLogger(__name__)

PSNR_CAP = 100.0


def _same_shape(x: np.ndarray, y: np.ndarray) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")


def gt_range(gt: np.ndarray) -> float:
    """Default data range for z-scored images: ground-truth max minus min."""
    r = float(np.max(gt) - np.min(gt))
    return r if r > 0 else 1.0


def psnr(x: np.ndarray, y: np.ndarray, data_range: float) -> tuple[float, bool]:
    """Peak signal-to-noise ratio in dB and an ``identical`` flag (capped at 100 dB)."""
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    _same_shape(x, y)
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP, True
    return min(PSNR_CAP, 10.0 * np.log10(data_range**2 / mse)), False


def ssim(x: np.ndarray, y: np.ndarray, data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03.

    Leading singleton axes are squeezed; extra leading axes are treated as
    channels and averaged. ``data_range`` defaults to the range of ``x``.
    """
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    _same_shape(x, y)
    if min(x.shape[-2:]) < 11:
        raise ShapeError(f"ssim needs images of at least 11x11, got {x.shape[-2:]}")
    if data_range is None:
        data_range = gt_range(x)
    x2 = x.reshape(-1, *x.shape[-2:])
    y2 = y.reshape(-1, *y.shape[-2:])
    vals = [
        structural_similarity(
            a, b, data_range=data_range, gaussian_weights=True, sigma=1.5,
            use_sample_covariance=False, K1=0.01, K2=0.03,
        )
        for a, b in zip(x2, y2)
    ]
    return float(np.mean(vals))


def dice(pred: np.ndarray, gt: np.ndarray, class_id: int) -> float:
    pred, gt = np.asarray(pred), np.asarray(gt)
    _same_shape(pred, gt)
    p, g = pred == class_id, gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def dice_counts(pred: np.ndarray, gt: np.ndarray, class_id: int) -> tuple[int, int]:
    """(2|P and G|, |P| + |G|) so overlap can be pooled over many images."""
    p, g = pred == class_id, gt == class_id
    return 2 * int((p & g).sum()), int(p.sum()) + int(g.sum())


# --------------------------------------------------------------------------
# model evaluation


@torch.no_grad()
def encode_samples(model, samples: list[MultiModalSample], batch: int = 16):
    """Anatomy ``s[N, m, A, H, W]`` and modality codes ``z[N, m, Z]`` in eval mode."""
    model.eval()
    imgs = np.stack([s.images for s in samples])
    N, m = imgs.shape[:2]
    flat = torch.from_numpy(imgs.reshape(N * m, *imgs.shape[2:]))
    ids = torch.arange(m).repeat(N)
    s_parts, z_parts = [], []
    for k in range(0, N * m, batch):
        s_parts.append(model.encode_anatomy(flat[k : k + batch], ids[k : k + batch]))
        z_parts.append(model.encode_modality(flat[k : k + batch], ids[k : k + batch]))
    s = torch.cat(s_parts).view(N, m, *s_parts[0].shape[1:])
    z = torch.cat(z_parts).view(N, m, -1)
    return s, z


@torch.no_grad()
def cross_recon_eval(model, samples: list[MultiModalSample]) -> dict:
    """Per target modality ``j``: PSNR/SSIM of ``D(s_i, z_j)`` against ``x_j``.

    ``cross`` averages over every source ``i != j``; ``self`` uses ``i == j``.
    """
    if not samples:
        raise ValueError("cross_recon_eval needs a nonempty split")
    s, z = encode_samples(model, samples)
    N, m = z.shape[:2]
    report = {"n_subjects": N, "self": {}, "cross": {}}
    acc = {(i, j): ([], []) for i in range(m) for j in range(m)}
    for i in range(m):
        for j in range(m):
            xt = model.decode(s[:, i], z[:, j]).numpy()
            for n, smp in enumerate(samples):
                gt = smp.images[j]
                dr = gt_range(gt)
                acc[i, j][0].append(psnr(xt[n], gt, dr)[0])
                acc[i, j][1].append(ssim(gt, xt[n], dr))
    for j in range(m):
        report["self"][str(j)] = {"psnr": float(np.mean(acc[j, j][0])), "ssim": float(np.mean(acc[j, j][1]))}
        src = [i for i in range(m) if i != j]
        report["cross"][str(j)] = {
            "psnr": float(np.mean([np.mean(acc[i, j][0]) for i in src])),
            "ssim": float(np.mean([np.mean(acc[i, j][1]) for i in src])),
        }
    return report


def _cos_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    den = na * nb
    out = np.zeros(den.shape)
    ok = den > 0
    out[ok] = (a * b).sum(-1)[ok] / den[ok]
    return out


def similarity_gaps(fs: np.ndarray, z: np.ndarray, pair_samples: int = 500, seed: int = 0) -> dict:
    """Mean within-group minus across-group cosine, estimated from sampled tuples.

    ``fs`` and ``z`` are ``(N, m, D)`` arrays indexed by subject and modality.
    For sampled ``(p, q != p, i, j != i)``:

    * s-gap: ``cos(f(s_i^p), f(s_j^p)) - cos(f(s_i^p), f(s_i^q))``
    * z-gap: ``cos(z_i^p, z_i^q) - cos(z_i^p, z_j^p)``
    """
    N, m = z.shape[:2]
    rng = np.random.default_rng(seed)
    p = rng.integers(0, N, pair_samples)
    q = (p + rng.integers(1, N, pair_samples)) % N
    i = rng.integers(0, m, pair_samples)
    j = (i + rng.integers(1, m, pair_samples)) % m
    s_within = _cos_rows(fs[p, i], fs[p, j])
    s_across = _cos_rows(fs[p, i], fs[q, i])
    z_within = _cos_rows(z[p, i], z[q, i])
    z_across = _cos_rows(z[p, i], z[p, j])
    return {
        "s_gap": float(s_within.mean() - s_across.mean()),
        "z_gap": float(z_within.mean() - z_across.mean()),
        "s_within_subject_cos": float(s_within.mean()),
        "s_across_subject_cos": float(s_across.mean()),
        "z_within_modality_cos": float(z_within.mean()),
        "z_across_modality_cos": float(z_across.mean()),
    }


def silhouette(emb: np.ndarray, labels: np.ndarray) -> float:
    """Silhouette under cosine distance; 0 when fewer than 2 clusters."""
    if len(np.unique(labels)) < 2 or len(np.unique(labels)) >= len(labels):
        return 0.0
    return float(silhouette_score(emb, labels, metric="cosine"))


def probe_accuracy(emb: np.ndarray, labels: np.ndarray, groups: np.ndarray, seed: int = 0, folds: int = 4) -> float:
    """Held-out accuracy of a multinomial logistic probe.

    Folds are grouped (by subject) so a sample's partner modalities never sit
    on both sides of a split.
    """
    n_groups = len(np.unique(groups))
    folds = min(folds, n_groups)
    if folds < 2:
        raise ValueError("probe needs at least 2 groups")
    correct = 0
    for tr, te in GroupKFold(n_splits=folds).split(emb, labels, groups):
        if len(np.unique(labels[tr])) < 2:
            correct += int((labels[te] == labels[tr][0]).sum())
            continue
        clf = LogisticRegression(max_iter=5000, random_state=seed)
        clf.fit(emb[tr], labels[tr])
        correct += int((clf.predict(emb[te]) == labels[te]).sum())
    return correct / len(labels)


def embedding_structure(fs: np.ndarray, z: np.ndarray, pair_samples: int = 500, seed: int = 0) -> dict:
    """Gaps, silhouettes and probe accuracies for ``(N, m, D)`` embeddings."""
    N, m = z.shape[:2]
    subj = np.repeat(np.arange(N), m)
    mod = np.tile(np.arange(m), N)
    z2, f2 = z.reshape(N * m, -1), fs.reshape(N * m, -1)
    out = similarity_gaps(fs, z, pair_samples, seed)
    out.update(
        silhouette_z_by_modality=silhouette(z2, mod),
        silhouette_s_by_subject=silhouette(f2, subj),
        silhouette_s_by_modality=silhouette(f2, mod),
        probe_modality_from_z=probe_accuracy(z2, mod, subj, seed),
        probe_modality_from_s=probe_accuracy(f2, mod, subj, seed),
    )
    return out


@torch.no_grad()
def disentanglement_eval(model, samples: list[MultiModalSample], pair_samples: int = 500,
                         pool_size: int = 8, seed: int = 0) -> dict:
    if len(samples) < 4:
        raise ValueError(f"disentanglement_eval needs at least 4 subjects, got {len(samples)}")
    s, z = encode_samples(model, samples)
    fs = pool_features(s, pool_size).numpy().astype(np.float64)
    out = embedding_structure(fs, z.numpy().astype(np.float64), pair_samples, seed)
    out["n_subjects"] = len(samples)
    return out


@torch.no_grad()
def export_embeddings(model, samples: list[MultiModalSample], out_dir: str | Path, pool_size: int = 8) -> dict:
    """Write ``z.dmrt`` (N*m x Z), ``fs.dmrt``, ``fused.dmrt`` and ``labels.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    s, z = encode_samples(model, samples)
    N, m = z.shape[:2]
    zmat = z.reshape(N * m, -1).numpy().astype(np.float32)
    fmat = pool_features(s, pool_size).reshape(N * m, -1).numpy().astype(np.float32)
    fused = fuse_subset(s, list(range(m))).numpy().astype(np.float32)
    tensorio.save_tensor(out / "z.dmrt", zmat)
    tensorio.save_tensor(out / "fs.dmrt", fmat)
    tensorio.save_tensor(out / "fused.dmrt", fused)
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "subject_id", "modality_id", "split"])
        for n, smp in enumerate(samples):
            for i in range(m):
                wr.writerow([n * m + i, smp.subject_id, i, smp.split])
    return {"rows": N * m, "z": str(out / "z.dmrt"), "fs": str(out / "fs.dmrt"),
            "fused": str(out / "fused.dmrt"), "labels": str(out / "labels.csv")}
