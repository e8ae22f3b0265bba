"""Synthetic paired multi-modal images with known anatomy and appearance.

Each subject gets one random label map (nested smooth blobs plus an optional
lesion). Each modality has one intensity profile shared by every subject. An
image is the profile's per-class lookup modulated by a smooth multiplicative
bias field plus Gaussian noise, so anatomy is shared within a subject and
appearance is shared within a modality.
"""

from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio
from .config import DataConfig, config_hash, to_dict
from .errors import ConfigError, CorruptDatasetError, ShapeError

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass
class ShapeParams:
    height: int = 64
    width: int = 64
    n_classes: int = 5
    p_lesion: float = 0.6
    lesion_radius: tuple[float, float] = (3.5, 6.5)  # pixels at 64x64, scaled with size

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigError(f"label map must be at least 32x32, got {self.height}x{self.width}")
        if self.n_classes < 3:
            raise ConfigError(f"need at least 3 classes (background, tissue, lesion), got {self.n_classes}")
        if not 0.0 <= self.p_lesion <= 1.0:
            raise ConfigError("p_lesion must lie in [0, 1]")


@dataclass
class ModalityProfile:
    modality_id: int
    class_intensities: tuple[float, ...]
    bias_amplitude: float = 0.1
    bias_smoothness: float = 12.0
    noise_sigma: float = 0.05


@dataclass
class MultiModalSample:
    subject_id: str
    images: np.ndarray  # (m, C, H, W) float32
    label_map: np.ndarray  # (H, W) int32
    split: str

    @property
    def m(self) -> int:
        return self.images.shape[0]


def _seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1)[0])


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    g = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="reflect")
    peak = np.abs(g).max()
    return g / peak if peak > 0 else g


def _contour(rng: np.random.Generator, theta: np.ndarray, amp: float) -> np.ndarray:
    out = np.zeros_like(theta)
    for k in range(2, 6):
        out += rng.uniform(-amp, amp) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return out


def generate_label_map(seed: int, params: ShapeParams | None = None) -> np.ndarray:
    """Random anatomy as an ``(H, W)`` int32 grid with classes ``0..K-1``.

    Classes ``1..K-2`` are nested blobs (class 1 outermost); class ``K-1`` is a
    lesion stamped with probability ``p_lesion``. The random stream does not
    depend on ``p_lesion``, so toggling it leaves the rest of the anatomy intact.
    """
    params = params or ShapeParams()
    params.validate()
    H, W, K = params.height, params.width, params.n_classes
    rng = np.random.default_rng(seed)
    size = min(H, W)

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    cy = H / 2 + rng.uniform(-0.05, 0.05) * H
    cx = W / 2 + rng.uniform(-0.05, 0.05) * W
    dist = np.hypot(yy - cy, xx - cx)
    theta = np.arctan2(yy - cy, xx - cx)
    radius = rng.uniform(0.33, 0.40) * size
    wobble = 0.06 * _smooth_field(rng, (H, W), sigma=size / 10)

    labels = np.zeros((H, W), dtype=np.int32)
    n_tissue = K - 2
    for c in range(1, n_tissue + 1):
        frac = 1.0 - (c - 1) / n_tissue
        if c == 1:
            d, t, scale = dist, theta, 1.0
        else:
            # inner blobs drift off-centre but stay inside their parent
            oy, ox = rng.uniform(-0.22, 0.22, size=2) * radius
            d = np.hypot(yy - cy - oy, xx - cx - ox)
            t = np.arctan2(yy - cy - oy, xx - cx - ox)
            scale = frac * rng.uniform(0.85, 1.15)
        rho = d / (radius * scale * (1.0 + _contour(rng, t, 0.03 if c == 1 else 0.06))) + wobble
        labels[(rho < 1.0) & (labels == c - 1)] = c

    u = rng.random()
    r0 = rng.uniform(0.1, 0.55) * radius
    phi = rng.uniform(0, 2 * np.pi)
    lo, hi = params.lesion_radius
    ra, rb = rng.uniform(lo, hi, size=2) * size / 64.0
    orient = rng.uniform(0, np.pi)
    if u < params.p_lesion:
        ly, lx = cy + r0 * np.sin(phi), cx + r0 * np.cos(phi)
        dy, dx = yy - ly, xx - lx
        c, s = np.cos(orient), np.sin(orient)
        mask = ((dx * c + dy * s) / ra) ** 2 + ((-dx * s + dy * c) / rb) ** 2 <= 1.0
        labels[mask] = K - 1
    return labels


def check_label_map(labels: np.ndarray, n_classes: int) -> None:
    """Raise ``ValueError`` if a label map breaks the LabelMap invariants."""
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("label outside 0..K-1")
    if (labels == 0).mean() < 0.10:
        raise ValueError("background covers less than 10% of the frame")
    lesion = labels == n_classes - 1
    if lesion.any():
        comp, n = ndimage.label(lesion)
        if n != 1 or lesion.sum() < 8:
            raise ValueError(f"lesion must be one component of >= 8 pixels (got {n} components)")


def render_modality(
    label_map: np.ndarray, profile: ModalityProfile, noise_seed: int, channels: int = 1
) -> np.ndarray:
    """Render ``(channels, H, W)`` float32 intensities for one modality."""
    table = np.asarray(profile.class_intensities, dtype=np.float64)
    if label_map.max() >= len(table):
        raise ShapeError(
            f"profile has {len(table)} class intensities but label map uses class {label_map.max()}"
        )
    rng = np.random.default_rng(noise_seed)
    H, W = label_map.shape
    bias = _smooth_field(rng, (H, W), sigma=profile.bias_smoothness)
    img = table[label_map] * (1.0 + profile.bias_amplitude * bias)
    noise = rng.standard_normal((channels, H, W)) * profile.noise_sigma
    return (img[None] + noise).astype(np.float32)


def zscore(img: np.ndarray) -> np.ndarray:
    """Per-channel z-score over the full frame."""
    x = img.astype(np.float64)
    mu = x.mean(axis=(-2, -1), keepdims=True)
    sd = x.std(axis=(-2, -1), keepdims=True)
    return ((x - mu) / np.where(sd > 0, sd, 1.0)).astype(np.float32)


def make_profiles(cfg: DataConfig) -> list[ModalityProfile]:
    """Per-modality class intensity tables, drawn from ``generator_seed``.

    Background is dark in every modality; tissue ordering and the lesion's
    contrast differ between modalities.
    """
    rng = np.random.default_rng(_seed(cfg.generator_seed, 2))
    K = cfg.n_classes
    profiles: list[ModalityProfile] = []
    while len(profiles) < cfg.m:
        bg = rng.uniform(-2.0, -1.4)
        tissue = rng.uniform(-1.0, 1.8, size=K - 2)
        lesion = rng.uniform(-1.2, 2.0)
        vals = np.concatenate([[bg], tissue, [lesion]])
        gaps = np.abs(vals[:, None] - vals[None, :]) + np.eye(K) * 10
        if gaps.min() < 0.4:
            continue
        if any(np.abs(vals - np.asarray(p.class_intensities)).mean() < 0.5 for p in profiles):
            continue
        profiles.append(
            ModalityProfile(
                modality_id=len(profiles),
                class_intensities=tuple(float(v) for v in np.round(vals, 4)),
                bias_amplitude=cfg.bias_amplitude,
                bias_smoothness=cfg.bias_smoothness,
                noise_sigma=cfg.noise_sigma,
            )
        )
    return profiles


def shape_params(cfg: DataConfig) -> ShapeParams:
    return ShapeParams(cfg.height, cfg.width, cfg.n_classes, cfg.p_lesion)


def render_subject(cfg: DataConfig, index: int, profiles=None) -> tuple[np.ndarray, np.ndarray]:
    """Regenerate subject ``index`` from seeds: ``(label_map, images[m, C, H, W])``."""
    profiles = profiles or make_profiles(cfg)
    labels = generate_label_map(_seed(cfg.generator_seed, 0, index), shape_params(cfg))
    imgs = []
    for p in profiles:
        img = render_modality(labels, p, _seed(cfg.generator_seed, 1, index, p.modality_id), cfg.channels)
        imgs.append(zscore(img) if cfg.zscore else img)
    return labels, np.stack(imgs)


def assign_splits(cfg: DataConfig) -> list[str]:
    n = cfg.num_subjects
    n_train = int(round(cfg.split_fractions[0] * n))
    n_val = min(n - n_train, int(round(cfg.split_fractions[1] * n)))
    order = np.random.default_rng(_seed(cfg.generator_seed, 3)).permutation(n)
    splits = [""] * n
    for rank, idx in enumerate(order):
        splits[idx] = "train" if rank < n_train else "val" if rank < n_train + n_val else "test"
    return splits


def build_dataset(cfg: DataConfig, out_dir: str | Path) -> dict:
    """Write every subject's tensors then the manifest; returns the manifest."""
    cfg.validate()
    out = Path(out_dir)
    existed = out.exists()
    written: list[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        profiles = make_profiles(cfg)
        splits = assign_splits(cfg)
        records = []
        for k in range(cfg.num_subjects):
            sid = f"sub-{k:03d}"
            labels, imgs = render_subject(cfg, k, profiles)
            check_label_map(labels, cfg.n_classes)
            sdir = out / "subjects" / sid
            sdir.mkdir(parents=True, exist_ok=True)
            lpath = sdir / "label.dmrt"
            rec = {
                "subject_id": sid,
                "split": splits[k],
                "has_lesion": bool((labels == cfg.n_classes - 1).any()),
                "label": {"path": lpath.relative_to(out).as_posix(), "sha256": tensorio.save_tensor(lpath, labels)},
                "images": [],
            }
            written.append(lpath)
            for i in range(cfg.m):
                ipath = sdir / f"img_{i}.dmrt"
                digest = tensorio.save_tensor(ipath, imgs[i])
                written.append(ipath)
                rec["images"].append({"path": ipath.relative_to(out).as_posix(), "sha256": digest})
            records.append(rec)
        manifest = {
            "version": MANIFEST_VERSION,
            "num_subjects": cfg.num_subjects,
            "m": cfg.m,
            "H": cfg.height,
            "W": cfg.width,
            "K": cfg.n_classes,
            "channels": cfg.channels,
            "generator_seed": cfg.generator_seed,
            "config": to_dict(cfg),
            "config_hash": config_hash(cfg),
            "profiles": [asdict(p) for p in profiles],
            "subjects": records,
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    except OSError:
        log.error("dataset build failed; removing partial output in %s", out)
        if not existed:
            shutil.rmtree(out, ignore_errors=True)
        else:
            for p in written:
                p.unlink(missing_ok=True)
        raise
    return manifest


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptDatasetError(f"cannot read manifest {path}: {exc}") from None
    missing = [k for k in ("version", "m", "H", "W", "K", "subjects") if k not in manifest]
    if missing:
        raise CorruptDatasetError(f"{path}: manifest lacks fields {missing}")
    if manifest["m"] < 2:
        raise CorruptDatasetError(f"{path}: m must be >= 2")
    manifest["_root"] = str(path.parent)
    return manifest


def _load_checked(root: Path, entry: dict, shape: tuple) -> np.ndarray:
    fpath = root / entry["path"]
    if not fpath.is_file():
        raise CorruptDatasetError(f"missing dataset file: {fpath}")
    data = fpath.read_bytes()
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise CorruptDatasetError(f"checksum mismatch: {fpath}")
    try:
        arr = tensorio.decode_tensor(data, name=str(fpath))
    except tensorio.TensorFormatError as exc:
        raise CorruptDatasetError(str(exc)) from None
    if arr.shape != shape:
        raise CorruptDatasetError(f"shape mismatch in {fpath}: {arr.shape} != {shape}")
    return arr


def load_dataset(manifest_path: str | Path, split: str | None = None) -> list[MultiModalSample]:
    """Eagerly load (and verify) every subject, optionally only one split."""
    man = read_manifest(manifest_path)
    root = Path(man["_root"])
    H, W, m, C = man["H"], man["W"], man["m"], man.get("channels", 1)
    samples = []
    for rec in man["subjects"]:
        if split is not None and rec["split"] != split:
            continue
        if len(rec["images"]) != m:
            raise CorruptDatasetError(f"{rec['subject_id']}: expected {m} images, found {len(rec['images'])}")
        labels = _load_checked(root, rec["label"], (H, W))
        imgs = np.stack([_load_checked(root, e, (C, H, W)) for e in rec["images"]])
        if not np.isfinite(imgs).all():
            raise CorruptDatasetError(f"{rec['subject_id']}: non-finite intensities")
        samples.append(MultiModalSample(rec["subject_id"], imgs, labels, rec["split"]))
    return samples


def stack(samples: list[MultiModalSample]) -> tuple[np.ndarray, np.ndarray]:
    """``(images[N, m, C, H, W], labels[N, H, W])`` for a list of samples."""
    return np.stack([s.images for s in samples]), np.stack([s.label_map for s in samples])
