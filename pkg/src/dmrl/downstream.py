"""Downstream tasks on frozen fused anatomy versus raw multi-modal stacks.

The fused model sees ``fuse(s_i for available i)`` (12 channels regardless of
how many modalities are present). The raw baselines see the image stack and
replace a missing modality with zeros or with the cohort average image.
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import evalmetrics, nets, synthdata, tensorio
from .config import TaskConfig, config_hash, from_dict, to_dict
from .errors import CheckpointError, ConfigError
from .fusion import fuse_masked

log = logging.getLogger(__name__)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True),
        )


class TaskUNet(nn.Module):
    """Small U-Net: 3 pooling stages, base width 16."""

    def __init__(self, in_channels: int, out_channels: int, base: int = 16, depth: int = 3):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        widths = [base * 2**k for k in range(depth + 1)]
        self.inc = DoubleConv(in_channels, widths[0])
        self.downs = nn.ModuleList(DoubleConv(widths[k], widths[k + 1]) for k in range(depth))
        self.ups = nn.ModuleList(DoubleConv(widths[k + 1] + widths[k], widths[k]) for k in reversed(range(depth)))
        self.outc = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"task model expects {self.in_channels} input channels, got {x.shape[1]}")
        skips = [self.inc(x)]
        for down in self.downs:
            skips.append(down(F.max_pool2d(skips[-1], 2)))
        h = skips.pop()
        for up in self.ups:
            h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
            h = up(torch.cat([h, skips.pop()], dim=1))
        return self.outc(h)


# --------------------------------------------------------------------------
# task geometry


def input_modalities(spec: TaskConfig, m: int) -> list[int]:
    if spec.kind == "synthesis":
        return [i for i in range(m) if i != target_modality(spec, m)]
    return list(range(m))


def target_modality(spec: TaskConfig, m: int) -> int:
    return m - 1 if spec.target_modality is None else spec.target_modality


def target_classes(spec: TaskConfig, n_classes: int) -> list[int]:
    return list(spec.target_classes) if spec.target_classes else [n_classes - 1]


def input_channels(spec: TaskConfig, m: int, channels: int = 1, anat_channels: int = 4) -> int:
    if spec.input_mode == "fused":
        return 3 * anat_channels
    return len(input_modalities(spec, m)) * channels


def check_spec(spec: TaskConfig, man: dict) -> None:
    spec.validate()
    m, K = man["m"], man["K"]
    if spec.kind == "synthesis":
        tgt = target_modality(spec, m)
        if not 0 <= tgt < m:
            raise ConfigError(f"target_modality: {tgt} not in dataset with m={m}")
        if m < 2:
            raise ConfigError("synthesis needs at least one input modality besides the target")
    else:
        bad = [c for c in target_classes(spec, K) if not 0 < c < K]
        if bad:
            raise ConfigError(f"target_classes: {bad} not foreground classes of a K={K} dataset")
    if spec.input_mode == "fused" and not spec.encoder:
        raise ConfigError("encoder: fused input needs an encoder checkpoint")


def seg_targets(labels: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Map the chosen classes to ``1..len(classes)`` and everything else to 0."""
    out = np.zeros(labels.shape, dtype=np.int64)
    for k, c in enumerate(classes, start=1):
        out[labels == c] = k
    return out


# --------------------------------------------------------------------------
# average image baseline


def average_image(manifest_path: str | Path, modality_id: int, cache_dir: str | Path | None = None) -> np.ndarray:
    """Pixelwise mean of a modality over the training split, cached as a tensor file."""
    man = synthdata.read_manifest(manifest_path)
    root = Path(man["_root"])
    cache = Path(cache_dir) if cache_dir else root / "cache"
    path = cache / f"avg_modality_{modality_id}.dmrt"
    if path.exists():
        return tensorio.load_tensor(path)
    train = synthdata.load_dataset(manifest_path, "train")
    if not train:
        raise ValueError("average_image: training split is empty")
    if not 0 <= modality_id < man["m"]:
        raise ValueError(f"modality_id {modality_id} out of range")
    acc = np.zeros(train[0].images.shape[1:], np.float64)
    for s in train:
        acc += s.images[modality_id]
    avg = (acc / len(train)).astype(np.float32)
    cache.mkdir(parents=True, exist_ok=True)
    tensorio.save_tensor(path, avg)
    return avg


def fill_missing(x: np.ndarray, drop: Sequence[int], fill: str, averages: dict[int, np.ndarray] | None = None):
    """Replace dropped modalities of ``x[N, m, C, H, W]`` with zeros or averages."""
    x = x.copy()
    for i in drop:
        if fill == "zero":
            x[:, i] = 0.0
        elif fill == "average":
            x[:, i] = averages[i]
        else:
            raise ConfigError(f"unknown missing-fill {fill!r}")
    return x


# --------------------------------------------------------------------------
# input construction


@dataclass
class Inputs:
    """Everything a task model consumes for one split."""

    images: np.ndarray  # (N, m, C, H, W)
    labels: np.ndarray  # (N, H, W)
    s: torch.Tensor | None = None  # (N, m, A, H, W) frozen anatomy
    s_flip: torch.Tensor | None = None


@torch.no_grad()
def encode_all(encoder: nets.ModelBundle, images: np.ndarray, batch: int = 16) -> torch.Tensor:
    encoder.eval()
    N, m = images.shape[:2]
    flat = torch.from_numpy(np.ascontiguousarray(images.reshape(N * m, *images.shape[2:])))
    ids = torch.arange(m).repeat(N)
    parts = [encoder.encode_anatomy(flat[k : k + batch], ids[k : k + batch]) for k in range(0, N * m, batch)]
    s = torch.cat(parts)
    return s.view(N, m, *s.shape[1:])


def build_inputs(spec: TaskConfig, samples, encoder: nets.ModelBundle | None, with_flip: bool) -> Inputs:
    imgs, labels = synthdata.stack(samples)
    inp = Inputs(imgs, labels)
    if spec.input_mode == "fused":
        inp.s = encode_all(encoder, imgs)
        if with_flip:
            inp.s_flip = encode_all(encoder, np.ascontiguousarray(imgs[..., ::-1]))
    return inp


def model_input(spec: TaskConfig, inp: Inputs, idx: np.ndarray, available: np.ndarray,
                flip: np.ndarray | None = None, averages=None) -> torch.Tensor:
    """Task-model input for subjects ``idx``.

    ``available`` is a ``(len(idx), m)`` boolean mask. Fused mode excludes
    unavailable modalities from pooling; raw mode fills them per ``missing_fill``.
    """
    m = inp.images.shape[1]
    mods = input_modalities(spec, m)
    flip = np.zeros(len(idx), bool) if flip is None else flip
    if spec.input_mode == "fused":
        s = inp.s[idx].clone()
        if flip.any():
            s[torch.from_numpy(flip)] = inp.s_flip[idx[flip]]
        mask = torch.from_numpy(available[:, mods])
        return fuse_masked(s[:, mods], mask)
    x = inp.images[idx].copy()
    if flip.any():
        x[flip] = x[flip][..., ::-1]
    for n in range(len(idx)):
        drop = [i for i in range(m) if not available[n, i]]
        if drop:
            x[n : n + 1] = fill_missing(x[n : n + 1], drop, spec.missing_fill, averages)
    x = x[:, mods]
    return torch.from_numpy(np.ascontiguousarray(x.reshape(len(idx), -1, *x.shape[-2:])))


def task_target(spec: TaskConfig, inp: Inputs, idx: np.ndarray, classes, flip: np.ndarray | None = None):
    flip = np.zeros(len(idx), bool) if flip is None else flip
    if spec.kind == "segmentation":
        lab = inp.labels[idx].copy()
        lab[flip] = lab[flip][..., ::-1]
        return torch.from_numpy(seg_targets(lab, classes))
    tgt = target_modality(spec, inp.images.shape[1])
    y = inp.images[idx, tgt].copy()
    y[flip] = y[flip][..., ::-1]
    return torch.from_numpy(np.ascontiguousarray(y))


def dropout_mask(rng: np.random.Generator, n: int, m: int, mods: Sequence[int], p: float) -> np.ndarray:
    """Drop each input modality with probability ``p``; keep at least one."""
    mask = np.ones((n, m), bool)
    if p <= 0:
        return mask
    mods = np.asarray(mods)
    for r in range(n):
        keep = rng.random(len(mods)) >= p
        if not keep.any():
            keep[rng.integers(len(mods))] = True
        mask[r, mods] = keep
    return mask


# --------------------------------------------------------------------------
# training / evaluation


@dataclass
class TaskResult:
    model: TaskUNet
    spec: TaskConfig
    path: Path
    history: list[dict]
    encoder_digest_before: str | None = None
    encoder_digest_after: str | None = None


def _averages(spec: TaskConfig, dataset: str, m: int) -> dict[int, np.ndarray] | None:
    if spec.input_mode == "raw" and spec.missing_fill == "average":
        return {i: average_image(dataset, i) for i in range(m)}
    return None


def train_downstream(spec: TaskConfig, out_dir: str | Path, stdout: bool = False) -> TaskResult:
    """Train a task model on frozen fused anatomy or on raw stacks."""
    if not spec.dataset:
        raise ConfigError("dataset: required")
    man = synthdata.read_manifest(spec.dataset)
    check_spec(spec, man)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "task_config.json").write_text(json.dumps(to_dict(spec), indent=1, sort_keys=True), encoding="utf-8")

    encoder = None
    digest_before = None
    if spec.input_mode == "fused":
        encoder, _, _ = nets.load_model(spec.encoder)
        if encoder.m != man["m"]:
            raise ConfigError(f"encoder has m={encoder.m}, dataset has m={man['m']}")
        for p in encoder.parameters():
            p.requires_grad_(False)
        digest_before = nets.param_digest(encoder)

    m, K = man["m"], man["K"]
    classes = target_classes(spec, K)
    train = synthdata.load_dataset(spec.dataset, "train")
    inp = build_inputs(spec, train, encoder, with_flip=spec.flip_prob > 0)
    mods = input_modalities(spec, m)
    anat = encoder.cfg.anat_channels if encoder is not None else 4
    cin = input_channels(spec, m, man.get("channels", 1), anat)
    cout = len(classes) + 1 if spec.kind == "segmentation" else man.get("channels", 1)
    with torch.random.fork_rng():
        torch.manual_seed(spec.seed)
        model = TaskUNet(cin, cout, spec.base_width)
    opt = torch.optim.Adam(model.parameters(), lr=spec.lr)
    averages = _averages(spec, spec.dataset, m)

    history = []
    log_fh = open(out / "task_log.jsonl", "w", encoding="utf-8")
    streams: list[IO] = [log_fh] + ([sys.stdout] if stdout else [])
    step = 0
    try:
        for epoch in range(spec.epochs):
            model.train()
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, epoch, 11]))
            order = rng.permutation(len(train))
            losses = []
            for k in range(0, len(order), spec.batch_size):
                idx = order[k : k + spec.batch_size]
                flip = rng.random(len(idx)) < spec.flip_prob
                if spec.input_mode == "fused":
                    avail = dropout_mask(rng, len(idx), m, mods, spec.modality_dropout)
                else:
                    avail = np.ones((len(idx), m), bool)
                x = model_input(spec, inp, idx, avail, flip, averages)
                y = task_target(spec, inp, idx, classes, flip)
                pred = model(x)
                loss = F.cross_entropy(pred, y) if spec.kind == "segmentation" else (pred - y).abs().mean()
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
                losses.append(float(loss.detach()))
                rec = {"step": step, "epoch": epoch, "loss": losses[-1]}
                for s in streams:
                    s.write(json.dumps(rec) + "\n")
                step += 1
            history.append({"epoch": epoch + 1, "loss": float(np.mean(losses))})
    finally:
        log_fh.close()
    model.eval()
    digest_after = nets.param_digest(encoder) if encoder is not None else None
    path = out / "task.ckpt"
    save_task(path, model, spec, man, history)
    return TaskResult(model, spec, path, history, digest_before, digest_after)


def save_task(path: Path, model: TaskUNet, spec: TaskConfig, man: dict, history: list[dict]) -> None:
    header = {
        "kind": "task",
        "spec": to_dict(spec),
        "config_hash": config_hash(spec),
        "in_channels": model.in_channels,
        "out_channels": model.out_channels,
        "m": man["m"],
        "K": man["K"],
        "history": history,
    }
    tensorio.write_archive(path, header, nets.state_arrays(model.state_dict(), "task/"))


def load_task(path: str | Path) -> tuple[TaskUNet, TaskConfig, dict]:
    try:
        header, tensors = tensorio.read_archive(path)
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"cannot read task checkpoint {path}: {exc}") from None
    if header.get("kind") != "task":
        raise CheckpointError(f"{path} is not a task checkpoint")
    spec = from_dict(TaskConfig, header["spec"])
    model = TaskUNet(header["in_channels"], header["out_channels"], spec.base_width)
    nets.load_state_arrays(model, tensors, "task/")
    model.eval()
    return model, spec, header


@torch.no_grad()
def evaluate(model: TaskUNet, spec: TaskConfig, samples, n_classes: int, drop: Sequence[int] = (),
             encoder: nets.ModelBundle | None = None, averages=None, batch: int = 8) -> dict:
    """Metrics with the modalities in ``drop`` missing at test time.

    Segmentation reports DICE pooled over the split (per target class, then
    averaged) alongside the mean of per-image DICE. Synthesis reports mean
    PSNR/SSIM of the target modality with the ground-truth range.
    """
    if not samples:
        raise ValueError("evaluation split is empty")
    m = samples[0].m
    mods = input_modalities(spec, m)
    drop = sorted(set(int(d) for d in drop))
    if any(not 0 <= d < m for d in drop):
        raise ConfigError(f"drop: {drop} outside 0..{m - 1}")
    if set(mods) <= set(drop):
        raise ConfigError("drop: cannot drop every input modality")
    model.eval()
    inp = build_inputs(spec, samples, encoder, with_flip=False)
    n = len(samples)
    avail = np.ones((n, m), bool)
    avail[:, drop] = False
    preds = []
    for k in range(0, n, batch):
        idx = np.arange(k, min(n, k + batch))
        preds.append(model(model_input(spec, inp, idx, avail[idx], None, averages)))
    pred = torch.cat(preds)
    out: dict = {"drop": drop, "n_subjects": n}
    if spec.kind == "segmentation":
        classes = target_classes(spec, n_classes)
        lab = pred.argmax(1).numpy()
        gt = seg_targets(inp.labels, classes)
        per_class, per_image = {}, []
        for k, c in enumerate(classes, start=1):
            num = den = 0
            for a, b in zip(lab, gt):
                nn_, dd = evalmetrics.dice_counts(a, b, k)
                num, den = num + nn_, den + dd
            per_class[str(c)] = 1.0 if den == 0 else num / den
        for a, b in zip(lab, gt):
            per_image.append(np.mean([evalmetrics.dice(a, b, k) for k in range(1, len(classes) + 1)]))
        out.update(dice=float(np.mean(list(per_class.values()))), dice_per_class=per_class,
                   dice_image_mean=float(np.mean(per_image)))
    else:
        tgt = target_modality(spec, m)
        yhat = pred.numpy()
        ps, ss = [], []
        for a, smp in zip(yhat, samples):
            gt = smp.images[tgt]
            dr = evalmetrics.gt_range(gt)
            ps.append(evalmetrics.psnr(a, gt, dr)[0])
            ss.append(evalmetrics.ssim(gt, a, dr))
        out.update(psnr=float(np.mean(ps)), ssim=float(np.mean(ss)))
    return out


FILL_ALIASES = {"avg": "average", "average": "average", "zero": "zero", "none": "none"}


def eval_missing(task_ckpt: str | Path, drop: Sequence[int] = (), split: str = "test",
                 dataset: str | None = None, fill: str | None = None) -> dict:
    """Load a task checkpoint and evaluate it with ``drop`` modalities missing.

    ``fill`` overrides the raw-stack fill strategy so one raw model can be
    scored with both zero and average filling.
    """
    model, spec, header = load_task(task_ckpt)
    if fill is not None:
        if fill not in FILL_ALIASES:
            raise ConfigError(f"fill: unknown value {fill!r} (choose zero or avg)")
        spec = replace(spec, missing_fill=FILL_ALIASES[fill])
    if spec.input_mode == "raw" and drop and spec.missing_fill == "none":
        raise ConfigError("fill: raw-stack evaluation with missing modalities needs --fill zero or avg")
    dataset = dataset or spec.dataset
    man = synthdata.read_manifest(dataset)
    if man["m"] != header["m"]:
        raise ConfigError(f"task was trained with m={header['m']}, dataset has m={man['m']}")
    encoder = None
    if spec.input_mode == "fused":
        encoder, _, _ = nets.load_model(spec.encoder)
    samples = synthdata.load_dataset(dataset, split)
    res = evaluate(model, spec, samples, man["K"], drop, encoder, _averages(spec, dataset, man["m"]))
    res.update(split=split, input_mode=spec.input_mode, missing_fill=spec.missing_fill,
               kind=spec.kind, task_config_hash=header["config_hash"])
    return res
