"""Disentanglement training loop, subject pairing, checkpoints and resume."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import queue
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterator

import numpy as np
import torch

from . import evalmetrics, nets, synthdata
from .config import TrainConfig, config_hash, from_dict, to_dict
from .errors import CheckpointError, ConfigError, TrainingDivergenceError
from .objectives import pool_features, total_loss

log = logging.getLogger(__name__)


def deterministic_requested() -> bool:
    return os.environ.get("DMRL_DETERMINISTIC", "0") not in ("", "0", "false", "False")


def set_deterministic(flag: bool | None = None) -> bool:
    """Switch torch into deterministic single-threaded mode when requested."""
    flag = deterministic_requested() if flag is None else flag
    if flag:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    return flag


def num_workers() -> int:
    if deterministic_requested():
        return 0
    try:
        return max(0, int(os.environ.get("DMRL_NUM_WORKERS", "0")))
    except ValueError:
        raise ConfigError("DMRL_NUM_WORKERS must be an integer") from None


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # keyed by epoch so that a resumed run replays the same data order
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 7]))


def sample_pairs(batch_size: int, rng: np.random.Generator | int) -> np.ndarray:
    """Uniformly random derangement: ``partner[i] != i`` for every ``i``."""
    if batch_size < 2:
        raise ValueError(f"pairing needs at least 2 subjects, got {batch_size}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    idx = np.arange(batch_size)
    while True:
        perm = rng.permutation(batch_size)
        if not (perm == idx).any():
            return perm


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[k : k + batch_size] for k in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def steps_per_epoch(n: int, batch_size: int) -> int:
    return len(make_batches(n, batch_size, np.random.default_rng(0)))


def _prefetch(gen: Iterator, workers: int) -> Iterator:
    if workers <= 0:
        yield from gen
        return
    q: queue.Queue = queue.Queue(maxsize=2 * workers)
    done = object()

    def producer():
        for item in gen:
            q.put(item)
        q.put(done)

    threading.Thread(target=producer, daemon=True).start()
    while (item := q.get()) is not done:
        yield item


def epoch_batches(images: np.ndarray, cfg: TrainConfig, epoch: int) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield ``(x[B, m, C, H, W], partner[B])`` with a flip shared across modalities."""
    rng = epoch_rng(cfg.seed, epoch)
    for idx in make_batches(len(images), cfg.batch_subjects, rng):
        x = images[idx].copy()
        flip = rng.random(len(idx)) < cfg.flip_prob
        x[flip] = x[flip][..., ::-1]
        partner = sample_pairs(len(idx), rng)
        yield torch.from_numpy(np.ascontiguousarray(x)), torch.from_numpy(partner)


def resume_key(cfg: TrainConfig) -> str:
    """Hash of everything except the schedule length, used to validate resumes."""
    doc = to_dict(cfg)
    doc.pop("epochs")
    doc.pop("eval_every")
    return config_hash(doc)


@dataclass
class TrainState:
    cfg: TrainConfig
    model: nets.ModelBundle
    optimizer: torch.optim.Optimizer
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best_val: float = float("inf")


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)


def _optim_arrays(opt: torch.optim.Optimizer) -> tuple[dict, dict[str, np.ndarray]]:
    sd = opt.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"optim/{pid}/{k}"] = np.asarray(v.detach().cpu().numpy(), dtype=np.float32)
    return {"param_groups": sd["param_groups"], "state_keys": sorted(str(k) for k in sd["state"])}, arrays


def _load_optim(opt: torch.optim.Optimizer, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    state = {}
    for pid in meta["state_keys"]:
        st = {}
        for k in ("step", "exp_avg", "exp_avg_sq"):
            name = f"optim/{pid}/{k}"
            if name not in tensors:
                raise CheckpointError(f"checkpoint is missing tensor {name!r}")
            st[k] = torch.from_numpy(np.array(tensors[name]))
        state[int(pid)] = st
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_checkpoint(path: str | Path, st: TrainState, tag: str = "last") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    optim_meta, optim_arrays = _optim_arrays(st.optimizer)
    header = {
        "epoch": st.epoch,
        "step": st.step,
        "tag": tag,
        "config": to_dict(st.cfg),
        "config_hash": config_hash(st.cfg),
        "resume_key": resume_key(st.cfg),
        "history": st.history,
        "best_val": st.best_val if np.isfinite(st.best_val) else None,
        "optim": optim_meta,
    }
    nets.save_model(path, st.model, header, optim_arrays)
    return path


def load_checkpoint(path: str | Path) -> tuple[nets.ModelBundle, dict, dict[str, np.ndarray]]:
    return nets.load_model(path)


def _write_record(rec: dict, streams: list[IO]) -> None:
    line = json.dumps(rec, sort_keys=True)
    for s in streams:
        s.write(line + "\n")
        s.flush()


@torch.no_grad()
def validation_loss(model: nets.ModelBundle, images: np.ndarray, cfg: TrainConfig) -> float:
    if len(images) < 2:
        return float("nan")
    model.eval()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    w = cfg.effective_weights()
    tot, n = 0.0, 0
    for idx in make_batches(len(images), cfg.batch_subjects, rng):
        x = torch.from_numpy(images[np.sort(idx)])
        b = model.forward_batch(x, torch.from_numpy(sample_pairs(len(idx), rng)))
        _, br = total_loss(b, w, cfg.pool_size, cfg.exclude_diagonal)
        tot += br["total"] * len(idx)
        n += len(idx)
    return tot / n


@torch.no_grad()
def validation_gaps(model: nets.ModelBundle, images: np.ndarray, cfg: TrainConfig) -> dict:
    """Held-out s-gap and z-gap with a fixed pair sample, so epochs are comparable."""
    if len(images) < 2:
        return {}
    model.eval()
    N, m = images.shape[:2]
    flat = torch.from_numpy(images.reshape(N * m, *images.shape[2:]))
    ids = torch.arange(m).repeat(N)
    s = model.encode_anatomy(flat, ids).view(N, m, -1, *images.shape[-2:])
    z = model.encode_modality(flat, ids).view(N, m, -1)
    fs = pool_features(s, cfg.pool_size).double().numpy()
    g = evalmetrics.similarity_gaps(fs, z.double().numpy(), 500, cfg.seed)
    return {"val_s_gap": g["s_gap"], "val_z_gap": g["z_gap"]}


def _load_split_arrays(cfg: TrainConfig):
    if not cfg.dataset:
        raise ConfigError("dataset: required (path to a dataset manifest or directory)")
    man = synthdata.read_manifest(cfg.dataset)
    samples = synthdata.load_dataset(cfg.dataset)
    train = [s for s in samples if s.split == "train"]
    val = [s for s in samples if s.split == "val"]
    if len(train) < 2:
        raise ConfigError("dataset: training split needs at least 2 subjects")
    tr = synthdata.stack(train)[0]
    va = synthdata.stack(val)[0] if val else np.zeros((0,) + tr.shape[1:], np.float32)
    return man, tr, va


def init_state(cfg: TrainConfig, man: dict) -> TrainState:
    model_cfg = dataclasses.replace(cfg.model, in_channels=man.get("channels", 1))
    model = nets.build_model(model_cfg, cfg.mode, man["m"], man["H"], man["W"], seed=cfg.seed)
    return TrainState(cfg, model, make_optimizer(model, cfg))


def _run(st: TrainState, tr: np.ndarray, va: np.ndarray, run_dir: Path, stdout: bool) -> TrainState:
    cfg = st.cfg
    w = cfg.effective_weights()
    ckpt_dir = run_dir / "ckpt"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_file = open(run_dir / "log.jsonl", "a", encoding="utf-8")
    streams: list[IO] = [log_file] + ([sys.stdout] if stdout else [])
    spe = steps_per_epoch(len(tr), cfg.batch_subjects)
    try:
        while st.epoch < cfg.epochs:
            st.model.train()
            epoch_losses = []
            for k, (x, partner) in enumerate(_prefetch(epoch_batches(tr, cfg, st.epoch), num_workers())):
                b = st.model.forward_batch(x, partner)
                try:
                    loss, br = total_loss(b, w, cfg.pool_size, cfg.exclude_diagonal)
                except TrainingDivergenceError:
                    save_checkpoint(ckpt_dir / "diverged.ckpt", st, tag="diverged")
                    raise
                st.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip > 0:
                    torch.nn.utils.clip_grad_norm_(st.model.parameters(), cfg.grad_clip)
                st.optimizer.step()
                st.step = st.epoch * spe + k + 1
                _write_record({"step": st.epoch * spe + k, "epoch": st.epoch, **br}, streams)
                epoch_losses.append(br)
            st.epoch += 1
            summary = {
                "epoch": st.epoch,
                **{key: float(np.mean([r[key] for r in epoch_losses])) for key in epoch_losses[0]},
            }
            if st.epoch % cfg.eval_every == 0 or st.epoch == cfg.epochs:
                # no val loss without a pair of val subjects; checkpoints are still written
                summary["val_total"] = validation_loss(st.model, va, cfg) if len(va) >= 2 else None
            # cheap enough to track every epoch; used for the gap-trend check
            summary.update(validation_gaps(st.model, va, cfg))
            st.history.append(summary)
            if "val_total" in summary:
                v = summary["val_total"]
                if v is not None and np.isfinite(v) and v < st.best_val:
                    st.best_val = summary["val_total"]
                    save_checkpoint(ckpt_dir / "best.ckpt", st, tag="best")
                save_checkpoint(ckpt_dir / "last.ckpt", st, tag="last")
            log.info("epoch %d/%d total=%.4f", st.epoch, cfg.epochs, summary["total"])
        if not (ckpt_dir / "last.ckpt").exists():
            save_checkpoint(ckpt_dir / "last.ckpt", st, tag="last")
    except KeyboardInterrupt:
        save_checkpoint(ckpt_dir / "interrupted.ckpt", st, tag="interrupted")
        raise
    finally:
        log_file.close()
    st.model.eval()
    return st


def train(cfg: TrainConfig, run_dir: str | Path, stdout: bool = False) -> TrainState:
    """Train from scratch; checkpoints and ``log.jsonl`` go to ``run_dir``."""
    cfg.validate()
    set_deterministic()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snap = run_dir / "config.json"
    if not snap.exists():
        snap.write_text(json.dumps(to_dict(cfg), indent=1, sort_keys=True), encoding="utf-8")
    man, tr, va = _load_split_arrays(cfg)
    st = init_state(cfg, man)
    return _run(st, tr, va, run_dir, stdout)


def resume(
    checkpoint_path: str | Path, cfg: TrainConfig, run_dir: str | Path, force: bool = False, stdout: bool = False
) -> TrainState:
    """Continue a run from a checkpoint up to ``cfg.epochs``."""
    cfg.validate()
    set_deterministic()
    model, header, tensors = load_checkpoint(checkpoint_path)
    if header.get("resume_key") != resume_key(cfg) and not force:
        raise ConfigError(
            f"checkpoint {checkpoint_path} was produced by a different config "
            f"(hash {header.get('config_hash', '?')[:8]}); pass --force to resume anyway"
        )
    man, tr, va = _load_split_arrays(cfg)
    if man["m"] != model.m:
        raise ConfigError(f"dataset has m={man['m']} but checkpoint model has m={model.m}")
    opt = make_optimizer(model, cfg)
    _load_optim(opt, header["optim"], tensors)
    for g in opt.param_groups:
        g["lr"], g["weight_decay"] = cfg.lr, cfg.weight_decay
    best = header.get("best_val")
    st = TrainState(cfg, model, opt, header["epoch"], header["step"], list(header["history"]),
                    float("inf") if best is None else best)
    return _run(st, tr, va, Path(run_dir), stdout)


def read_log(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]


def config_from_checkpoint(header: dict) -> TrainConfig:
    return from_dict(TrainConfig, header["config"])
