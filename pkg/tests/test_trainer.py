import collections
import dataclasses
import json

import numpy as np
import pytest
import torch

from dmrl import nets, trainer
from dmrl.config import DataConfig, TrainConfig
from dmrl.errors import CheckpointError, ConfigError
from dmrl import synthdata, tensorio


def test_pairs_for_two_is_a_swap():
    for seed in range(10):
        assert trainer.sample_pairs(2, seed).tolist() == [1, 0]


@pytest.mark.parametrize("B", [2, 3, 5, 8, 17])
def test_pairs_are_derangements(B):
    rng = np.random.default_rng(B)
    for _ in range(50):
        p = trainer.sample_pairs(B, rng)
        assert sorted(p.tolist()) == list(range(B))
        assert not (p == np.arange(B)).any()


def test_pairs_uniform_for_three():
    counts = collections.Counter(tuple(trainer.sample_pairs(3, seed)) for seed in range(1000))
    assert set(counts) == {(1, 2, 0), (2, 0, 1)}
    for c in counts.values():
        assert abs(c / 1000 - 0.5) <= 0.05


def test_pairs_need_two():
    with pytest.raises(ValueError):
        trainer.sample_pairs(1, 0)


def test_batches_never_leave_a_singleton():
    rng = np.random.default_rng(0)
    for n in range(2, 30):
        for b in trainer.make_batches(n, 4, rng):
            assert len(b) >= 2


def test_na_forces_zero_similarity_weights():
    w = TrainConfig(variant="na").effective_weights()
    assert w.lambda_s == 0 and w.lambda_z == 0


def test_invalid_config():
    with pytest.raises(ConfigError, match="batch_subjects"):
        TrainConfig(batch_subjects=1).validate()


def test_missing_dataset(tmp_path):
    with pytest.raises(ConfigError, match="dataset"):
        trainer.train(TrainConfig(epochs=1), tmp_path)


def _losses(run_dir):
    return [(r["step"], r["total"]) for r in trainer.read_log(run_dir / "log.jsonl")]


def test_determinism(tiny_train_cfg, tmp_path, det_env):
    cfg = dataclasses.replace(tiny_train_cfg, seed=1)
    a = trainer.train(cfg, tmp_path / "a")
    b = trainer.train(cfg, tmp_path / "b")
    assert _losses(tmp_path / "a") == _losses(tmp_path / "b")
    assert nets.param_digest(a.model) == nets.param_digest(b.model)
    assert a.history == b.history


def test_resume_matches_straight_run(tiny_train_cfg, tmp_path, det_env):
    cfg3 = dataclasses.replace(tiny_train_cfg, epochs=3)
    straight = trainer.train(cfg3, tmp_path / "full")
    trainer.train(dataclasses.replace(tiny_train_cfg, epochs=1), tmp_path / "part")
    resumed = trainer.resume(tmp_path / "part" / "ckpt" / "last.ckpt", cfg3, tmp_path / "part")
    full, part = _losses(tmp_path / "full"), _losses(tmp_path / "part")
    assert part == full
    n_train = len(synthdata.load_dataset(cfg3.dataset, "train"))
    spe = trainer.steps_per_epoch(n_train, cfg3.batch_subjects)
    assert part[spe][0] == spe * 1
    assert nets.param_digest(resumed.model) == nets.param_digest(straight.model)
    assert resumed.epoch == 3 and resumed.step == straight.step


def test_resume_refuses_other_config(tiny_train_cfg, tmp_path):
    trainer.train(dataclasses.replace(tiny_train_cfg, epochs=1), tmp_path)
    other = dataclasses.replace(tiny_train_cfg, lr=1e-3)
    ck = tmp_path / "ckpt" / "last.ckpt"
    with pytest.raises(ConfigError, match="--force"):
        trainer.resume(ck, other, tmp_path / "r")
    st = trainer.resume(ck, other, tmp_path / "r", force=True)
    assert st.epoch == tiny_train_cfg.epochs


def test_resume_rejects_m_mismatch(tiny_train_cfg, tmp_path):
    trainer.train(dataclasses.replace(tiny_train_cfg, epochs=1), tmp_path / "run")
    ds3 = tmp_path / "ds3"
    synthdata.build_dataset(DataConfig(num_subjects=6, height=32, width=32, m=3), ds3)
    cfg = dataclasses.replace(tiny_train_cfg, dataset=str(ds3))
    with pytest.raises(ConfigError, match="m="):
        trainer.resume(tmp_path / "run" / "ckpt" / "last.ckpt", cfg, tmp_path / "r", force=True)


def test_na_logs_zero_similarity(tiny_train_cfg, tmp_path):
    trainer.train(dataclasses.replace(tiny_train_cfg, variant="na", epochs=1), tmp_path)
    recs = trainer.read_log(tmp_path / "log.jsonl")
    assert recs and all(r["L_sim_s"] == 0 and r["L_sim_z"] == 0 for r in recs)


def test_logged_terms_sum_to_total(tiny_train_cfg, tmp_path):
    trainer.train(dataclasses.replace(tiny_train_cfg, epochs=1), tmp_path)
    for r in trainer.read_log(tmp_path / "log.jsonl"):
        parts = r["L_self"] + r["L_cross"] + r["L_latent"] + r["L_sim_s"] + r["L_sim_z"]
        assert abs(parts - r["total"]) < 1e-5


def test_loss_decreases(tiny_train_cfg, tmp_path):
    st = trainer.train(dataclasses.replace(tiny_train_cfg, epochs=6), tmp_path)
    assert st.history[-1]["total"] < st.history[0]["total"]


def test_checkpoint_files_and_roundtrip(tiny_train_cfg, tmp_path):
    st = trainer.train(tiny_train_cfg, tmp_path)
    assert (tmp_path / "ckpt" / "last.ckpt").exists()
    assert (tmp_path / "config.json").exists()
    model, header, _ = trainer.load_checkpoint(tmp_path / "ckpt" / "last.ckpt")
    assert header["epoch"] == 2 and len(header["history"]) == 2
    assert trainer.config_from_checkpoint(header) == tiny_train_cfg
    x = torch.randn(2, 1, 32, 32)
    st.model.eval()
    with torch.no_grad():
        assert torch.equal(model.encode_modality(x, 0), st.model.encode_modality(x, 0))
        assert torch.equal(model.encode_anatomy(x, 1), st.model.encode_anatomy(x, 1))
    assert all("val_s_gap" in h or len(synthdata.load_dataset(tiny_train_cfg.dataset, "val")) < 2
               for h in st.history)


def test_missing_optimizer_tensor(tiny_train_cfg, tmp_path):
    trainer.train(dataclasses.replace(tiny_train_cfg, epochs=1), tmp_path)
    header, tensors = tensorio.read_archive(tmp_path / "ckpt" / "last.ckpt")
    victim = next(k for k in sorted(tensors) if k.startswith("optim/"))
    del tensors[victim]
    tensorio.write_archive(tmp_path / "bad.ckpt", header, tensors)
    with pytest.raises(CheckpointError, match=victim):
        trainer.resume(tmp_path / "bad.ckpt", tiny_train_cfg, tmp_path / "r")


def test_stdout_logging(tiny_train_cfg, tmp_path, capsys):
    trainer.train(dataclasses.replace(tiny_train_cfg, epochs=1), tmp_path, stdout=True)
    lines = [l for l in capsys.readouterr().out.splitlines() if l.startswith("{")]
    assert lines and all("total" in json.loads(l) for l in lines)


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("DMRL_NUM_WORKERS", "3")
    monkeypatch.delenv("DMRL_DETERMINISTIC", raising=False)
    assert trainer.num_workers() == 3
    monkeypatch.setenv("DMRL_DETERMINISTIC", "1")
    assert trainer.num_workers() == 0
    monkeypatch.setenv("DMRL_DETERMINISTIC", "0")
    monkeypatch.setenv("DMRL_NUM_WORKERS", "x")
    with pytest.raises(ConfigError):
        trainer.num_workers()


def test_background_workers_give_same_batches(tiny_train_cfg, monkeypatch):
    imgs = np.random.default_rng(0).standard_normal((7, 2, 1, 8, 8)).astype(np.float32)
    ref = list(trainer.epoch_batches(imgs, tiny_train_cfg, 3))
    got = list(trainer._prefetch(trainer.epoch_batches(imgs, tiny_train_cfg, 3), 2))
    assert len(ref) == len(got)
    for (a, pa), (b, pb) in zip(ref, got):
        assert torch.equal(a, b) and torch.equal(pa, pb)


def test_flip_is_shared_across_modalities(tiny_train_cfg):
    cfg = dataclasses.replace(tiny_train_cfg, flip_prob=1.0)
    imgs = np.random.default_rng(0).standard_normal((4, 2, 1, 8, 8)).astype(np.float32)
    imgs[:, 1] = imgs[:, 0]
    for x, _ in trainer.epoch_batches(imgs, cfg, 0):
        assert torch.equal(x[:, 0], x[:, 1])
