"""Command-line entry point: ``dmrl <subcommand> ...``.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import DataConfig, TaskConfig, TrainConfig, config_hash, load_config
from .errors import ConfigError, DMRLError

log = logging.getLogger("dmrl")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage errors are validation errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _emit(report: dict, out: Path | None) -> None:
    text = json.dumps(report, indent=1, sort_keys=True)
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
        log.info("wrote %s", out)
    print(text)


def new_run_dir(root: Path, cfg) -> Path:
    """``<root>/<timestamp>-<hash8>``; a numeric suffix avoids collisions."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{config_hash(cfg)[:8]}"
    path, k = base, 1
    while path.exists():
        path = base.with_name(f"{base.name}-{k}")
        k += 1
    for sub in ("ckpt", "reports", "plots"):
        (path / sub).mkdir(parents=True, exist_ok=True)
    return path


def _reports_dir(ckpt: Path) -> Path:
    # checkpoints live in <run>/ckpt/; reports go next to them when possible
    run = ckpt.parent.parent if ckpt.parent.name == "ckpt" else ckpt.parent
    return run / "reports"


def _load_encoder(ckpt: str):
    from . import nets

    model, header, _ = nets.load_model(ckpt)
    return model, header


def _split_samples(header: dict, dataset: str | None, split: str):
    from . import synthdata

    ds = dataset or header.get("config", {}).get("dataset")
    if not ds:
        raise ConfigError("dataset: checkpoint has no dataset path; pass --dataset")
    man = synthdata.read_manifest(ds)
    samples = synthdata.load_dataset(ds, split)
    if not samples:
        raise ConfigError(f"split: {split!r} is empty in {ds}")
    return man, samples


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    from . import synthdata

    cfg = load_config(args.config, DataConfig) if args.config else DataConfig()
    man = synthdata.build_dataset(cfg, args.out)
    print(json.dumps({"manifest": str(Path(args.out) / "manifest.json"), "subjects": len(man["subjects"]),
                      "config_hash": man["config_hash"]}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    from . import trainer

    cfg = load_config(args.config, TrainConfig)
    if args.dataset:
        cfg.dataset = args.dataset
    if args.epochs is not None:
        cfg.epochs = args.epochs
    cfg.validate()
    if not cfg.dataset:
        raise ConfigError("dataset: required (path to a dataset manifest or directory)")
    if args.resume:
        ckpt = Path(args.resume)
        run = Path(args.run_dir) if args.run_dir else _reports_dir(ckpt).parent
        st = trainer.resume(ckpt, cfg, run, force=args.force, stdout=not args.quiet)
    else:
        run = Path(args.run_dir) if args.run_dir else new_run_dir(Path(args.runs_root), cfg)
        st = trainer.train(cfg, run, stdout=not args.quiet)
    print(json.dumps({"run_dir": str(run), "epoch": st.epoch, "step": st.step,
                      "config_hash": config_hash(cfg)}, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    from . import evalmetrics

    model, header = _load_encoder(args.ckpt)
    _, samples = _split_samples(header, args.dataset, args.split)
    report = evalmetrics.cross_recon_eval(model, samples)
    report.update(kind="recon", split=args.split, checkpoint=str(args.ckpt),
                  config_hash=header.get("config_hash"), epoch=header.get("epoch"))
    out = Path(args.out) if args.out else _reports_dir(Path(args.ckpt)) / f"recon_{args.split}.json"
    _emit(report, out)
    return EXIT_OK


def cmd_eval_disent(args) -> int:
    from . import evalmetrics

    model, header = _load_encoder(args.ckpt)
    _, samples = _split_samples(header, args.dataset, args.split)
    pool = header.get("config", {}).get("pool_size", 8)
    report = evalmetrics.disentanglement_eval(model, samples, args.pairs, pool, args.seed)
    report.update(kind="disent", split=args.split, checkpoint=str(args.ckpt),
                  config_hash=header.get("config_hash"), epoch=header.get("epoch"))
    out = Path(args.out) if args.out else _reports_dir(Path(args.ckpt)) / f"disent_{args.split}.json"
    _emit(report, out)
    return EXIT_OK


def cmd_export_emb(args) -> int:
    from . import evalmetrics

    model, header = _load_encoder(args.ckpt)
    _, samples = _split_samples(header, args.dataset, args.split)
    pool = header.get("config", {}).get("pool_size", 8)
    info = evalmetrics.export_embeddings(model, samples, args.out, pool)
    info["config_hash"] = header.get("config_hash")
    (Path(args.out) / "export.json").write_text(json.dumps(info, indent=1, sort_keys=True), encoding="utf-8")
    print(json.dumps(info, sort_keys=True))
    return EXIT_OK


def cmd_train_task(args) -> int:
    from . import downstream

    spec = load_config(args.spec, TaskConfig)
    if args.encoder:
        spec.encoder = args.encoder
    if args.dataset:
        spec.dataset = args.dataset
    if not spec.dataset and spec.encoder:
        _, header = _load_encoder(spec.encoder)
        spec.dataset = header.get("config", {}).get("dataset")
    if not spec.dataset:
        raise ConfigError("dataset: required (set it in the spec or pass --dataset)")
    spec.validate()
    out = Path(args.out) if args.out else new_run_dir(Path(args.runs_root), spec)
    res = downstream.train_downstream(spec, out, stdout=not args.quiet)
    summary = {"checkpoint": str(res.path), "history": res.history, "config_hash": config_hash(spec),
               "encoder_unchanged": res.encoder_digest_before == res.encoder_digest_after}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_eval_task(args) -> int:
    from . import downstream

    try:
        drop = sorted({int(d) for group in args.drop for d in str(group).split(",") if d != ""})
    except ValueError:
        raise ConfigError(f"drop: expected modality ids, got {args.drop}") from None
    report = downstream.eval_missing(args.ckpt, drop, args.split, args.dataset, args.fill)
    report["config_hash"] = report["task_config_hash"]
    out = Path(args.out) if args.out else None
    _emit(report, out)
    return EXIT_OK


def cmd_plot(args) -> int:
    report_path = Path(args.report)
    try:
        report = json.loads(report_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"report: cannot read {report_path}: {exc}") from None
    if args.config:
        cls = TaskConfig if "task_config_hash" in report else TrainConfig
        want = config_hash(load_config(args.config, cls))
        if report.get("config_hash") != want and not args.force:
            raise ConfigError(
                f"config: report was produced by config {str(report.get('config_hash'))[:8]}, "
                f"{args.config} hashes to {str(want)[:8]}; pass --force to plot anyway"
            )
    out = Path(args.out) if args.out else report_path.parent.parent / "plots" / (report_path.stem + ".png")
    path = plot_report(report, out, log_path=Path(args.log) if args.log else None)
    print(json.dumps({"plot": str(path), "config_hash": report.get("config_hash")}, sort_keys=True))
    return EXIT_OK


def plot_report(report: dict, out: Path, log_path: Path | None = None) -> Path:
    """Bar charts for recon/disent/task reports, plus loss curves from a log."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = 2 if log_path else 1
    fig, axes = plt.subplots(1, panels, figsize=(5 * panels, 3.6), squeeze=False)
    ax = axes[0, 0]
    kind = report.get("kind")
    if kind == "recon":
        mods = sorted(report["self"], key=int)
        xs = range(len(mods))
        ax.bar([i - 0.2 for i in xs], [report["self"][j]["psnr"] for j in mods], 0.4, label="self")
        ax.bar([i + 0.2 for i in xs], [report["cross"][j]["psnr"] for j in mods], 0.4, label="cross")
        ax.set_xticks(list(xs), [f"modality {j}" for j in mods])
        ax.set_ylabel("PSNR (dB)")
        ax.legend()
    elif kind == "disent":
        keys = [k for k in ("s_gap", "z_gap", "probe_modality_from_z", "probe_modality_from_s",
                            "silhouette_z_by_modality", "silhouette_s_by_subject") if k in report]
        ax.bar(range(len(keys)), [report[k] for k in keys])
        ax.set_xticks(range(len(keys)), keys, rotation=30, ha="right", fontsize=7)
    elif "dice" in report or "psnr" in report:
        key = "dice" if "dice" in report else "psnr"
        ax.bar([0], [report[key]])
        ax.set_xticks([0], [f"drop={report.get('drop', [])}"])
        ax.set_ylabel(key)
    else:
        raise ConfigError("report: unrecognised report kind")
    ax.set_title(f"{kind or 'task'} [{str(report.get('config_hash'))[:8]}]", fontsize=9)
    if log_path:
        from .trainer import read_log

        recs = read_log(log_path)
        ax2 = axes[0, 1]
        for term in ("total", "L_self", "L_cross", "L_latent", "L_sim_s", "L_sim_z"):
            if recs and term in recs[0]:
                ax2.plot([r["step"] for r in recs], [r[term] for r in recs], label=term, lw=1)
        ax2.set_xlabel("step")
        ax2.set_yscale("symlog", linthresh=1e-2)
        ax2.legend(fontsize=7)
    fig.tight_layout()
    out.parent.mkdir(parents=True, exist_ok=True)
    # the hash goes into the PNG metadata too
    fig.savefig(out, dpi=100, metadata={"Comment": f"config_hash={report.get('config_hash')}"})
    plt.close(fig)
    return out


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dmrl", description="Disentangled multi-modal representation learning toolkit.")
    p.add_argument("--version", action="version", version=f"dmrl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-modal dataset")
    g.add_argument("--config", help="DataConfig JSON (defaults when omitted)")
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train the disentangling encoders and decoder")
    t.add_argument("--config", required=True, help="TrainConfig JSON")
    t.add_argument("--dataset", help="override the dataset path")
    t.add_argument("--epochs", type=int, help="override the epoch count")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--force", action="store_true", help="resume even if the config changed")
    t.add_argument("--runs-root", default="runs", help="parent of new run directories (default: runs)")
    t.add_argument("--run-dir", help="explicit run directory")
    t.add_argument("--quiet", action="store_true", help="do not echo JSON-lines logs to stdout")
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval-recon", cmd_eval_recon, "self/cross-reconstruction PSNR and SSIM"),
                          ("eval-disent", cmd_eval_disent, "similarity gaps, silhouettes and probes")):
        e = sub.add_parser(name, help=hlp)
        e.add_argument("--ckpt", required=True, help="model checkpoint")
        e.add_argument("--dataset", help="dataset path (default: from the checkpoint config)")
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--out", help="report path (default: <run>/reports/)")
        if name == "eval-disent":
            e.add_argument("--pairs", type=int, default=500, help="sampled tuples per gap estimate")
            e.add_argument("--seed", type=int, default=0)
        e.set_defaults(func=fn)

    x = sub.add_parser("export-emb", help="export z, pooled s and fused s as tensor files")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--dataset")
    x.add_argument("--split", default="test", choices=("train", "val", "test"))
    x.add_argument("--out", required=True, help="output directory")
    x.set_defaults(func=cmd_export_emb)

    tt = sub.add_parser("train-task", help="train a downstream task model")
    tt.add_argument("--spec", required=True, help="TaskConfig JSON")
    tt.add_argument("--encoder", help="frozen encoder checkpoint (fused input)")
    tt.add_argument("--dataset", help="override the dataset path")
    tt.add_argument("--runs-root", default="runs")
    tt.add_argument("--out", help="explicit output directory")
    tt.add_argument("--quiet", action="store_true")
    tt.set_defaults(func=cmd_train_task)

    et = sub.add_parser("eval-task", help="evaluate a task model with modalities missing")
    et.add_argument("--ckpt", required=True, help="task checkpoint")
    et.add_argument("--drop", action="append", default=[], help="modality id(s) to drop; repeat or comma-separate")
    et.add_argument("--fill", choices=("zero", "avg"), help="raw-stack fill for dropped modalities")
    et.add_argument("--split", default="test", choices=("train", "val", "test"))
    et.add_argument("--dataset")
    et.add_argument("--out", help="report path")
    et.set_defaults(func=cmd_eval_task)

    pl = sub.add_parser("plot", help="render a report (and optional loss log) to PNG")
    pl.add_argument("--report", required=True)
    pl.add_argument("--config", help="config the report should match")
    pl.add_argument("--log", help="log.jsonl for loss curves")
    pl.add_argument("--force", action="store_true", help="plot even if the config hash differs")
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("dmrl: error: a subcommand is required", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"dmrl: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except KeyboardInterrupt:
        print("dmrl: interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except (DMRLError, OSError, ValueError, RuntimeError) as exc:
        print(f"dmrl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
