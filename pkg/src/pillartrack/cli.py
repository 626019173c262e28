"""Command-line entry points: train, eval, sweep, ablate.

Every command is reproducible from (config, seed): the resolved config is
written next to each artifact and embedded in checkpoints, and eval
refuses a checkpoint whose config hash disagrees with an explicitly
provided config. Exit codes: 0 ok, 2 config error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, describe_keys
from .geometry import center_distance, iou3d
from .model import TrackNet, build_model
from .seqio import SequenceFormatError, read_sequence, write_sequence
from .synthdata import generate_batch, plot_sweep, sparsity_sweep
from .tracker import evaluate_sequences
from .training import TrainingDiverged, build_training_samples, run_training

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class DataError(Exception):
    pass


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig.defaults()
    return cfg.with_overrides(args.set or [])


def _load_sequences(args, cfg: RunConfig, seed: int, n_synth_default: int):
    if getattr(args, "data", None):
        seqs = []
        for path in args.data:
            if not Path(path).exists():
                raise DataError(f"sequence file not found: {path}")
            seqs.append(read_sequence(path))
        return seqs
    n = getattr(args, "synth", None) or n_synth_default
    return generate_batch(cfg.scenario_config(), n, seed=seed)


def save_checkpoint(path, model: TrackNet, optimizer, cfg: RunConfig,
                    step: int, seed: int) -> None:
    torch.save({
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config_text": cfg.dump(),
        "config_hash": cfg.hash(),
        "step": step,
        "seed": seed,
    }, path)


def load_checkpoint(path, expect_config: RunConfig | None = None):
    if not Path(path).exists():
        raise DataError(f"checkpoint not found: {path}")
    blob = torch.load(path, weights_only=False)
    cfg = RunConfig.parse(blob["config_text"])
    if cfg.hash() != blob["config_hash"]:
        raise DataError("checkpoint is corrupt: embedded config hash mismatch")
    if expect_config is not None and expect_config.hash() != blob["config_hash"]:
        raise ConfigError("provided config does not match the checkpoint's "
                          f"(hash {expect_config.hash()[:12]} vs "
                          f"{blob['config_hash'][:12]})")
    return cfg, blob


def _restore_model(blob, cfg: RunConfig, seed: int) -> TrackNet:
    model = build_model(cfg.model_config(), seed=seed)
    model.load_state_dict(blob["state_dict"])
    return model


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True)

    start_step = 0
    optimizer = None
    if args.resume:
        ckpt_cfg, blob = load_checkpoint(args.resume)
        if ckpt_cfg.hash() != cfg.hash():
            raise ConfigError("resume checkpoint was trained with a different "
                              "config")
        model = _restore_model(blob, cfg, seed=args.seed)
        start_step = blob["step"]
        from .training import make_optimizer

        optimizer = make_optimizer(model, lr=cfg["train.lr"],
                                   weight_decay=cfg["train.weight_decay"])
        if blob["optimizer"] is not None:
            optimizer.load_state_dict(blob["optimizer"])
    else:
        model = build_model(cfg.model_config(), seed=args.seed)

    seqs = _load_sequences(args, cfg, seed=args.seed,
                           n_synth_default=cfg["synth.sequences"])
    samples = build_training_samples(
        seqs, model.cfg, strategy=cfg["tracker.strategy"],
        margin=cfg["tracker.margin"], seed=args.seed,
        jitter_xy=cfg["train.jitter_xy"], jitter_yaw=cfg["train.jitter_yaw"])

    metrics_path = out / "metrics.ndjson"
    mode = "a" if args.resume else "w"
    with open(metrics_path, mode, encoding="utf-8") as fh:
        def emit(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        metrics, optimizer = run_training(
            model, samples,
            steps=args.steps if args.steps is not None else cfg["train.steps"],
            batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
            weight_decay=cfg["train.weight_decay"],
            milestones=cfg.milestone_steps(), gamma=cfg["train.gamma"],
            weights=cfg.loss_weights(), seed=args.seed,
            stage_one_dense=cfg["train.stage_one_dense"],
            start_step=start_step, optimizer=optimizer, on_step=emit)

    final_step = metrics[-1]["step"] + 1 if metrics else start_step
    save_checkpoint(out / "checkpoint.pt", model, optimizer, cfg,
                    step=final_step, seed=args.seed)
    (out / "config.resolved").write_text(cfg.dump(), encoding="utf-8")
    print(f"trained {len(metrics)} steps -> {out / 'checkpoint.pt'}")
    if metrics:
        print(f"final loss {metrics[-1]['loss']:.4f} "
              f"(cls {metrics[-1]['cls']:.4f}, l1 {metrics[-1]['l1']:.4f})")
    return EXIT_OK


def _write_eval_outputs(out: Path, results, summary, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.txt", "w", encoding="utf-8") as fh:
        fh.write("# seq_id frame_idx x y z w l h yaw iou dist\n")
        for seq, boxes, _ in results:
            for idx, box in enumerate(boxes):
                gt = seq.boxes[idx]
                vals = " ".join(format(v, ".17g") for v in box.to_array())
                fh.write(f"{seq.seq_id} {idx} {vals} "
                         f"{iou3d(box, gt):.6f} {center_distance(box, gt):.6f}\n")
    lines = [f"{'category':>12} {'frames':>7} {'Success':>9} {'Precision':>10}"]
    for cat, (n, s, p) in summary.per_category.items():
        lines.append(f"{cat:>12} {n:>7} {s:>9.2f} {p:>10.2f}")
    lines.append(f"{'Mean':>12} {summary.total_frames:>7} "
                 f"{summary.mean_success:>9.2f} {summary.mean_precision:>10.2f}")
    table = "\n".join(lines)
    (out / "summary.txt").write_text(table + "\n", encoding="utf-8")
    (out / "config.resolved").write_text(cfg.dump(), encoding="utf-8")
    print(table)


def cmd_eval(args) -> int:
    expect = RunConfig.load(args.config) if args.config else None
    cfg, blob = load_checkpoint(args.checkpoint, expect_config=expect)
    model = _restore_model(blob, cfg, seed=blob.get("seed", 0))
    seqs = _load_sequences(args, cfg, seed=args.seed, n_synth_default=8)
    if not seqs:
        raise DataError("no sequences to evaluate")
    strategy = args.strategy or cfg["tracker.strategy"]
    results, summary = evaluate_sequences(seqs, model, strategy,
                                          margin=cfg["tracker.margin"],
                                          seed=args.seed)
    _write_eval_outputs(Path(args.out), results, summary, cfg)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg, blob = load_checkpoint(args.checkpoint)
    model = _restore_model(blob, cfg, seed=blob.get("seed", 0))
    try:
        counts = [int(v) for v in args.buckets.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad bucket list {args.buckets!r}") from exc
    result = sparsity_sweep(model, cfg.scenario_config(), counts,
                            sequences_per_bucket=args.sequences_per_bucket,
                            strategy=cfg["tracker.strategy"], seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = result.format_table()
    rho = result.spearman_success()
    (out / "sweep.txt").write_text(
        table + f"\n\nspearman(points, success) = {rho:.4f}\n", encoding="utf-8")
    plot_sweep(result, out / "sweep.png")
    (out / "config.resolved").write_text(cfg.dump(), encoding="utf-8")
    print(table)
    print(f"spearman(points, success) = {rho:.4f}")
    return EXIT_OK


def cmd_gen(args) -> int:
    """Materialize synthetic sequences as pcseq files for --data workflows."""
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seqs = generate_batch(cfg.scenario_config(), args.count, seed=args.seed)
    for seq in seqs:
        write_sequence(out / f"{seq.seq_id}.pcseq", seq, mode=args.format)
    (out / "config.resolved").write_text(cfg.dump(), encoding="utf-8")
    print(f"wrote {len(seqs)} sequences ({args.format}) to {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.variant:
        raise ConfigError("ablation needs at least one --variant")
    base = _load_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for variant in args.variant:
        overrides = [item for item in variant.split(",") if item]
        cfg = base.with_overrides(overrides)
        succ, prec = [], []
        for seed in seeds:
            model = build_model(cfg.model_config(), seed=seed)
            train_seqs = generate_batch(cfg.scenario_config(),
                                        cfg["synth.sequences"], seed=seed)
            samples = build_training_samples(
                train_seqs, model.cfg, strategy=cfg["tracker.strategy"],
                margin=cfg["tracker.margin"], seed=seed,
                jitter_xy=cfg["train.jitter_xy"],
                jitter_yaw=cfg["train.jitter_yaw"])
            run_training(model, samples, steps=cfg["train.steps"],
                         batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                         weight_decay=cfg["train.weight_decay"],
                         milestones=cfg.milestone_steps(), gamma=cfg["train.gamma"],
                         weights=cfg.loss_weights(), seed=seed,
                         stage_one_dense=cfg["train.stage_one_dense"])
            eval_seqs = generate_batch(cfg.scenario_config(),
                                       args.eval_sequences,
                                       seed=seed + 10_000)
            _, summary = evaluate_sequences(eval_seqs, model,
                                            cfg["tracker.strategy"],
                                            margin=cfg["tracker.margin"],
                                            seed=seed)
            succ.append(summary.mean_success)
            prec.append(summary.mean_precision)
        rows.append((variant, float(np.median(succ)), float(np.median(prec)),
                     succ, prec))

    lines = [f"{'variant':40s} {'Success':>9} {'Precision':>10}  (median over "
             f"seeds {seeds})"]
    for name, s, p, _, _ in rows:
        lines.append(f"{name:40s} {s:>9.2f} {p:>10.2f}")
    table = "\n".join(lines)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump([{"variant": n, "success_median": s, "precision_median": p,
                    "success": ss, "precision": pp}
                   for n, s, p, ss, pp in rows], fh, indent=2)
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pillartrack",
        description="Pillar-BEV Siamese single-object tracker")
    parser.add_argument("--help-config", action="store_true",
                        help="print all config keys with defaults and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="run config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="output directory")

    p_train = sub.add_parser("train", help="train a model")
    common(p_train)
    p_train.add_argument("--data", nargs="*", help="sequence files "
                         "(default: synthetic per config)")
    p_train.add_argument("--steps", type=int, help="override train.steps")
    p_train.add_argument("--resume", help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint (OPE)")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", nargs="*", help="sequence files")
    p_eval.add_argument("--synth", type=int,
                        help="evaluate on N synthetic sequences instead")
    p_eval.add_argument("--strategy", choices=["F", "P", "FP", "AP"],
                        help="template source (default from config)")

    p_sweep = sub.add_parser("sweep", help="sparsity sweep with plot")
    common(p_sweep)
    p_sweep.add_argument("--checkpoint", required=True)
    p_sweep.add_argument("--buckets", default="8,16,32,64,128,256")
    p_sweep.add_argument("--sequences-per-bucket", type=int, default=30)

    p_ablate = sub.add_parser("ablate", help="train/eval config variants")
    common(p_ablate)
    p_ablate.add_argument("--variant", action="append",
                          metavar="KEY=VALUE[,KEY=VALUE...]",
                          help="one table row per variant (repeatable)")
    p_ablate.add_argument("--seeds", default="0,1,2")
    p_ablate.add_argument("--eval-sequences", type=int, default=8)

    p_gen = sub.add_parser("gen", help="write synthetic sequences to files")
    common(p_gen)
    p_gen.add_argument("--count", type=int, default=10)
    p_gen.add_argument("--format", choices=["text", "binary"], default="text")
    return parser


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "ablate": cmd_ablate, "gen": cmd_gen}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.help_config:
        print(describe_keys())
        return EXIT_OK
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, SequenceFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDiverged as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
