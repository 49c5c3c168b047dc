"""``heartlora`` command line.

Every run writes into ``$HEARTLORA_RUN_DIR/<name>`` (default root ``./runs``).
A run directory that already holds files is never overwritten unless
``--force`` is given. Failures print one JSON line to stderr::

    {"error": "<ExceptionType>", "message": "..."}

and exit with status 1 (status 2 for bad arguments).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import io as hio
from .config import SECTIONS, ConfigFileError, RunConfig, load_config
from .data import SPLITS, SyntheticTaskSpec, generate, pretrain_spec
from .model import ModelConfig
from .responsiveness import CRITERIA, MODES, TAYLOR_VARIANTS, accumulate, score_adapters
from .training import (
    AUTO_CRITERION,
    LONG_EPOCHS,
    LONG_WARMUP,
    _continue,
    compare,
    evaluate,
    pretrain_backbone,
    sweep_ne,
    warmup_only,
)

logger = logging.getLogger("heartlora")

RUN_DIR_ENV = "HEARTLORA_RUN_DIR"
DEFAULT_SWEEP = "0,1,3,5,7"
TABLE_COLUMNS = ("method", "ne", "quantize", "criterion", "warmup_loss", "val_accuracy", "test_accuracy",
                 "stored_adapter_bytes", "value_output_flops", "fallback")


class CLIError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": message}), file=sys.stderr)
        raise SystemExit(2)


# --- argument plumbing -----------------------------------------------------


def _ne_list(text: str) -> list:
    try:
        values = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--ne expects comma-separated integers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("--ne needs at least one value")
    return values


def _config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="INI run config")
    g.add_argument("--name", help="run directory name under $HEARTLORA_RUN_DIR")
    g.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    g.add_argument("--seed", type=int, help="seed for the adaptation plan and the task data")
    g.add_argument("--quantize", action=argparse.BooleanOptionalAction, default=None, help="int8 adapters")
    g.add_argument("--criterion", choices=CRITERIA + (AUTO_CRITERION,))
    g.add_argument("--variant", choices=sorted(TAYLOR_VARIANTS), help="shorthand for a Taylor criterion")
    g.add_argument("--mode", choices=MODES)
    g.add_argument("--long-schedule", action="store_true",
                   help=f"{LONG_EPOCHS} epochs with a {LONG_WARMUP}-epoch warm-up instead of the desk preset")
    g.add_argument("--backbone", help="pretrained backbone checkpoint")
    g.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config field, e.g. train.epochs=10 (repeatable)")
    for section, cls in SECTIONS.items():
        for f in fields(cls):
            g.add_argument(f"--{section}.{f.name}", dest=f"cfg__{section}__{f.name}", default=None,
                           help=argparse.SUPPRESS)


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: dict = {}
    if args.long_schedule:
        overrides[("train", "epochs")] = LONG_EPOCHS
        overrides[("train", "warmup_epochs")] = LONG_WARMUP
    for key, value in vars(args).items():
        if key.startswith("cfg__") and value is not None:
            _, sec, name = key.split("__", 2)
            overrides[(sec, name)] = value
    for item in args.set:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigFileError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sec, name = k.split(".", 1)
        overrides[(sec.strip(), name.strip())] = v
    if args.seed is not None:
        overrides[("train", "seed")] = args.seed
        overrides[("data", "seed")] = args.seed
    if args.quantize is not None:
        overrides[("train", "quantize")] = args.quantize
    if args.variant is not None:
        if args.criterion is not None and args.criterion != TAYLOR_VARIANTS[args.variant]:
            raise ConfigFileError("--variant and --criterion disagree")
        overrides[("train", "criterion")] = TAYLOR_VARIANTS[args.variant]
    elif args.criterion is not None:
        overrides[("train", "criterion")] = args.criterion
    if args.mode is not None:
        overrides[("train", "mode")] = args.mode
    if getattr(args, "backbone", None):
        overrides[("paths", "backbone")] = args.backbone
    return cfg.with_overrides(overrides)


def _run_dir(args, default_name: str) -> Path:
    root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
    path = root / (args.name or default_name)
    if path.exists() and any(path.iterdir()):
        if not args.force:
            raise CLIError(f"run directory {path} already exists; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(run_dir: Path, cfg: Optional[RunConfig], argv: list) -> None:
    if cfg is not None:
        (run_dir / "config.ini").write_text(cfg.to_ini(), encoding="utf-8")
    (run_dir / "command.json").write_text(json.dumps({"argv": argv}, indent=1) + "\n", encoding="utf-8")


def _write_table(rows: list, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(TABLE_COLUMNS), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in TABLE_COLUMNS})


def _print_table(rows: list, title: str) -> None:
    print(title)
    cols = TABLE_COLUMNS
    fmt = []
    for r in rows:
        fmt.append([f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols])
    widths = [max(len(c), *(len(f[i]) for f in fmt)) if fmt else len(c) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for f in fmt:
        print("  ".join(v.ljust(w) for v, w in zip(f, widths)))


# --- shared steps ----------------------------------------------------------


def _pretrain_task(cfg: RunConfig) -> SyntheticTaskSpec:
    return pretrain_spec(cfg.data)


def _get_backbone(cfg: RunConfig):
    pre_task = _pretrain_task(cfg)
    expected = ModelConfig.from_dict(dict(cfg.model.to_dict(), num_classes=pre_task.num_classes))
    if cfg.paths.backbone:
        return hio.load_checkpoint(cfg.paths.backbone, expect_model=expected).weights(train_classifier=False)
    logger.info("no backbone given; pretraining one in-process")
    weights, _ = _pretrain(cfg)
    return weights


def _pretrain(cfg: RunConfig):
    p = cfg.pretrain
    return pretrain_backbone(cfg.model, _pretrain_task(cfg), epochs=p.epochs, learning_rate=p.learning_rate,
                             weight_decay=p.weight_decay, batch_size=p.batch_size, seed=p.seed)


def _run_meta(cfg: RunConfig, **extra) -> dict:
    return {"data": cfg.data.to_dict(), **extra}


# --- subcommands ---------------------------------------------------------


def cmd_pretrain(args, argv) -> dict:
    cfg = _effective_config(args)
    run_dir = _run_dir(args, f"pretrain-seed{cfg.pretrain.seed}")
    _echo_config(run_dir, cfg, argv)
    weights, metrics = _pretrain(cfg)
    hio.save_checkpoint(run_dir / "backbone.hlra", weights, extra=_run_meta(cfg, kind="backbone", metrics=metrics))
    (run_dir / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n", encoding="utf-8")
    print(f"pretrain val_accuracy={metrics['val_accuracy']:.4f} checkpoint={run_dir / 'backbone.hlra'}")
    return {"run_dir": str(run_dir), **metrics}


def cmd_adapt(args, argv) -> dict:
    cfg = _effective_config(args)
    plan = cfg.train
    run_dir = _run_dir(args, f"adapt-seed{plan.seed}-ne{plan.ne}")
    _echo_config(run_dir, cfg, argv)
    backbone = _get_backbone(cfg)
    splits = generate(cfg.data)
    session = warmup_only(plan, backbone, splits)
    hio.save_checkpoint(run_dir / "warmup.hlra", session.weights, session.adapters, session.optimizer.state, None,
                        plan, extra=_run_meta(cfg, kind="warmup", step=session.step), score_grads=session.score_grads)
    res = _continue(session, None, time.perf_counter())
    hio.save_checkpoint(run_dir / "final.hlra", res.weights, res.adapters, res.optimizer_state, res.pattern, plan,
                        extra=_run_meta(cfg, kind="final", criterion_used=res.criterion_used))
    hio.export_pattern(res.pattern, run_dir / "pattern.json")
    if res.report is not None:
        hio.export_responsiveness_csv(res.report, run_dir / "responsiveness.csv")
    hio.write_run_record(res.record, run_dir)
    print(f"adapt test_accuracy={res.record.test_accuracy:.4f} pattern={res.pattern.digest()} "
          f"criterion={res.criterion_used or '-'} run_dir={run_dir}")
    return {"run_dir": str(run_dir), "test_accuracy": res.record.test_accuracy}


def cmd_score(args, argv) -> dict:
    ck = hio.load_checkpoint(args.checkpoint)
    grads = ck.score_grads()
    if not grads:
        raise CLIError("checkpoint holds no warm-up scoring gradients (use warmup.hlra from an adapt run)")
    plan = ck.plan or {}
    criterion = TAYLOR_VARIANTS[args.variant] if args.variant else (args.criterion or "taylor_raw")
    mode = args.mode or "global"
    cfg = ck.model_config
    scores = score_adapters(ck.adapters(), cfg.num_layers, cfg.num_heads, criterion, grads=grads,
                            reduction=plan.get("score_reduction", "sum"), quantize=bool(plan.get("quantize", False)))
    report = accumulate(scores, mode, criterion, [cfg.num_heads] * cfg.num_layers, step=ck.meta.get("step", 0))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"responsiveness-{criterion}-{mode}.csv")
    if out.exists() and not args.force:
        raise CLIError(f"{out} exists; pass --force to overwrite")
    hio.export_responsiveness_csv(report, out)
    print(f"score criterion={criterion} mode={mode} rows={sum(len(r) for r in report.scores)} out={out}")
    return {"out": str(out)}


def cmd_eval(args, argv) -> dict:
    ck = hio.load_checkpoint(args.checkpoint)
    if "data" not in ck.meta:
        raise CLIError("checkpoint has no task description to regenerate the split")
    task = SyntheticTaskSpec.from_dict(ck.meta["data"])
    if ck.meta.get("kind") == "backbone":
        task = _pretrain_task(RunConfig(data=task))
    split = generate(task)[args.split]
    plan = ck.plan or {}
    acc = evaluate(ck.weights(), ck.adapters() or None, ck.pattern(), split,
                   quantize=bool(plan.get("quantize", False)) and bool(ck.adapters()))
    print(f"eval split={args.split} accuracy={acc:.4f}")
    return {"accuracy": acc}


def cmd_sweep(args, argv) -> dict:
    cfg = _effective_config(args)
    run_dir = _run_dir(args, f"sweep-seed{cfg.train.seed}")
    _echo_config(run_dir, cfg, argv)
    ne_values = args.ne or _ne_list(DEFAULT_SWEEP)
    bad = [n for n in ne_values if not 0 <= n <= cfg.model.num_heads]
    if bad:
        raise CLIError(f"ne values {bad} outside [0, {cfg.model.num_heads}]")
    rows, results = sweep_ne(cfg.train, _get_backbone(cfg), generate(cfg.data), ne_values)
    _write_table(rows, run_dir / "sweep.csv")
    for row, res in zip(rows, results):
        hio.write_run_record(res.record, run_dir / f"ne{row['ne']}")
    _print_table(rows, "sweep")
    return {"rows": rows}


def cmd_compare(args, argv) -> dict:
    cfg = _effective_config(args)
    run_dir = _run_dir(args, f"compare-seed{cfg.train.seed}")
    _echo_config(run_dir, cfg, argv)
    if args.ne:
        cfg = cfg.with_overrides({("train", "ne"): args.ne[0]})
    rows, quant_rows, results = compare(cfg.train, _get_backbone(cfg), generate(cfg.data), with_fp32=args.fp32)
    _write_table(rows, run_dir / "compare.csv")
    _print_table(rows, "compare")
    if quant_rows:
        _write_table(quant_rows, run_dir / "quantization.csv")
        _print_table(quant_rows, "quantization")
    for row, res in zip(rows, results):
        hio.write_run_record(res.record, run_dir / row["method"].replace("(", "_").replace(")", "").replace("=", ""))
    return {"rows": rows, "quant_rows": quant_rows}


def cmd_export(args, argv) -> dict:
    ck = hio.load_checkpoint(args.checkpoint)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / "exports"
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CLIError(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if args.pattern:
        pattern = ck.pattern()
        if pattern is None:
            raise CLIError("checkpoint holds no head pattern")
        hio.export_pattern(pattern, out / "pattern.json")
        written.append("pattern.json")
    if args.heatmap:
        grads = ck.score_grads()
        if not grads:
            raise CLIError("heatmap export needs a warm-up checkpoint with scoring gradients")
        cfg = ck.model_config
        criterion = TAYLOR_VARIANTS[args.variant] if args.variant else (args.criterion or "taylor_raw")
        plan = ck.plan or {}
        scores = score_adapters(ck.adapters(), cfg.num_layers, cfg.num_heads, criterion, grads=grads,
                                reduction=plan.get("score_reduction", "sum"), quantize=bool(plan.get("quantize", False)))
        hio.export_responsiveness_csv(accumulate(scores, "per_layer", criterion), out / "heatmap.csv")
        written.append("heatmap.csv")
    if args.attention:
        if "data" not in ck.meta:
            raise CLIError("checkpoint has no task description to draw a sample from")
        task = SyntheticTaskSpec.from_dict(ck.meta["data"])
        test = generate(task)["test"]
        if not 0 <= args.sample < len(test):
            raise CLIError(f"sample index {args.sample} outside test split of size {len(test)}")
        image = test.normalized()[args.sample]
        plan = ck.plan or {}
        adapters = ck.adapters()
        hio.export_attention_maps(ck.weights(), adapters or None, ck.pattern(), image, out / "attention",
                                  quantize=bool(plan.get("quantize", False)) and bool(adapters))
        written.append("attention/")
    if not written:
        raise CLIError("choose at least one of --pattern, --heatmap, --attention")
    print(f"export out={out} files={','.join(written)}")
    return {"out": str(out), "files": written}


# --- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="heartlora", description="Head-level responsiveness tuning for LoRA on a tiny ViT.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("pretrain", help="train and save a frozen backbone on the pre-task")
    _config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="warm-up, score, mask, continue")
    _config_flags(p)
    p.add_argument("--ne", type=int, help="heads to deactivate per layer")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("score", help="recompute a responsiveness report from a warm-up checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--variant", choices=sorted(TAYLOR_VARIANTS))
    p.add_argument("--mode", choices=("global", "per_layer"))
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="one continuation per ne from a shared warm-up")
    _config_flags(p)
    p.add_argument("--ne", type=_ne_list, help=f"comma-separated ne values (default {DEFAULT_SWEEP})")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="heart vs front-k vs ne=0 on one boundary")
    _config_flags(p)
    p.add_argument("--ne", type=_ne_list, help="ne for the heart and front-k rows")
    p.add_argument("--fp32", action="store_true", help="also contrast int8 and FP32 adapters")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("export", help="pattern, responsiveness heatmap or attention maps")
    p.add_argument("checkpoint")
    p.add_argument("--pattern", action="store_true")
    p.add_argument("--heatmap", action="store_true")
    p.add_argument("--attention", action="store_true")
    p.add_argument("--sample", type=int, default=0, help="test-split index for --attention")
    p.add_argument("--criterion", choices=CRITERIA)
    p.add_argument("--variant", choices=sorted(TAYLOR_VARIANTS))
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[list] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "adapt" and args.ne is not None:
        args.set.append(f"train.ne={args.ne}")
    try:
        args.func(args, argv)
    except (CLIError, ConfigFileError, ValueError, RuntimeError, OSError, KeyError) as e:
        msg = str(e).replace("\n", " ")
        print(json.dumps({"error": type(e).__name__, "message": msg}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
