"""Command-line entry point: ``dualdistill <command> CONFIG [key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from . import config as configmod
from .autodiff import container
from .data import gen_pairs, save_records
from .models import DualStudent, FusionTeacher
from .pipeline import (
    RunReport,
    distill_finetune,
    distill_pretrain,
    evaluate,
    load_checkpoint,
    make_batch,
    new_student,
    save_checkpoint,
    train_teacher,
)
from .serve import build_cache, measure_latency

log = logging.getLogger("dualdistill")

OUTPUT_ENV = "DUALDISTILL_RUNS"
STAGE_FOR = {"pretrain-teacher": "teacher", "distill-pretrain": "distill_pretrain", "distill-finetune": "distill_finetune"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualdistill", description="Fusion-to-dual encoder distillation on synthetic tasks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, help_):
        c = sub.add_parser(name, help=help_)
        c.add_argument("config", help="JSON run configuration")
        c.add_argument("overrides", nargs="*", help="section.key=value overrides applied after parsing")
        c.add_argument("--output-root", default=None, help=f"parent of run directories (default ${OUTPUT_ENV} or ./runs)")
        c.add_argument("--out-dir", default=None, help="exact run directory (overrides --output-root)")
        return c

    add("pretrain-teacher", "train the fusion-encoder teacher")
    c = add("distill-pretrain", "pre-training distillation (CMC / ITM / MLM) into the dual encoder")
    c.add_argument("--teacher", required=True, help="teacher checkpoint")
    c = add("distill-finetune", "fine-tuning distillation on the configured downstream task")
    c.add_argument("--teacher", default=None, help="teacher checkpoint (required unless train.kd=false)")
    c.add_argument("--student", default=None, help="start from this student checkpoint instead of teacher init")
    c = add("eval", "evaluate a teacher or student checkpoint")
    c.add_argument("--checkpoint", required=True)
    c = add("cache", "precompute visual features for an evaluation image set")
    c.add_argument("--student", required=True, help="student checkpoint")
    c.add_argument("--num-images", type=int, default=256)
    add("bench", "latency benchmark: fusion vs cached dual-encoder inference")
    c = add("gen-data", "write a synthetic record file")
    c.add_argument("--count", type=int, default=1024)
    return p


def _run_dir(args, cfg_hash: str) -> Path:
    if args.out_dir:
        d = Path(args.out_dir)
    else:
        root = Path(args.output_root or os.environ.get(OUTPUT_ENV, "runs"))
        d = root / f"{time.strftime('%Y%m%d-%H%M%S')}-{cfg_hash}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _finish(report: RunReport, run: configmod.RunConfigFile, out: Path, command: str) -> None:
    report.config_hash = run.hash()
    report.summary.update(command=command, code_version=__version__)
    report.write(out)


def _load_model(path, model_cfg):
    entries, header = container.load(path)
    if any(k.startswith("teacher/") for k in entries):
        model = FusionTeacher(model_cfg)
    else:
        model = DualStudent(model_cfg)
    model.load_state_dict(entries)
    return model


def dispatch(args) -> int:
    run = configmod.load(args.config, args.overrides)
    stage = STAGE_FOR.get(args.command)
    if stage and run.train.stage != stage:
        run.train = replace(run.train, stage=stage)
    out = _run_dir(args, run.hash())
    run.save(out / "config.json")
    cfg, data, tr = run.model, run.data, run.train
    header = {"config_hash": run.hash(), "seed": tr.seed, "code_version": __version__}

    if args.command == "pretrain-teacher":
        teacher, report = train_teacher(cfg, data, tr)
        save_checkpoint(out / "teacher.ckpt", teacher, header=header)
        _finish(report, run, out, args.command)
    elif args.command == "distill-pretrain":
        teacher = FusionTeacher(cfg)
        load_checkpoint(args.teacher, teacher)
        student = new_student(cfg, teacher, tr.seed)
        student, report, _ = distill_pretrain(student, teacher, data, tr, run.distill)
        save_checkpoint(out / "student.ckpt", student, header=header)
        _finish(report, run, out, args.command)
    elif args.command == "distill-finetune":
        teacher = None
        if args.teacher:
            teacher = FusionTeacher(cfg)
            load_checkpoint(args.teacher, teacher)
        elif tr.kd:
            raise ValueError("distill-finetune with train.kd=true needs --teacher")
        if args.student:
            student = DualStudent(cfg)
            load_checkpoint(args.student, student)
        else:
            student = new_student(cfg, teacher, tr.seed)
        student, report, _ = distill_finetune(student, teacher, data, tr, run.distill)
        save_checkpoint(out / "student.ckpt", student, header=header)
        _finish(report, run, out, args.command)
    elif args.command == "eval":
        model = _load_model(args.checkpoint, cfg)
        metrics = evaluate(model, data, tr.task, tr)
        report = RunReport(run.hash(), tr.seed, summary={"final": metrics, "checkpoint": str(args.checkpoint)})
        _finish(report, run, out, args.command)
        print(json.dumps(metrics, sort_keys=True))
    elif args.command == "cache":
        student = DualStudent(cfg)
        load_checkpoint(args.student, student)
        batch = make_batch(data, tr.task, tr.seed, 0, args.num_images, tr)
        cache = build_cache(student, batch.images)
        cache.save(out / "cache.ddt")
        print(f"cached {len(cache)} images -> {out / 'cache.ddt'}")
    elif args.command == "bench":
        rep = measure_latency(run.bench)
        (out / "latency.json").write_text(rep.to_json() + "\n")
        print(f"fusion {rep.fusion_online * 1e3:.1f} ms, dual {rep.dual_online * 1e3:.1f} ms, "
              f"offline {rep.offline_cache * 1e3:.1f} ms, speedup {rep.speedup:.2f}x, total {rep.total_speedup:.2f}x")
    elif args.command == "gen-data":
        batch = gen_pairs(data, args.count, 0)
        save_records(out / "records.bin", batch)
        labels = np.bincount(batch.labels, minlength=data.num_classes).tolist()
        print(f"wrote {args.count} records to {out / 'records.bin'} (label counts {labels})")
    print(f"run directory: {out}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        return dispatch(args)
    except configmod.ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure: report and exit non-zero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
