"""``misskit`` command line: simulate, evaluate, train-demo, verify.

Directory layout for evaluation::

    <results>/<sequence>/result.txt      one "x,y,w,h" box per frame
    <gt>/<sequence>/gt_rgb.txt           RGB ground truth, same format
    <gt>/<sequence>/gt_tir.txt           optional TIR ground truth

Boxes may be separated by commas, tabs or spaces.  Every command writes a
``manifest.json`` listing its output files with their SHA-256, the format
version and the hash of the resolved configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import FORMAT_VERSION, RunConfig
from .errors import DivergenceError, MisskitError
from .metrics import evaluate_dataset, schedule_hash
from .simulate import (DatasetAssignment, build_missing_dataset, dataset_stats, read_metadata,
                       schedules_from_json, schedules_to_json)

log = logging.getLogger("misskit")

STATS_COLUMNS = ("sequences", "total_frames", "avg_frames", "max_frames",
                 "total_missing", "avg_missing", "max_missing")


class OutputWriter:
    """Collects output files so the manifest can list them; writes are serial."""

    def __init__(self, root: Path, config: RunConfig):
        self.root = Path(root)
        self.config = config
        self.files: dict[str, str] = {}
        self.root.mkdir(parents=True, exist_ok=True)

    def write(self, rel: str, data: str | bytes) -> Path:
        path = self.root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        blob = data.encode("utf-8") if isinstance(data, str) else data
        path.write_bytes(blob)
        self.files[rel] = hashlib.sha256(blob).hexdigest()
        return path

    def json(self, rel: str, doc: dict) -> Path:
        return self.write(rel, json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n")

    def finish(self, command: str) -> Path:
        return self.json("manifest.json", {
            "format_version": FORMAT_VERSION,
            "command": command,
            "config_hash": self.config.hash(),
            "files": dict(sorted(self.files.items())),
        })


def _header(config: RunConfig) -> dict:
    return {"format_version": FORMAT_VERSION, "config_hash": config.hash(), "config": config.to_dict()}


def resolve_threads(flag: int | None) -> int:
    if flag is not None:
        return max(1, flag)
    env = os.environ.get("MISSKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise MisskitError(f"MISSKIT_THREADS must be an integer, got {env!r}") from None
    return 1


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "strategy", None) is not None:
        changes["strategy"] = args.strategy
    return cfg.replace(**changes) if changes else cfg


def read_boxes(path: Path) -> np.ndarray:
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace(",", " ").replace("\t", " ").split()
        if len(parts) != 4:
            raise MisskitError(f"{path}:{lineno}: expected 4 numbers, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise MisskitError(f"{path}:{lineno}: not a number in {line!r}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def write_boxes(path: Path, boxes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(",".join(repr(float(v)) for v in b) + "\n" for b in boxes), encoding="utf-8")


# ------------------------------------------------------------------ simulate


def stats_csv(stats: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("group",) + STATS_COLUMNS)
    rows = [("all", stats)] + [(p, s) for p, s in stats["per_pattern"].items()] \
        + [(f"{r}%", s) for r, s in stats["per_ratio"].items()]
    for name, s in rows:
        w.writerow([name] + [s[c] if isinstance(s[c], int) else f"{s[c]:.4f}" for c in STATS_COLUMNS])
    return buf.getvalue()


def cmd_simulate(args) -> int:
    cfg = load_config(args)
    metas = read_metadata(args.metadata)
    schedules, assignment = build_missing_dataset(metas, cfg.seed)
    out = OutputWriter(args.out, cfg)
    out.write("schedules.json", schedules_to_json(schedules, cfg.seed))
    for s in schedules:
        out.write(f"schedules/{s.name}.csv", s.to_csv())
    out.json("assignment.json", {**_header(cfg), **assignment.to_dict()})
    stats = dataset_stats(schedules)
    out.json("stats.json", {**_header(cfg), "stats": stats})
    out.write("stats.csv", stats_csv(stats))
    out.finish("simulate")
    print(f"{len(schedules)} schedules, {stats['total_missing']} of {stats['total_frames']} frames "
          f"missing a modality -> {out.root}")
    return 0


# ------------------------------------------------------------------ evaluate


def _sequence_names(root: Path) -> list[str]:
    return sorted(p.name for p in root.iterdir() if p.is_dir()) if root.is_dir() else []


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    results_root, gt_root = Path(args.results), Path(args.gt)
    schedules = assignment = None
    sched_text = None
    if args.schedules:
        sched_text = Path(args.schedules).read_bytes()
        sched_list, global_seed = schedules_from_json(sched_text.decode("utf-8"))
        schedules = {s.name: s for s in sched_list}
        assignment = DatasetAssignment(global_seed, {s.name: (s.pattern, s.ratio) for s in sched_list})

    names = sorted(set(_sequence_names(results_root)) | set(_sequence_names(gt_root))
                   | set(schedules or ()))
    # enumerate every missing input before computing anything
    errata = []
    for name in names:
        for root, role, fname in ((results_root, "results", "result.txt"), (gt_root, "gt", "gt_rgb.txt")):
            if not (root / name / fname).is_file():
                errata.append({"sequence": name, "issue": f"missing {role} file {name}/{fname}"})
    for e in errata:
        log.error("%s: %s", e["sequence"], e["issue"])

    broken = {e["sequence"] for e in errata}
    trajectories, truths = {}, {}
    for name in names:
        if name in broken:
            continue
        try:
            trajectories[name] = read_boxes(results_root / name / "result.txt")
            gts = [read_boxes(gt_root / name / "gt_rgb.txt")]
            tir = gt_root / name / "gt_tir.txt"
            if tir.is_file():
                gts.append(read_boxes(tir))
            truths[name] = gts
        except MisskitError as exc:
            errata.append({"sequence": name, "issue": str(exc)})
            broken.add(name)
            trajectories.pop(name, None)

    meta = {**_header(cfg), "compensation": cfg.strategy,
            "schedule_hash": schedule_hash(sched_text) if sched_text is not None else None}
    threads = resolve_threads(args.threads)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            report = evaluate_dataset(trajectories, truths, assignment, schedules,
                                      cfg.pr_threshold, meta, map_fn=pool.map)
    else:
        report = evaluate_dataset(trajectories, truths, assignment, schedules, cfg.pr_threshold, meta)
    # sequences dropped above already have their errata; keep those first
    report.errata = errata + [e for e in report.errata if e["sequence"] not in broken]
    out = OutputWriter(args.out, cfg)
    out.write("report.json", report.to_json())
    out.write("per_sequence.csv", report.to_csv())
    out.finish("evaluate")
    o = report.overall
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(f"{o['sequences']} sequences  MPR {fmt(o['MPR'])}  MSR {fmt(o['MSR'])}  NPR {fmt(o['NPR'])}")
    if report.errata:
        print(f"{len(report.errata)} errata", file=sys.stderr)
        return 1
    return 0


# ------------------------------------------------------------------ train-demo


def trace_csv(trace: list[dict]) -> str:
    if not trace:
        return ""
    keys = list(trace[0])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for row in trace:
        w.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()


def cmd_train_demo(args) -> int:
    from .checkpoint import dumps_state
    from .demo import run_demo

    cfg = load_config(args)
    if args.stage1_steps is not None:
        cfg = replace(cfg, stage1=replace(cfg.stage1, steps=args.stage1_steps))
    if args.stage2_steps is not None:
        cfg = replace(cfg, stage2=replace(cfg.stage2, steps=args.stage2_steps))
    out = OutputWriter(args.out, cfg)
    out.write("config.json", cfg.to_json())
    try:
        result = run_demo(cfg, evaluate=not args.no_eval)
    except DivergenceError as exc:
        out.write("partial_trace.csv", trace_csv(exc.trace))
        out.finish("train-demo")
        print(f"aborted: {exc}", file=sys.stderr)
        return 1
    out.write("stage1.ckpt", dumps_state(result.model.state_dict()))
    out.write("stage2.ckpt", dumps_state(result.prompter.state_dict()))
    out.write("stage1_trace.csv", trace_csv(result.stage1.trace))
    out.write("stage2_trace.csv", trace_csv(result.stage2.trace))
    out.write("stage2_checkpoints.csv", trace_csv(result.stage2.checkpoints))
    summary = result.summary()
    summary.pop("seconds")  # wall-clock time would break bytewise reruns
    out.json("summary.json", {**_header(cfg), "summary": summary,
                              "evaluation": result.evaluation})
    out.finish("train-demo")
    s = result.summary()
    print(f"stage 1 {s['stage1_initial']:.4f} -> {s['stage1_final']:.4f}; "
          f"stage 2 {s['stage2_initial']:.4f} -> {s['stage2_final']:.4f}")
    for mode, ev in result.evaluation.items():
        print(f"  {mode:<9} MSR {ev['MSR']:.4f}  MPR {ev['MPR']:.4f}")
    return 0


# ------------------------------------------------------------------ verify


def cmd_verify(args) -> int:
    from .verify import run_all

    results = run_all(quick=args.quick)
    for r in results:
        print(r.row())
    failed = [r.name for r in results if not r.passed]
    print("all suites passed" if not failed else f"FAILED: {', '.join(failed)}")
    return 1 if failed else 0


# ------------------------------------------------------------------ entry


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--threads", type=int, help="worker threads (fallback: MISSKIT_THREADS, else 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="misskit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"misskit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate missing-modality schedules")
    p.add_argument("metadata", help="text file with one 'name,frame_count' line per sequence")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", parents=[common], help="score tracking results")
    p.add_argument("--results", required=True, help="directory of <sequence>/result.txt")
    p.add_argument("--gt", required=True, help="directory of <sequence>/gt_rgb.txt [+ gt_tir.txt]")
    p.add_argument("--schedules", help="schedules.json from 'misskit simulate'")
    p.add_argument("--strategy", choices=("zero", "copy"),
                   help="compensation used to produce the results (recorded in the report)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-demo", parents=[common], help="two-stage training on synthetic scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--stage1-steps", type=int)
    p.add_argument("--stage2-steps", type=int)
    p.add_argument("--no-eval", action="store_true", help="skip the schedule-driven evaluation")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("verify", parents=[common], help="run the self-check suites")
    p.add_argument("--quick", action="store_true", help="smaller sweeps")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except MisskitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
