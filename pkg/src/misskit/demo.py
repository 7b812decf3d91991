"""Desk-scale end-to-end workflow: stage 1, stage 2, schedule-driven evaluation.

Everything is driven by one :class:`~misskit.config.RunConfig`; the top-level
``seed`` replaces the seeds of the tracker initialisation and both
training stages, so ``(config, seed)`` pins every number produced here.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import RGBTTracker
from .config import RunConfig
from .metrics import evaluate_sequence
from .prompter import InvertiblePrompter
from .simulate import SequenceMeta, build_missing_dataset
from .synthetic import generate_synthetic_sequence, make_training_set
from .tracking import track_sequence
from .training import TrainResult, train_stage1, train_stage2

log = logging.getLogger(__name__)

EVAL_MODES = ("prompt", "copy", "zero", "complete")


@dataclass
class DemoResult:
    model: RGBTTracker
    prompter: InvertiblePrompter
    stage1: TrainResult
    stage2: TrainResult
    evaluation: dict[str, dict] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        s2 = self.stage2.totals
        return {
            "stage1_initial": self.stage1.totals[0] if self.stage1.trace else None,
            "stage1_final": self.stage1.totals[-1] if self.stage1.trace else None,
            "stage2_initial": s2[0] if s2 else None,
            "stage2_final": s2[-1] if s2 else None,
            "stage2_checkpoint_mse": [c["prompt_mse"] for c in self.stage2.checkpoints],
            "msr": {mode: ev["MSR"] for mode, ev in self.evaluation.items()},
            "seconds": self.seconds,
        }


def build_model(cfg: RunConfig) -> RGBTTracker:
    return RGBTTracker(replace(cfg.tracker, seed=cfg.seed))


def training_samples(cfg: RunConfig):
    d = cfg.data
    return make_training_set(d.train_sequences, d.frames_per_sequence, seed=d.data_seed,
                             template_size=cfg.tracker.template_size, size=cfg.tracker.search_size,
                             difficulty=d.difficulty)


def evaluation_sequences(cfg: RunConfig):
    """Held-out synthetic sequences with simulator schedules (seeded by ``cfg.seed``)."""
    d = cfg.data
    seqs = [generate_synthetic_sequence(d.eval_seed + i, length=d.eval_length,
                                        difficulty=d.difficulty, size=cfg.tracker.search_size)
            for i in range(d.eval_sequences)]
    schedules, _ = build_missing_dataset([SequenceMeta(s.name, len(s)) for s in seqs], cfg.seed)
    by_name = {s.name: s for s in schedules}
    return [(s, by_name[s.name]) for s in seqs]


def evaluate_modes(model: RGBTTracker, prompter: InvertiblePrompter, pairs,
                   modes=EVAL_MODES, pr_threshold: float = 20.0) -> dict[str, dict]:
    """Mean MPR/MSR/NPR over sequences for each inference mode.

    ``prompt`` uses the prompters on missing frames, ``copy``/``zero``
    compensate the input instead, ``complete`` ignores the schedule.
    """
    out = {}
    for mode in modes:
        rows = []
        for seq, schedule in pairs:
            if mode == "complete":
                boxes = track_sequence(model, seq, [(True, True)] * len(seq))
            elif mode == "prompt":
                boxes = track_sequence(model, seq, schedule.frames, prompter=prompter)
            else:
                boxes = track_sequence(model, seq, schedule.frames, strategy=mode)
            res = evaluate_sequence(seq.name, np.array(boxes), [np.array(seq.gt_boxes)], pr_threshold)
            rows.append(res.scalars)
        out[mode] = {k: float(np.mean([r[k] for r in rows])) for k in ("MPR", "MSR", "NPR")}
        out[mode]["per_sequence_MSR"] = [float(r["MSR"]) for r in rows]
    return out


def run_demo(cfg: RunConfig, evaluate: bool = True) -> DemoResult:
    """Train both stages on synthetic scenes and, optionally, evaluate.

    A NaN loss raises :class:`~misskit.errors.DivergenceError` carrying the
    partial trace.
    """
    seconds = {}
    t0 = time.perf_counter()
    samples = training_samples(cfg)
    model = build_model(cfg)
    stage1 = train_stage1(model, samples, replace(cfg.stage1, seed=cfg.seed))
    seconds["stage1"] = time.perf_counter() - t0
    log.info("stage 1: %.4f -> %.4f", stage1.totals[0], stage1.totals[-1])

    t0 = time.perf_counter()
    prompter = InvertiblePrompter.for_tracker(model, cfg.prompter)
    stage2 = train_stage2(model, prompter, samples, replace(cfg.stage2, seed=cfg.seed),
                          lambda_a=cfg.lambda_a, lambda_b=cfg.lambda_b)
    seconds["stage2"] = time.perf_counter() - t0
    log.info("stage 2: %.4f -> %.4f", stage2.totals[0], stage2.totals[-1])

    result = DemoResult(model, prompter, stage1, stage2, seconds=seconds)
    if evaluate:
        t0 = time.perf_counter()
        result.evaluation = evaluate_modes(model, prompter, evaluation_sequences(cfg),
                                           pr_threshold=cfg.pr_threshold)
        seconds["evaluation"] = time.perf_counter() - t0
    return result
