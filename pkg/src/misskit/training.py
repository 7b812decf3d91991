"""Two-stage training on synthetic samples.

Stage 1 fits the whole tracker on complete-modality pairs.  Stage 2 freezes
it and fits only the prompter stacks.  Both loops are single-threaded and
deterministic for a given seed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .backbone import RGBTTracker
from .errors import ConfigurationError, DivergenceError
from .losses import LossWeights, task_loss
from .prompter import InvertiblePrompter, stage2_loss
from .synthetic import TrackingSample
from .tensor import AdamW, Tape

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 4
    lr: float = 4e-4
    backbone_lr: float = 4e-5
    weight_decay: float = 1e-4
    # step-based stand-in for an epoch boundary: lr x 0.1 after this fraction of steps
    decay_at: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("steps must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class TrainResult:
    trace: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)

    @property
    def totals(self) -> list[float]:
        return [row["total"] for row in self.trace]


def _check_finite(value: float, step: int, trace: list, parts: dict) -> None:
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss at step {step}: {parts}", step=step, trace=trace)


def _maybe_decay(opt: AdamW, step: int, cfg: TrainConfig) -> None:
    if cfg.decay_at and step == int(cfg.decay_at * cfg.steps):
        opt.scale_lr(0.1)


def train_stage1(model: RGBTTracker, samples: list[TrackingSample], cfg: TrainConfig = TrainConfig(),
                 weights: LossWeights = LossWeights()) -> TrainResult:
    """Minimise the task loss on complete pairs over every model parameter.

    Row ``k`` of the trace holds the mean batch loss evaluated *before* the
    k-th update.
    """
    if not samples:
        raise ConfigurationError("stage 1 needs at least one training sample")
    model.set_trainable(True)
    backbone = model.backbone.parameters()
    bset = {id(p) for p in backbone}
    rest = [p for p in model.parameters() if id(p) not in bset]
    opt = AdamW([(backbone, cfg.backbone_lr), (rest, cfg.lr)], weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult()
    for step in range(cfg.steps + 1):
        batch = rng.integers(len(samples), size=cfg.batch_size)
        model.zero_grad()
        with Tape() as tape:
            parts = [task_loss(model(*samples[i].model_inputs()), samples[i].gt_box, weights)
                     for i in batch]
            total = T.scale(_sum([p.total for p in parts]), 1.0 / len(parts))
        row = {"step": step, "total": total.item()}
        for key in ("cls", "l1", "giou"):
            row[key] = float(np.mean([getattr(p, key).item() for p in parts]))
        result.trace.append(row)
        _check_finite(row["total"], step, result.trace, row)
        if step == cfg.steps:
            break
        tape.backward(total, model.trainable_parameters())
        tape.clear()
        _maybe_decay(opt, step, cfg)
        opt.step()
    return result


def _sum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = out + t
    return out


def frozen_ladders(model: RGBTTracker, samples: list[TrackingSample]):
    """Feature ladders of both modalities, computed without a tape."""
    return [model.features(*s.model_inputs()) for s in samples]


def layer_n_prompt_mse(prompter: InvertiblePrompter, ladders) -> float:
    """Mean over samples and directions of MSE(P^N, F^N_missing)."""
    vals = []
    for lr, lt in ladders:
        p_tir = prompter.stacks["rgb2tir"][-1].forward(lr[-1])
        p_rgb = prompter.stacks["tir2rgb"][-1].forward(lt[-1])
        vals.append(np.mean((p_tir.data - lt[-1].data) ** 2))
        vals.append(np.mean((p_rgb.data - lr[-1].data) ** 2))
    prompter.reset_calls()
    return float(np.mean(vals))


def stage2_objective(model: RGBTTracker, prompter: InvertiblePrompter, ladders, samples,
                     lambda_a: float = 1.0, lambda_b: float = 0.5,
                     weights: LossWeights = LossWeights()) -> float:
    """Mean stage-2 total loss over fixed samples, without recording a tape."""
    vals = [stage2_loss(model, prompter, *lad, s.gt_box, lambda_a, lambda_b, weights).total.item()
            for lad, s in zip(ladders, samples)]
    prompter.reset_calls()
    return float(np.mean(vals))


def train_stage2(model: RGBTTracker, prompter: InvertiblePrompter, samples: list[TrackingSample],
                 cfg: TrainConfig = TrainConfig(lr=4e-4), lambda_a: float = 1.0, lambda_b: float = 0.5,
                 eval_samples: list[TrackingSample] | None = None, num_checkpoints: int = 5,
                 weights: LossWeights = LossWeights()) -> TrainResult:
    """Fit the prompters with the backbone, fusion unit and head frozen.

    ``num_checkpoints`` evenly spaced evaluations (first at step 0, last at
    the final step) record the layer-N prompt MSE and the full objective on
    ``eval_samples`` (default: the first 16 training samples).
    Raises AssertionError if a frozen parameter ever receives a gradient or
    changes value.
    """
    if not samples:
        raise ConfigurationError("stage 2 needs at least one training sample")
    model.set_trainable(False)
    model.zero_grad()
    prompter.set_trainable(True)
    frozen_before = {k: v.copy() for k, v in model.state_dict().items()}
    ladders = frozen_ladders(model, samples)
    eval_samples = eval_samples or samples[: min(len(samples), 16)]
    eval_ladders = frozen_ladders(model, eval_samples)
    marks = sorted({round(k * cfg.steps / (num_checkpoints - 1)) for k in range(num_checkpoints)}) \
        if num_checkpoints > 1 else [cfg.steps]
    opt = AdamW([(prompter.parameters(), cfg.lr)], weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    params = prompter.trainable_parameters()
    result = TrainResult()
    for step in range(cfg.steps + 1):
        if step in marks:
            result.checkpoints.append({
                "step": step,
                "prompt_mse": layer_n_prompt_mse(prompter, eval_ladders),
                "total": stage2_objective(model, prompter, eval_ladders, eval_samples,
                                          lambda_a, lambda_b, weights)})
        batch = rng.integers(len(samples), size=cfg.batch_size)
        prompter.zero_grad()
        with Tape() as tape:
            parts = [stage2_loss(model, prompter, *ladders[i], samples[i].gt_box,
                                 lambda_a, lambda_b, weights) for i in batch]
            total = T.scale(_sum([p.total for p in parts]), 1.0 / len(parts))
        row = {"step": step, "total": total.item()}
        for key in ("task", "alignment", "bidirectional"):
            row[key] = float(np.mean([getattr(p, key).item() for p in parts]))
        row["prompt_mse"] = float(np.mean([p.prompt_mse for p in parts]))
        result.trace.append(row)
        _check_finite(row["total"], step, result.trace, row)
        prompter.reset_calls()
        if step == cfg.steps:
            break
        tape.backward(total, params)
        tape.clear()
        leaked = [p.name for p in model.parameters() if p.grad is not None]
        if leaked:
            raise AssertionError(f"frozen parameters received gradients: {leaked[:5]}")
        _maybe_decay(opt, step, cfg)
        opt.step()
    after = model.state_dict()
    changed = [k for k in frozen_before if not np.array_equal(frozen_before[k], after[k])]
    if changed:
        raise AssertionError(f"frozen parameters changed during stage 2: {changed[:5]}")
    return result
