"""One-pass evaluation: precision, success and normalised precision.

Boxes are ``(x, y, w, h)`` with a top-left corner, in pixels.  A sequence
may carry one or two ground truths (RGB and thermal annotations).  The
"maximum" rates take, frame by frame, the best match over the available
ground truths: the smallest centre error and the largest overlap.  The
alternative (maximum over whole per-ground-truth curves) is reported as
``curve_max_variant``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DataError
from .simulate import PATTERNS, RATIOS, DatasetAssignment

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)  # pixels
SUCCESS_THRESHOLDS = np.arange(21, dtype=np.float64) / 20.0
NORM_THRESHOLDS = np.arange(101, dtype=np.float64) / 200.0
PR_THRESHOLD = 20.0
NPR_RANGE = 0.5


def as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise DataError(f"boxes must be N x 4 (x, y, w, h), got shape {arr.shape}")
    return arr


def _valid(gt: np.ndarray) -> np.ndarray:
    return (gt[..., 2] > 0) & (gt[..., 3] > 0) & np.all(np.isfinite(gt), axis=-1)


def center_error(pred, gt) -> np.ndarray | float:
    """Euclidean distance between box centres."""
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    dx = (p[..., 0] + p[..., 2] / 2) - (g[..., 0] + g[..., 2] / 2)
    dy = (p[..., 1] + p[..., 3] / 2) - (g[..., 1] + g[..., 3] / 2)
    out = np.sqrt(dx * dx + dy * dy)
    return float(out) if out.ndim == 0 else out


def normalized_center_error(pred, gt) -> np.ndarray | float:
    """Centre offset with x scaled by gt width and y by gt height."""
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    dx = ((p[..., 0] + p[..., 2] / 2) - (g[..., 0] + g[..., 2] / 2)) / g[..., 2]
    dy = ((p[..., 1] + p[..., 3] / 2) - (g[..., 1] + g[..., 3] / 2)) / g[..., 3]
    out = np.sqrt(dx * dx + dy * dy)
    return float(out) if out.ndim == 0 else out


def overlap_iou(pred, gt) -> np.ndarray | float:
    """Intersection over union; a zero-area prediction scores 0."""
    p, g = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    iw = np.minimum(p[..., 0] + p[..., 2], g[..., 0] + g[..., 2]) - np.maximum(p[..., 0], g[..., 0])
    ih = np.minimum(p[..., 1] + p[..., 3], g[..., 1] + g[..., 3]) - np.maximum(p[..., 1], g[..., 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = p[..., 2] * p[..., 3] + g[..., 2] * g[..., 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    out = np.where((p[..., 2] > 0) & (p[..., 3] > 0), out, 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class MetricCurve:
    thresholds: np.ndarray
    values: np.ndarray

    def at(self, threshold: float) -> float:
        idx = np.flatnonzero(np.isclose(self.thresholds, threshold))
        if not idx.size:
            raise DataError(f"threshold {threshold} not on the curve")
        return float(self.values[idx[0]])

    def to_dict(self) -> dict:
        return {"thresholds": self.thresholds.tolist(), "values": self.values.tolist()}


def _fraction(mask: np.ndarray) -> np.ndarray:
    # mask: frames x thresholds
    if mask.shape[0] == 0:
        return np.full(mask.shape[1], np.nan)
    return mask.mean(axis=0)


@dataclass
class FrameScores:
    """Per-frame best-match errors over the valid ground truths of each frame."""

    center: np.ndarray
    overlap: np.ndarray
    normalized: np.ndarray
    excluded: int


def frame_scores(pred, gts: Sequence) -> FrameScores:
    pred = as_boxes(pred)
    gts = [as_boxes(g) for g in gts if g is not None]
    if not gts:
        raise DataError("at least one ground truth is required")
    for g in gts:
        if len(g) != len(pred):
            raise DataError(f"trajectory has {len(pred)} frames, ground truth {len(g)}")
    stack = np.stack(gts)  # G x F x 4
    valid = _valid(stack)
    keep = valid.any(axis=0)
    ce = np.where(valid, center_error(pred[None], stack), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        ne = np.where(valid, normalized_center_error(pred[None], stack), np.inf)
    ov = np.where(valid, overlap_iou(pred[None], stack), -np.inf)
    return FrameScores(ce.min(axis=0)[keep], ov.max(axis=0)[keep], ne.min(axis=0)[keep],
                       int((~keep).sum()))


def precision_curve(pred, gt_rgb, gt_tir=None, thresholds=PRECISION_THRESHOLDS) -> MetricCurve:
    fs = frame_scores(pred, [gt_rgb, gt_tir])
    return MetricCurve(thresholds, _fraction(fs.center[:, None] <= thresholds[None, :]))


def success_curve(pred, gt_rgb, gt_tir=None, thresholds=SUCCESS_THRESHOLDS) -> MetricCurve:
    fs = frame_scores(pred, [gt_rgb, gt_tir])
    return MetricCurve(thresholds, _fraction(fs.overlap[:, None] > thresholds[None, :]))


def normalized_precision_curve(pred, gt_rgb, gt_tir=None, thresholds=NORM_THRESHOLDS) -> MetricCurve:
    fs = frame_scores(pred, [gt_rgb, gt_tir])
    return MetricCurve(thresholds, _fraction(fs.normalized[:, None] <= thresholds[None, :]))


def mpr(curve: MetricCurve, threshold: float = PR_THRESHOLD) -> float:
    return curve.at(threshold)


def msr(curve: MetricCurve) -> float:
    """Mean of the success curve over its thresholds (area under the curve)."""
    return float(np.mean(curve.values))


def npr(curve: MetricCurve, upper: float = NPR_RANGE) -> float:
    """Trapezoidal area under the normalised precision curve divided by its range."""
    t, v = curve.thresholds, curve.values
    return float(np.sum((t[1:] - t[:-1]) * (v[1:] + v[:-1]) / 2.0) / upper)


@dataclass
class SequenceResult:
    name: str
    frames: int
    excluded_frames: int
    curves: dict[str, MetricCurve]
    scalars: dict[str, float]
    curve_max: dict[str, float]
    scores: FrameScores = field(repr=False)


def _curves_from_scores(fs: FrameScores) -> dict[str, MetricCurve]:
    return {
        "precision": MetricCurve(PRECISION_THRESHOLDS, _fraction(fs.center[:, None] <= PRECISION_THRESHOLDS)),
        "success": MetricCurve(SUCCESS_THRESHOLDS, _fraction(fs.overlap[:, None] > SUCCESS_THRESHOLDS)),
        "normalized_precision": MetricCurve(NORM_THRESHOLDS,
                                            _fraction(fs.normalized[:, None] <= NORM_THRESHOLDS)),
    }


def _scalars(curves: dict[str, MetricCurve], pr_threshold: float) -> dict[str, float]:
    return {"MPR": mpr(curves["precision"], pr_threshold),
            "MSR": msr(curves["success"]),
            "NPR": npr(curves["normalized_precision"])}


def evaluate_sequence(name: str, pred, gts: Sequence, pr_threshold: float = PR_THRESHOLD) -> SequenceResult:
    gts = [g for g in gts if g is not None]
    fs = frame_scores(pred, gts)
    curves = _curves_from_scores(fs)
    per_gt = [_curves_from_scores(frame_scores(pred, [g])) for g in gts]
    curve_max = {}
    for key in curves:
        vals = np.nanmax(np.stack([c[key].values for c in per_gt]), axis=0) if per_gt else curves[key].values
        curve_max[key] = MetricCurve(curves[key].thresholds, vals)
    return SequenceResult(name, len(as_boxes(pred)), fs.excluded, curves,
                          _scalars(curves, pr_threshold), _scalars(curve_max, pr_threshold), fs)


def _mean(values: list[float]) -> float | None:
    values = [v for v in values if v is not None and math.isfinite(v)]
    return float(np.mean(values)) if values else None


def _clean(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_clean(v) for v in x]
    return x


@dataclass
class EvalReport:
    overall: dict[str, float | None]
    overall_frame_weighted: dict[str, float | None]
    curve_max_variant: dict[str, float | None]
    curves: dict[str, dict]
    per_pattern: dict[str, dict]
    per_ratio: dict[str, dict]
    per_sequence: list[dict]
    errata: list[dict]
    metadata: dict

    def to_dict(self) -> dict:
        return _clean({
            "format_version": FORMAT_VERSION,
            "metadata": self.metadata,
            "overall": self.overall,
            "overall_frame_weighted": self.overall_frame_weighted,
            "curve_max_variant": self.curve_max_variant,
            "curves": self.curves,
            "per_pattern": self.per_pattern,
            "per_ratio": self.per_ratio,
            "per_sequence": self.per_sequence,
            "errata": self.errata,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        lines = ["sequence,pattern,ratio,frames,excluded_frames,MPR,MSR,NPR"]
        for row in self.per_sequence:
            vals = [row["MPR"], row["MSR"], row["NPR"]]
            lines.append(",".join([row["name"], str(row["pattern"]), str(row["ratio"]),
                                   str(row["frames"]), str(row["excluded_frames"])]
                                  + ["" if v is None else repr(float(v)) for v in vals]))
        return "\n".join(lines) + "\n"


def schedule_hash(schedule_text: str | bytes) -> str:
    if isinstance(schedule_text, str):
        schedule_text = schedule_text.encode("utf-8")
    return hashlib.sha256(schedule_text).hexdigest()


def evaluate_dataset(trajectories: Mapping[str, object], ground_truths: Mapping[str, Sequence],
                     assignment: DatasetAssignment | None = None,
                     schedules: Mapping[str, object] | None = None,
                     pr_threshold: float = PR_THRESHOLD, metadata: dict | None = None,
                     map_fn=map) -> EvalReport:
    """Per-sequence evaluation plus overall and per-subset averages.

    Overall scalars are unweighted means over sequences; the frame-weighted
    variant pools all frames.  Sequences lacking a trajectory, ground truth
    or (when schedules are given) a schedule go to ``errata`` and are left
    out of every average.  ``map_fn`` lets callers parallelise the
    per-sequence work (e.g. ``executor.map``).
    """
    names = list(assignment.cells) if assignment is not None else sorted(ground_truths)
    for extra in sorted(set(trajectories) | set(ground_truths)):
        if extra not in names:
            names.append(extra)
    errata = []
    jobs = []
    for name in names:
        missing = [what for what, src in (("trajectory", trajectories), ("ground truth", ground_truths))
                   if name not in src]
        if schedules is not None and name not in schedules:
            missing.append("schedule")
        if assignment is not None and name not in assignment.cells:
            missing.append("assignment")
        if missing:
            errata.append({"sequence": name, "issue": "missing " + ", ".join(missing)})
            continue
        jobs.append(name)

    def run(name):
        try:
            return evaluate_sequence(name, trajectories[name], ground_truths[name], pr_threshold)
        except DataError as exc:
            return exc

    results = {}
    for name, res in zip(jobs, map_fn(run, jobs)):
        if isinstance(res, Exception):
            errata.append({"sequence": name, "issue": str(res)})
            continue
        if res.excluded_frames:
            errata.append({"sequence": name, "issue": f"{res.excluded_frames} frames without a valid ground truth"})
        if len(res.scores.center) == 0:
            errata.append({"sequence": name, "issue": "no scorable frames"})
            continue
        results[name] = res

    per_sequence = []
    for name, res in results.items():
        pattern, ratio = assignment.cells[name] if assignment is not None else (None, None)
        per_sequence.append({"name": name, "pattern": pattern, "ratio": ratio, "frames": res.frames,
                             "excluded_frames": res.excluded_frames, **res.scalars})

    def summarize(group: list[str]) -> dict:
        return {"sequences": len(group),
                **{k: _mean([results[n].scalars[k] for n in group]) for k in ("MPR", "MSR", "NPR")}}

    overall = summarize(list(results))
    curves = {}
    for key in ("precision", "success", "normalized_precision"):
        if results:
            vals = np.mean(np.stack([r.curves[key].values for r in results.values()]), axis=0)
            curves[key] = MetricCurve(next(iter(results.values())).curves[key].thresholds, vals).to_dict()
    pooled = FrameScores(
        np.concatenate([r.scores.center for r in results.values()]) if results else np.zeros(0),
        np.concatenate([r.scores.overlap for r in results.values()]) if results else np.zeros(0),
        np.concatenate([r.scores.normalized for r in results.values()]) if results else np.zeros(0),
        0)
    fw = _scalars(_curves_from_scores(pooled), pr_threshold) if results else {}
    overall_fw = {"sequences": len(results), "frames": int(len(pooled.center)),
                  **{k: fw.get(k) for k in ("MPR", "MSR", "NPR")}}
    cmv = {"sequences": len(results),
           **{k: _mean([r.curve_max[k] for r in results.values()]) for k in ("MPR", "MSR", "NPR")}}

    per_pattern, per_ratio = {}, {}
    if assignment is not None:
        for p in PATTERNS:
            per_pattern[p] = summarize([n for n in results if assignment.cells[n][0] == p])
        for r in RATIOS:
            per_ratio[str(r)] = summarize([n for n in results if assignment.cells[n][1] == r])

    meta = {"pr_threshold": pr_threshold, "npr_range": NPR_RANGE,
            "success_thresholds": len(SUCCESS_THRESHOLDS)}
    meta.update(metadata or {})
    return EvalReport(overall, overall_fw, cmv, curves, per_pattern, per_ratio, per_sequence, errata, meta)
