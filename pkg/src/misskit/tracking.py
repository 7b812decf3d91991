"""Frame-by-frame tracking with schedule-driven path switching."""

from __future__ import annotations

import numpy as np

from .backbone import HeadOutput, RGBTTracker
from .compensation import compensate
from .errors import ProtocolError
from .prompter import InvertiblePrompter, direction_for_missing
from .synthetic import SyntheticSequence, crop_template


def inference_step(model: RGBTTracker, prompter: InvertiblePrompter | None,
                   rgb_search, rgb_template, tir_search, tir_template,
                   rgb_available: bool = True, tir_available: bool = True) -> HeadOutput:
    """One prediction, choosing the feature path from the availability flags.

    Complete input runs both backbone paths and leaves the prompters idle.
    With one modality missing, only the available path runs and the
    missing modality's layer-N features are replaced by prompts.
    """
    if rgb_available and tir_available:
        return model(rgb_search, rgb_template, tir_search, tir_template)
    if not rgb_available and not tir_available:
        raise ProtocolError("both modalities missing in one frame")
    if prompter is None:
        raise ProtocolError("a modality is missing and no prompter was given; compensate the input instead")
    if rgb_available:
        ladder = model.backbone.ladder(rgb_search, rgb_template, "rgb")
        bundle = prompter(ladder, direction_for_missing("tir"), reconstruct=False)
        return model.predict_from_features(ladder[-1], bundle.prompts[-1])
    ladder = model.backbone.ladder(tir_search, tir_template, "tir")
    bundle = prompter(ladder, direction_for_missing("rgb"), reconstruct=False)
    return model.predict_from_features(bundle.prompts[-1], ladder[-1])


def track_sequence(model: RGBTTracker, sequence: SyntheticSequence, availability,
                   prompter: InvertiblePrompter | None = None,
                   strategy: str | None = None) -> list[tuple[float, float, float, float]]:
    """One-pass tracking of a synthetic sequence.

    ``availability`` is a per-frame list of (rgb, tir) flags, e.g. a
    MissingSchedule's frames.  Frame 0 must be complete; its box is the
    initialisation and is reported as the frame-0 prediction.  With
    ``strategy`` set, missing inputs are compensated and the complete path
    is used; otherwise the prompter handles missing frames.
    """
    flags = [tuple(bool(v) for v in f) for f in availability]
    if len(flags) != len(sequence):
        raise ProtocolError(f"{len(flags)} availability flags for {len(sequence)} frames")
    if flags[0] != (True, True):
        raise ProtocolError("the first frame must carry both modalities")
    ts = model.cfg.template_size
    first = sequence.frames[0]
    rgb_t = crop_template(first.rgb_image, first.gt_box, ts)
    tir_t = crop_template(first.tir_image, first.gt_box, ts)
    boxes = [tuple(float(v) for v in first.gt_box)]
    for frame, (rgb_ok, tir_ok) in zip(sequence.frames[1:], flags[1:]):
        rgb, tir = frame.rgb_image, frame.tir_image
        if strategy is not None and not (rgb_ok and tir_ok):
            if not rgb_ok and not tir_ok:
                raise ProtocolError("both modalities missing in one frame")
            if rgb_ok:
                tir = compensate(rgb, strategy)
            else:
                rgb = compensate(tir, strategy)
            out = model(rgb, rgb_t, tir, tir_t)
        else:
            out = inference_step(model, prompter, rgb, rgb_t, tir, tir_t, rgb_ok, tir_ok)
        boxes.append(out.box_pixels())
    return boxes
