"""Seeded paired-modality scenes and sequences.

A latent elliptical target is rendered into an RGB-like and a thermal-like
image.  The two renders share the geometry but not the appearance: in the
RGB image the target is a coloured blob on a textured coloured background,
in the thermal image it is a warm blob on a cool, smoothly varying
background (replicated to three channels).  Each modality gets its own gain,
offset and noise.  A sequence moves the target along a bounded random walk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BoxT = tuple[float, float, float, float]


@dataclass
class SyntheticScene:
    rgb_image: np.ndarray
    tir_image: np.ndarray
    gt_box: BoxT
    seed: int


@dataclass
class SyntheticSequence:
    name: str
    frames: list[SyntheticScene]
    seed: int

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def gt_boxes(self) -> list[BoxT]:
        return [f.gt_box for f in self.frames]


@dataclass
class _Appearance:
    rgb_bg: np.ndarray
    rgb_fg: np.ndarray
    rgb_texture: np.ndarray
    tir_bg: float
    tir_fg: float
    tir_texture: np.ndarray
    rgb_gain: float
    tir_gain: float
    noise_rgb: float
    noise_tir: float
    size: tuple[float, float]
    distractor: tuple[float, float] | None = field(default=None)


def _smooth_field(rng, size: int, cells: int = 4) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(cells, cells))
    reps = -(-size // cells)
    up = np.kron(coarse, np.ones((reps, reps)))[:size, :size]
    # box blur to soften the block edges
    k = max(1, reps // 2)
    pad = np.pad(up, k, mode="edge")
    out = np.zeros_like(up)
    for dy in range(-k, k + 1):
        for dx in range(-k, k + 1):
            out += pad[k + dy:k + dy + size, k + dx:k + dx + size]
    return out / (2 * k + 1) ** 2


def _appearance(rng, size: int, difficulty: float) -> _Appearance:
    rgb_bg = rng.uniform(0.3, 0.7, size=3)
    rgb_fg = np.clip(rgb_bg + rng.choice([-1.0, 1.0], size=3) * rng.uniform(0.25, 0.45, size=3), 0, 1)
    tir_bg = rng.uniform(0.1, 0.3)
    tir_fg = rng.uniform(0.7, 0.95)
    w = rng.uniform(0.2, 0.35) * size
    h = rng.uniform(0.2, 0.35) * size
    return _Appearance(
        rgb_bg=rgb_bg, rgb_fg=rgb_fg,
        rgb_texture=0.08 * (1 + difficulty) * _smooth_field(rng, size)[..., None] * rng.uniform(0.5, 1.5, size=3),
        tir_bg=tir_bg, tir_fg=tir_fg,
        tir_texture=0.05 * (1 + difficulty) * _smooth_field(rng, size, cells=2),
        rgb_gain=rng.uniform(0.9, 1.1), tir_gain=rng.uniform(0.9, 1.1),
        noise_rgb=0.02 + 0.04 * difficulty, noise_tir=0.015 + 0.03 * difficulty,
        size=(w, h),
    )


def _blob(size: int, cx: float, cy: float, w: float, h: float) -> np.ndarray:
    idx = np.arange(size) + 0.5
    xx, yy = np.meshgrid(idx, idx)
    r = np.sqrt(((xx - cx) / (w / 2)) ** 2 + ((yy - cy) / (h / 2)) ** 2)
    return 1.0 / (1.0 + np.exp(np.clip(10.0 * (r - 1.0), -50, 50)))


def _render(rng, app: _Appearance, size: int, cx: float, cy: float, seed: int) -> SyntheticScene:
    w, h = app.size
    m = _blob(size, cx, cy, w, h)[..., None]
    rgb = (app.rgb_bg + app.rgb_texture) * (1 - m) + app.rgb_fg * m
    rgb = app.rgb_gain * rgb + rng.normal(0.0, app.noise_rgb, size=rgb.shape)
    tir = (app.tir_bg + app.tir_texture[..., None]) * (1 - m) + app.tir_fg * m
    tir = app.tir_gain * tir + rng.normal(0.0, app.noise_tir, size=(size, size, 1))
    tir = np.repeat(tir, 3, axis=2)
    box = (cx - w / 2, cy - h / 2, w, h)
    return SyntheticScene(rgb_image=rgb, tir_image=tir, gt_box=box, seed=seed)


def _centre_range(size: int, extent: float) -> tuple[float, float]:
    return extent / 2 + 0.5, size - extent / 2 - 0.5


def generate_synthetic_scene(seed: int, difficulty: float = 0.5, size: int = 32) -> SyntheticScene:
    """One seeded scene; the ground-truth box is tight around the target and inside the image."""
    rng = np.random.default_rng(seed)
    app = _appearance(rng, size, difficulty)
    w, h = app.size
    cx = rng.uniform(*_centre_range(size, w))
    cy = rng.uniform(*_centre_range(size, h))
    return _render(rng, app, size, cx, cy, seed)


def generate_synthetic_sequence(seed: int, length: int = 20, difficulty: float = 0.5,
                                size: int = 32, step: float = 2.0,
                                name: str | None = None) -> SyntheticSequence:
    """Target under a reflected random walk; appearance fixed, noise fresh per frame."""
    rng = np.random.default_rng(seed)
    app = _appearance(rng, size, difficulty)
    w, h = app.size
    lo_x, hi_x = _centre_range(size, w)
    lo_y, hi_y = _centre_range(size, h)
    cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
    frames = []
    for _ in range(length):
        frames.append(_render(rng, app, size, cx, cy, seed))
        cx = _reflect(cx + rng.normal(0.0, step), lo_x, hi_x)
        cy = _reflect(cy + rng.normal(0.0, step), lo_y, hi_y)
    return SyntheticSequence(name or f"synth{seed:05d}", frames, seed)


def _reflect(v: float, lo: float, hi: float) -> float:
    if v < lo:
        v = 2 * lo - v
    if v > hi:
        v = 2 * hi - v
    return float(min(max(v, lo), hi))


def crop_template(image: np.ndarray, box: BoxT, template_size: int) -> np.ndarray:
    """Square crop of ``template_size`` centred on the box, shifted to stay inside the image."""
    x, y, w, h = box
    H, W = image.shape[:2]
    x0 = int(round(x + w / 2 - template_size / 2))
    y0 = int(round(y + h / 2 - template_size / 2))
    x0 = min(max(x0, 0), W - template_size)
    y0 = min(max(y0, 0), H - template_size)
    return image[y0:y0 + template_size, x0:x0 + template_size].copy()


@dataclass
class TrackingSample:
    """One training example: current search frames plus frame-0 templates."""

    rgb_search: np.ndarray
    tir_search: np.ndarray
    rgb_template: np.ndarray
    tir_template: np.ndarray
    gt_box: BoxT

    def model_inputs(self):
        return self.rgb_search, self.rgb_template, self.tir_search, self.tir_template


def sample_from_sequence(seq: SyntheticSequence, frame: int, template_size: int) -> TrackingSample:
    first = seq.frames[0]
    cur = seq.frames[frame]
    return TrackingSample(
        rgb_search=cur.rgb_image, tir_search=cur.tir_image,
        rgb_template=crop_template(first.rgb_image, first.gt_box, template_size),
        tir_template=crop_template(first.tir_image, first.gt_box, template_size),
        gt_box=cur.gt_box,
    )


def make_training_set(num_sequences: int, frames_per_sequence: int, seed: int,
                      template_size: int = 16, size: int = 32,
                      difficulty: float = 0.5) -> list[TrackingSample]:
    """Samples drawn from ``num_sequences`` seeded sequences (frames 1.. of each)."""
    samples = []
    for i in range(num_sequences):
        seq = generate_synthetic_sequence(seed * 100003 + i, length=frames_per_sequence + 1,
                                          difficulty=difficulty, size=size)
        for f in range(1, frames_per_sequence + 1):
            samples.append(sample_from_sequence(seq, f, template_size))
    return samples
