"""Invertible prompters: additive coupling stacks mapping one modality's
token features onto prompt features for the other.

A coupling block splits its input channels in half and updates them in
turn::

    y1 = x1 + S(x2)
    y2 = x2 + T(y1)

and is undone, with the same S and T, by::

    x2 = y2 - T(y1)
    x1 = y1 - S(x2)

which is exact for any S and T.  One stack of K blocks serves each
(encoder layer, direction) pair.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .backbone import MODALITIES, RGBTTracker
from .errors import ConfigurationError, DimensionError
from .losses import LossWeights, task_loss
from .tensor import Module, Parameter, Tensor

DIRECTIONS = ("rgb2tir", "tir2rgb")
SUBNETS = ("affine", "mlp")
RECONSTRUCTIONS = ("exact", "from_target")


def direction_for_missing(missing: str) -> str:
    """Stack direction that produces prompts for the ``missing`` modality."""
    if missing == "rgb":
        return "tir2rgb"
    if missing == "tir":
        return "rgb2tir"
    raise ConfigurationError(f"unknown modality {missing!r}")


@dataclass(frozen=True)
class PrompterConfig:
    num_blocks: int = 4
    subnet: str = "affine"
    hidden: int = 16
    init_std: float = 0.0
    reconstruction: str = "exact"
    seed: int = 1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ConfigurationError("a prompter stack needs at least one block")
        if self.subnet not in SUBNETS:
            raise ConfigurationError(f"unknown subnet {self.subnet!r}; choose from {SUBNETS}")
        if self.reconstruction not in RECONSTRUCTIONS:
            raise ConfigurationError(
                f"unknown reconstruction {self.reconstruction!r}; choose from {RECONSTRUCTIONS}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class AffineSubnet(Module):
    """v -> v W + b on the last axis."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray | None = None):
        self.weight = Parameter(weight, name=f"{name}/weight")
        self.bias = Parameter(np.zeros(weight.shape[1]) if bias is None else bias, name=f"{name}/bias")

    @classmethod
    def init(cls, name: str, width: int, rng=None, std: float = 0.0) -> "AffineSubnet":
        # zero weights unless std > 0: the block then starts as the identity map
        w = T.init_normal(rng, (width, width), std) if std else np.zeros((width, width))
        return cls(name, w)

    def __call__(self, v: Tensor) -> Tensor:
        return T.linear(v, self.weight, self.bias)


class MLPSubnet(Module):
    """Two affine maps with a GELU between; the output layer starts at zero."""

    def __init__(self, name: str, width: int, hidden: int, rng, std: float = 0.02):
        self.fc1 = AffineSubnet(f"{name}/fc1", T.init_normal(rng, (width, hidden), std or 0.02))
        self.fc2 = AffineSubnet(f"{name}/fc2", np.zeros((hidden, width)))

    def __call__(self, v: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(v)))


class CouplingBlock(Module):
    def __init__(self, name: str, half_width: int, s, t):
        self.name = name
        self.half_width = half_width
        self.S = s
        self.T = t

    @classmethod
    def build(cls, name: str, half_width: int, cfg: PrompterConfig, rng) -> "CouplingBlock":
        if cfg.subnet == "affine":
            s = AffineSubnet.init(f"{name}/S", half_width, rng, cfg.init_std)
            t = AffineSubnet.init(f"{name}/T", half_width, rng, cfg.init_std)
        else:
            s = MLPSubnet(f"{name}/S", half_width, cfg.hidden, rng, cfg.init_std)
            t = MLPSubnet(f"{name}/T", half_width, cfg.hidden, rng, cfg.init_std)
        return cls(name, half_width, s, t)

    def _check(self, x: Tensor) -> None:
        if x.ndim == 0 or x.shape[-1] != 2 * self.half_width:
            raise DimensionError(
                f"coupling block {self.name!r} expects width {2 * self.half_width}, got shape {x.shape}")

    def forward(self, x: Tensor) -> Tensor:
        return coupling_forward(x, self)

    def inverse(self, y: Tensor) -> Tensor:
        return coupling_inverse(y, self)


def coupling_forward(x: Tensor, block: CouplingBlock) -> Tensor:
    block._check(x)
    x1, x2 = T.split_channels(x)
    y1 = x1 + block.S(x2)
    y2 = x2 + block.T(y1)
    return T.concat_channels(y1, y2)


def coupling_inverse(y: Tensor, block: CouplingBlock) -> Tensor:
    block._check(y)
    y1, y2 = T.split_channels(y)
    x2 = y2 - block.T(y1)
    x1 = y1 - block.S(x2)
    return T.concat_channels(x1, x2)


class PrompterStack(Module):
    def __init__(self, direction: str, layer: int, blocks: list[CouplingBlock]):
        if direction not in DIRECTIONS:
            raise ConfigurationError(f"unknown direction {direction!r}")
        widths = {b.half_width for b in blocks}
        if len(widths) != 1:
            raise ConfigurationError("all blocks in a stack must share their width")
        self.direction = direction
        self.layer = layer
        self.blocks = blocks
        self.calls = 0

    @property
    def width(self) -> int:
        return 2 * self.blocks[0].half_width

    def forward(self, x: Tensor) -> Tensor:
        self.calls += 1
        for block in self.blocks:
            x = coupling_forward(x, block)
        return x

    def inverse(self, y: Tensor, inverse_fn=None) -> Tensor:
        inverse_fn = inverse_fn or coupling_inverse
        for block in reversed(self.blocks):
            y = inverse_fn(y, block)
        return y

    __call__ = forward


def build_stack(direction: str, layer: int, width: int, cfg: PrompterConfig, rng=None) -> PrompterStack:
    if width % 2:
        raise DimensionError(f"the invertible prompter requires an even channel width, got {width}")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    blocks = [CouplingBlock.build(f"prompter/{direction}/{layer}/{k}", width // 2, cfg, rng)
              for k in range(cfg.num_blocks)]
    return PrompterStack(direction, layer, blocks)


@dataclass
class PromptBundle:
    direction: str
    prompts: list[Tensor]
    reconstructions: list[Tensor] = field(default_factory=list)


class InvertiblePrompter(Module):
    """2N prompter stacks: one per encoder layer and direction."""

    def __init__(self, num_layers: int, width: int, cfg: PrompterConfig | None = None):
        cfg = cfg or PrompterConfig()
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.num_layers = num_layers
        self.width = width
        self.stacks = {d: [build_stack(d, n, width, cfg, rng) for n in range(1, num_layers + 1)]
                       for d in DIRECTIONS}

    @classmethod
    def for_tracker(cls, model: RGBTTracker, cfg: PrompterConfig | None = None) -> "InvertiblePrompter":
        return cls(model.cfg.num_layers, model.cfg.embed_dim, cfg)

    def calls(self, direction: str) -> int:
        return sum(s.calls for s in self.stacks[direction])

    def reset_calls(self) -> None:
        for stacks in self.stacks.values():
            for s in stacks:
                s.calls = 0

    def __call__(self, available: list[Tensor], direction: str,
                 targets: list[Tensor] | None = None, reconstruct: bool = True) -> PromptBundle:
        return prompter_forward(available, self.stacks[direction], targets=targets,
                                reconstruction=self.cfg.reconstruction if reconstruct else None)


def prompter_forward(available: list[Tensor], stacks: list[PrompterStack],
                     targets: list[Tensor] | None = None,
                     reconstruction: str | None = "exact") -> PromptBundle:
    """Prompts P^n = stack_n(F^n_available) for every layer n.

    ``reconstruction`` selects how the inverse reconstructions are formed:
    ``"exact"`` inverts the prompts just produced (algebraically the input
    again), ``"from_target"`` inverts the missing-modality targets instead,
    ``None`` skips them.
    """
    if len(available) != len(stacks):
        raise ConfigurationError(f"ladder has {len(available)} layers but there are {len(stacks)} stacks")
    prompts = [stack.forward(f) for stack, f in zip(stacks, available)]
    recon = []
    if reconstruction == "exact":
        recon = [stack.inverse(p) for stack, p in zip(stacks, prompts)]
    elif reconstruction == "from_target":
        if targets is None or len(targets) != len(stacks):
            raise ConfigurationError("from_target reconstruction needs a target ladder of matching length")
        recon = [stack.inverse(t) for stack, t in zip(stacks, targets)]
    elif reconstruction is not None:
        raise ConfigurationError(f"unknown reconstruction {reconstruction!r}")
    return PromptBundle(stacks[0].direction, prompts, recon)


# ------------------------------------------------------------------ losses


def loss_bidirectional(bundle: PromptBundle, missing: list[Tensor], available: list[Tensor]) -> Tensor:
    """Sum over layers of MSE(prompt, missing feature) + MSE(reconstruction, available feature)."""
    n = len(bundle.prompts)
    if len(missing) != n or len(available) != n or len(bundle.reconstructions) != n:
        raise DimensionError(
            f"ladder lengths differ: prompts {n}, missing {len(missing)}, "
            f"available {len(available)}, reconstructions {len(bundle.reconstructions)}")
    total = None
    for p, r, fm, fa in zip(bundle.prompts, bundle.reconstructions, missing, available):
        term = T.mse(p, fm) + T.mse(r, fa)
        total = term if total is None else total + term
    return total


def score_distribution(model: RGBTTracker, f_rgb: Tensor, f_tir: Tensor) -> Tensor:
    return T.softmax_rows(model.predict_from_features(f_rgb, f_tir).score_logits)


def loss_task_alignment(model: RGBTTracker, prompt_rgb: Tensor, prompt_tir: Tensor,
                        f_rgb: Tensor, f_tir: Tensor) -> Tensor:
    """KL of each missing-scenario score distribution from the complete one.

    The complete-modality distribution is a constant target.
    """
    complete = T.stop_gradient(score_distribution(model, f_rgb, f_tir))
    miss_tir = score_distribution(model, f_rgb, prompt_tir)
    miss_rgb = score_distribution(model, prompt_rgb, f_tir)
    return T.kl_div(miss_tir, complete) + T.kl_div(miss_rgb, complete)


def loss_missing_task(model: RGBTTracker, prompt_rgb: Tensor, prompt_tir: Tensor,
                      f_rgb: Tensor, f_tir: Tensor, gt_box,
                      weights: LossWeights = LossWeights()) -> Tensor:
    """Task loss in both missing scenarios: (prompt RGB, real TIR) and (real RGB, prompt TIR)."""
    a = task_loss(model.predict_from_features(prompt_rgb, f_tir), gt_box, weights).total
    b = task_loss(model.predict_from_features(f_rgb, prompt_tir), gt_box, weights).total
    return a + b


@dataclass
class Stage2Loss:
    total: Tensor
    task: Tensor
    alignment: Tensor
    bidirectional: Tensor
    prompt_mse: float  # layer-N prompt vs missing feature, averaged over directions

    def breakdown(self) -> dict[str, float]:
        return {"total": self.total.item(), "task": self.task.item(),
                "alignment": self.alignment.item(), "bidirectional": self.bidirectional.item(),
                "prompt_mse": self.prompt_mse}


def stage2_loss(model: RGBTTracker, prompter: InvertiblePrompter,
                ladder_rgb: list[Tensor], ladder_tir: list[Tensor], gt_box,
                lambda_a: float = 1.0, lambda_b: float = 0.5,
                weights: LossWeights = LossWeights()) -> Stage2Loss:
    """Loss_task + lambda_a * Loss_ta + lambda_b * Loss_bm for one sample."""
    to_tir = prompter(ladder_rgb, "rgb2tir", targets=ladder_tir)
    to_rgb = prompter(ladder_tir, "tir2rgb", targets=ladder_rgb)
    p_tir, p_rgb = to_tir.prompts[-1], to_rgb.prompts[-1]
    f_rgb, f_tir = ladder_rgb[-1], ladder_tir[-1]
    task = loss_missing_task(model, p_rgb, p_tir, f_rgb, f_tir, gt_box, weights)
    align = loss_task_alignment(model, p_rgb, p_tir, f_rgb, f_tir)
    bm = (loss_bidirectional(to_tir, ladder_tir, ladder_rgb)
          + loss_bidirectional(to_rgb, ladder_rgb, ladder_tir))
    total = task + lambda_a * align + lambda_b * bm
    pm = 0.5 * (float(np.mean((p_tir.data - f_tir.data) ** 2))
                + float(np.mean((p_rgb.data - f_rgb.data) ** 2)))
    return Stage2Loss(total, task, align, bm, pm)


def modality_from_direction(direction: str) -> tuple[str, str]:
    """(available, missing) for a stack direction."""
    src, dst = direction.split("2")
    assert src in MODALITIES and dst in MODALITIES
    return src, dst
