"""Self-checks behind ``misskit verify``.

Each suite returns a :class:`SuiteResult`; failures are results, not
exceptions.  The coupling inverse used by the invertibility sweep can be
swapped through ``inverse_fn`` so a deliberately broken inverse can be
shown to fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import RGBTTracker, TrackerConfig
from .losses import task_loss
from .metrics import PR_THRESHOLD, evaluate_sequence
from .prompter import (InvertiblePrompter, PrompterConfig, build_stack, coupling_inverse,
                       loss_bidirectional, loss_missing_task, loss_task_alignment, stage2_loss)
from .simulate import PATTERNS, RATIOS, SequenceMeta, check_schedule, generate_schedule, missing_budget
from .tensor import Tape, Tensor


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    max_error: float
    detail: str
    seconds: float = 0.0

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<16} {status}  cases={self.cases:<6} max_err={self.max_error:.3e}  {self.detail}"


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - t0
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


# ------------------------------------------------------------ invertibility


@_timed
def invertibility_sweep(draws: int = 1000, seed: int = 0, tol: float = 1e-9,
                        inverse_fn=coupling_inverse) -> SuiteResult:
    """Random stacks (K 1..8, width 4..64) and inputs (|x| <= 10), both round trips."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(draws):
        k = int(rng.integers(1, 9))
        width = 2 * int(rng.integers(2, 33))
        cfg = PrompterConfig(num_blocks=k, init_std=float(rng.uniform(0.05, 1.0)) / np.sqrt(width))
        stack = build_stack("rgb2tir", 1, width, cfg, rng)
        rows = int(rng.integers(1, 5))
        x = Tensor(rng.uniform(-10, 10, size=(rows, width)))
        back = stack.inverse(stack.forward(x), inverse_fn=inverse_fn)
        again = stack.forward(stack.inverse(x, inverse_fn=inverse_fn))
        worst = max(worst, float(np.max(np.abs(back.data - x.data))),
                    float(np.max(np.abs(again.data - x.data))))
    return SuiteResult("invertibility", worst < tol, draws, worst,
                       f"max reconstruction error {worst:.3e} (tol {tol:g})")


# ------------------------------------------------------------ gradients


def toy_setup(seed: int = 0):
    """Small tracker + prompter (d=8, N=2, K=2) with non-trivial prompter weights."""
    cfg = TrackerConfig(patch_size=4, embed_dim=8, num_layers=2, specific_layers=(2,),
                        search_size=8, template_size=4, head_hidden=8, init_std=0.3, seed=seed)
    model = RGBTTracker(cfg)
    prompter = InvertiblePrompter(2, 8, PrompterConfig(num_blocks=2, init_std=0.3, seed=seed + 1))
    rng = np.random.default_rng(seed + 2)
    images = [rng.uniform(0, 1, size=(s, s, 3)) for s in (8, 4, 8, 4)]
    gt = (1.3, 2.1, 4.2, 3.7)
    return model, prompter, images, gt


def gradient_cases(model: RGBTTracker, prompter: InvertiblePrompter, images, gt):
    """(name, loss builder, parameters) for every training objective."""
    rs, rt, ts, tt = images

    def ladders():
        return model.backbone.run(rs, rt, ts, tt)

    def task():
        return task_loss(model(rs, rt, ts, tt), gt).total

    def bidir():
        lr, lt = ladders()
        return loss_bidirectional(prompter(lr, "rgb2tir", targets=lt), lt, lr)

    def align():
        lr, lt = ladders()
        p_tir = prompter(lr, "rgb2tir", reconstruct=False).prompts[-1]
        p_rgb = prompter(lt, "tir2rgb", reconstruct=False).prompts[-1]
        return loss_task_alignment(model, p_rgb, p_tir, lr[-1], lt[-1])

    def missing_task():
        lr, lt = ladders()
        p_tir = prompter(lr, "rgb2tir", reconstruct=False).prompts[-1]
        p_rgb = prompter(lt, "tir2rgb", reconstruct=False).prompts[-1]
        return loss_missing_task(model, p_rgb, p_tir, lr[-1], lt[-1], gt)

    def combined():
        lr, lt = ladders()
        return stage2_loss(model, prompter, lr, lt, gt).total

    model_params = model.parameters()
    prompt_params = prompter.parameters()
    return [("task", task, model_params),
            ("bidirectional", bidir, prompt_params),
            ("alignment", align, prompt_params),
            ("missing_task", missing_task, prompt_params),
            ("stage2_total", combined, prompt_params)]


def check_gradient(build, params, h: float = 1e-5) -> float:
    """Largest relative error between tape and central-difference gradients."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss, params)
    worst = 0.0
    for p in params:
        fd = T.numerical_gradient(lambda: build().item(), p, h)
        worst = max(worst, T.relative_error(p.grad, fd))
    return worst


@_timed
def gradient_suite(seed: int = 0, tol: float = 1e-5) -> SuiteResult:
    model, prompter, images, gt = toy_setup(seed)
    errors = {name: check_gradient(build, params)
              for name, build, params in gradient_cases(model, prompter, images, gt)}
    worst = max(errors.values())
    bad = [k for k, v in errors.items() if not v < tol]
    detail = "all losses" if not bad else f"failing: {bad}"
    return SuiteResult("gradients", not bad, len(errors), worst, detail)


# ------------------------------------------------------------ simulator


@_timed
def simulator_sweep(draws: int = 2000, seed: int = 0) -> SuiteResult:
    """Random (L, pattern, ratio, seed): invariants, exact budget, determinism."""
    rng = np.random.default_rng(seed)
    failures = []
    for i in range(draws):
        length = int(rng.integers(2, 400))
        pattern = PATTERNS[int(rng.integers(len(PATTERNS)))]
        ratio = RATIOS[int(rng.integers(len(RATIOS)))]
        s = int(rng.integers(2 ** 32))
        meta = SequenceMeta(f"case{i}", length)
        if missing_budget(length, ratio) > length - 1:
            continue
        sched = generate_schedule(meta, pattern, ratio, s)
        problems = check_schedule(sched)
        if sched.missing_count != missing_budget(length, ratio):
            problems.append("budget")
        if generate_schedule(meta, pattern, ratio, s).frames != sched.frames:
            problems.append("nondeterministic")
        if problems:
            failures.append((length, pattern, ratio, s, problems))
    detail = "all invariants hold" if not failures else f"first failure {failures[0]}"
    return SuiteResult("simulator", not failures, draws, float(len(failures)), detail)


# ------------------------------------------------------------ metrics


def naive_scores(pred, gts, pr_threshold: float = PR_THRESHOLD) -> dict[str, float]:
    """Frame-by-frame, threshold-by-threshold reference for MPR/MSR/NPR."""
    pred = np.asarray(pred, dtype=float)
    gts = [np.asarray(g, dtype=float) for g in gts if g is not None]
    centre, overlap, norm = [], [], []
    for f in range(len(pred)):
        px, py, pw, ph = pred[f]
        best_c = best_n = np.inf
        best_o = -np.inf
        valid = False
        for g in gts:
            gx, gy, gw, gh = g[f]
            if not (gw > 0 and gh > 0 and np.all(np.isfinite(g[f]))):
                continue
            valid = True
            dx = (px + pw / 2) - (gx + gw / 2)
            dy = (py + ph / 2) - (gy + gh / 2)
            best_c = min(best_c, np.sqrt(dx * dx + dy * dy))
            best_n = min(best_n, np.sqrt((dx / gw) ** 2 + (dy / gh) ** 2))
            iw = max(0.0, min(px + pw, gx + gw) - max(px, gx))
            ih = max(0.0, min(py + ph, gy + gh) - max(py, gy))
            inter = iw * ih
            union = pw * ph + gw * gh - inter
            iou = inter / union if pw > 0 and ph > 0 and union > 0 else 0.0
            best_o = max(best_o, iou)
        if valid:
            centre.append(best_c)
            overlap.append(best_o)
            norm.append(best_n)
    n = len(centre)
    hits = sum(1 for c in centre if c <= pr_threshold)
    succ = []
    for k in range(21):
        tau = k / 20
        succ.append(sum(1 for o in overlap if o > tau) / n)
    npc = []
    for k in range(101):
        tau = k / 200
        npc.append(sum(1 for e in norm if e <= tau) / n)
    area = 0.0
    for k in range(100):
        area += (npc[k] + npc[k + 1]) / 2 * (1 / 200)
    return {"MPR": hits / n, "MSR": sum(succ) / len(succ), "NPR": area / 0.5}


def random_metric_case(rng, dual: bool | None = None):
    n = int(rng.integers(3, 30))
    gt = np.column_stack([rng.uniform(0, 200, n), rng.uniform(0, 200, n),
                          rng.uniform(5, 60, n), rng.uniform(5, 60, n)])
    pred = gt + np.column_stack([rng.normal(0, 15, (n, 2)), rng.normal(0, 5, (n, 2))])
    pred[:, 2:] = np.abs(pred[:, 2:]) + 1.0
    dual = bool(rng.integers(2)) if dual is None else dual
    gts = [gt]
    if dual:
        gts.append(gt + np.column_stack([rng.normal(0, 4, (n, 2)), np.zeros((n, 2))]))
    return pred, gts


@_timed
def metric_oracle(cases: int = 50, seed: int = 0, tol: float = 1e-12) -> SuiteResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    dominance_ok = True
    for _ in range(cases):
        pred, gts = random_metric_case(rng)
        got = evaluate_sequence("case", pred, gts).scalars
        ref = naive_scores(pred, gts)
        worst = max(worst, *(abs(got[k] - ref[k]) for k in ref))
        single = evaluate_sequence("case", pred, gts[:1]).scalars
        dominance_ok &= got["MPR"] >= single["MPR"]
    ok = worst < tol and dominance_ok
    detail = f"dual-GT dominance {'holds' if dominance_ok else 'VIOLATED'}"
    return SuiteResult("metric_oracle", ok, cases, worst, detail)


def run_all(inverse_fn=coupling_inverse, quick: bool = False) -> list[SuiteResult]:
    return [
        invertibility_sweep(200 if quick else 1000, inverse_fn=inverse_fn),
        gradient_suite(),
        simulator_sweep(500 if quick else 2000),
        metric_oracle(),
    ]
