import numpy as np
import pytest

from misskit import tensor as T
from misskit.backbone import RGBTTracker, TrackerConfig
from misskit.errors import DataError
from misskit.losses import LossWeights, gaussian_target, giou, normalise_box, task_loss
from misskit.tensor import Parameter, Tape, Tensor

from conftest import central_difference, rel_err


def brute_giou(a, b):
    """GIoU of two (cx, cy, w, h) boxes from corners, written out longhand."""
    ax1, ay1, ax2, ay2 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx1, by1, bx2, by2 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    inter = max(0, min(ax2, bx2) - max(ax1, bx1)) * max(0, min(ay2, by2) - max(ay1, by1))
    union = a[2] * a[3] + b[2] * b[3] - inter
    hull = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    return inter / union - (hull - union) / hull


def test_giou_identical_is_one():
    b = Tensor([0.5, 0.5, 0.2, 0.3])
    assert giou(b, b).item() == pytest.approx(1.0)


def test_giou_matches_longhand(rng):
    for _ in range(20):
        a = np.r_[rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.5, 2)]
        b = np.r_[rng.uniform(0.2, 0.8, 2), rng.uniform(0.05, 0.5, 2)]
        assert giou(Tensor(a), Tensor(b)).item() == pytest.approx(brute_giou(a, b), abs=1e-12)


def test_giou_disjoint_negative():
    assert giou(Tensor([0.1, 0.1, 0.1, 0.1]), Tensor([0.9, 0.9, 0.1, 0.1])).item() < 0


def test_normalise_box():
    assert normalise_box((4, 8, 8, 4), 32).tolist() == [0.25, 0.3125, 0.25, 0.125]
    with pytest.raises(DataError):
        normalise_box((0, 0, 0, 5), 32)


def test_gaussian_target_normalised_and_peaked():
    g = gaussian_target(np.array([0.3, 0.6]), 8)
    assert g.shape == (1, 64)
    assert g.sum() == pytest.approx(1.0)
    assert np.argmax(g) == 4 * 8 + 2


def test_task_loss_components_nonnegative(rng):
    model = RGBTTracker(TrackerConfig(embed_dim=8, num_layers=2, search_size=16, template_size=8,
                                      specific_layers=(2,)))
    imgs = [rng.uniform(size=(s, s, 3)) for s in (16, 8, 16, 8)]
    loss = task_loss(model(*imgs), (3.0, 4.0, 6.0, 5.0))
    parts = loss.breakdown()
    assert parts["cls"] >= -1e-12 and parts["l1"] >= 0 and 0 <= parts["giou"] <= 2
    w = LossWeights()
    assert parts["total"] == pytest.approx(w.cls * parts["cls"] + w.l1 * parts["l1"] + w.giou * parts["giou"])


def test_classification_term_is_zero_at_target():
    target = gaussian_target(normalise_box((4, 4, 4, 4), 16), 4)

    class Out:
        score_logits = Tensor(np.log(target))
        box = Tensor(normalise_box((4, 4, 4, 4), 16))
        grid, search_size = 4, 16

    loss = task_loss(Out, (4, 4, 4, 4), sigma=1.0)
    assert loss.cls.item() == pytest.approx(0.0, abs=1e-10)
    assert loss.l1.item() == 0.0
    assert loss.giou.item() == pytest.approx(0.0, abs=1e-12)


def test_giou_gradient(rng):
    a = Parameter(np.r_[0.45, 0.5, 0.3, 0.2], name="a")
    b = Parameter(np.r_[0.52, 0.57, 0.25, 0.3], name="b")
    with Tape() as tape:
        loss = giou(a, b)
    tape.backward(loss)
    for p in (a, b):
        fd = central_difference(lambda: giou(a, b).item(), p.data)
        assert rel_err(p.grad, fd) < 1e-6
