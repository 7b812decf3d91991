import numpy as np
import pytest

from misskit import tensor as T
from misskit.backbone import (EXTRACTORS, FUSIONS, RGBTTracker, TokenSequence, TrackerConfig,
                              attach_global, fuse, patchify, shared_block, specific_block, strip_global)
from misskit.errors import ConfigurationError, ContractError, DataError
from misskit.synthetic import generate_synthetic_scene, generate_synthetic_sequence, make_training_set
from misskit.tensor import Tensor


def small_cfg(**kw):
    base = dict(patch_size=4, embed_dim=8, num_layers=2, search_size=16, template_size=8,
                head_hidden=8, specific_layers=(2,))
    base.update(kw)
    if base.get("extractor") in ("shared", "specific"):
        base.pop("specific_layers")
    return TrackerConfig(**base)


def images(rng, s=16, t=8):
    return (rng.uniform(size=(s, s, 3)), rng.uniform(size=(t, t, 3)),
            rng.uniform(size=(s, s, 3)), rng.uniform(size=(t, t, 3)))


def test_patchify_row_major():
    img = np.arange(4 * 4).reshape(4, 4).astype(float)
    rows = patchify(img, 2)
    assert rows.shape == (4, 4)
    assert rows[0].tolist() == [0, 1, 4, 5]
    assert rows[1].tolist() == [2, 3, 6, 7]


def test_patchify_rejects_ragged():
    with pytest.raises(ConfigurationError):
        patchify(np.zeros((5, 4, 3)), 2)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrackerConfig(embed_dim=7)
    with pytest.raises(ConfigurationError):
        TrackerConfig(extractor="shared", specific_layers=(1,))
    with pytest.raises(ConfigurationError):
        TrackerConfig(num_layers=2, specific_layers=(3,))
    with pytest.raises(ConfigurationError):
        TrackerConfig(fusion="avg")
    assert TrackerConfig().specific_layers == (2, 4, 6)
    assert TrackerConfig(extractor="shared").specific_layers == ()
    assert TrackerConfig(extractor="specific", num_layers=3).specific_layers == (1, 2, 3)


def test_config_roundtrip_and_unknown_keys():
    cfg = TrackerConfig(embed_dim=16, fusion="sum")
    assert TrackerConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError, match="unknown"):
        TrackerConfig.from_dict({"embed_dims": 4})


def test_paper_scale_geometry():
    cfg = TrackerConfig.paper_scale()
    assert (cfg.search_grid, cfg.num_template) == (16, 64)
    assert cfg.specific_layers == (4, 7, 10)


def test_position_embedding_shared_between_modalities(rng):
    model = RGBTTracker(small_cfg())
    s = rng.uniform(size=(16, 16, 3))
    t = rng.uniform(size=(8, 8, 3))
    # same image in both slots: the first (embedding + shared) layer must agree bitwise
    model_shared_first = RGBTTracker(small_cfg(specific_layers=(2,)))
    lr, lt = model_shared_first.features(s, t, s, t)
    assert np.array_equal(lr[0].data, lt[0].data)
    names = [n for n, _ in model.named_parameters() if "pos" in n]
    assert not any("rgb" in n or "tir" in n for n in names)


def test_shared_block_rejects_global_token(rng):
    model = RGBTTracker(small_cfg())
    seq = model.backbone.embed(*images(rng)[:2])
    g = Tensor(np.zeros((1, 8)))
    with pytest.raises(ContractError):
        shared_block(model.backbone.layers[0], attach_global(seq, g), seq)


def test_specific_block_requires_global(rng):
    model = RGBTTracker(small_cfg())
    seq = model.backbone.embed(*images(rng)[:2])
    with pytest.raises(ContractError):
        specific_block(model.backbone.layers[1]["rgb"], seq)
    with pytest.raises(ContractError):
        strip_global(seq)
    with pytest.raises(ContractError):
        attach_global(attach_global(seq, Tensor(np.zeros((1, 8)))), Tensor(np.zeros((1, 8))))


def test_token_counts_and_roles(rng):
    model = RGBTTracker(small_cfg())
    seq = model.backbone.embed(*images(rng)[:2])
    assert len(seq) == 16 + 4
    with_g = attach_global(seq, Tensor(np.ones((1, 8))))
    assert len(with_g) == 21 and with_g.roles[0] == "global"
    assert with_g.roles.count("global") == 1
    stripped, g = strip_global(with_g)
    assert np.array_equal(stripped.values.data, seq.values.data)
    assert np.array_equal(g.data, np.ones((1, 8)))


def test_shared_variant_identical_inputs_identical_ladders(rng):
    model = RGBTTracker(small_cfg(extractor="shared"))
    s, t, _, _ = images(rng)
    lr, lt = model.features(s, t, s, t)
    for a, b in zip(lr, lt):
        assert np.array_equal(a.data, b.data)


def test_specific_layers_separate_modalities(rng):
    model = RGBTTracker(small_cfg())
    s, t, _, _ = images(rng)
    lr, lt = model.features(s, t, s, t)
    assert np.array_equal(lr[0].data, lt[0].data)
    assert not np.array_equal(lr[1].data, lt[1].data)


def test_ladder_matches_run(rng):
    model = RGBTTracker(small_cfg())
    rs, rt, ts, tt = images(rng)
    lr, lt = model.features(rs, rt, ts, tt)
    for a, b in zip(lr, model.backbone.ladder(rs, rt, "rgb")):
        assert np.array_equal(a.data, b.data)
    for a, b in zip(lt, model.backbone.ladder(ts, tt, "tir")):
        assert np.array_equal(a.data, b.data)
    assert all(f.shape == (20, 8) for f in lr)  # globals stripped


def test_fusion_shapes_and_sum_commutative(rng):
    a, b = Tensor(rng.normal(size=(4, 6))), Tensor(rng.normal(size=(4, 6)))
    assert fuse(a, b, "concat").shape == (4, 12)
    assert np.array_equal(fuse(a, b, "sum").data, fuse(b, a, "sum").data)
    with pytest.raises(DataError):
        fuse(a, Tensor(np.zeros((3, 6))), "sum")
    with pytest.raises(ConfigurationError):
        fuse(a, b, "transformer")


@pytest.mark.parametrize("extractor", EXTRACTORS)
@pytest.mark.parametrize("fusion", FUSIONS)
def test_every_variant_predicts(extractor, fusion, rng):
    model = RGBTTracker(small_cfg(extractor=extractor, fusion=fusion))
    out = model(*images(rng))
    assert out.score_logits.shape == (1, 16)
    assert np.all((out.box.data >= 0) & (out.box.data <= 1))
    x, y, w, h = out.box_pixels()
    assert w > 0 and h > 0


def test_head_rejects_wrong_token_count():
    model = RGBTTracker(small_cfg())
    with pytest.raises(ContractError):
        model.head(Tensor(np.zeros((5, 16))))


def test_model_deterministic_under_seed(rng):
    a = RGBTTracker(small_cfg(seed=3)).state_dict()
    b = RGBTTracker(small_cfg(seed=3)).state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_parameter_names_are_namespaced():
    names = [n for n, _ in RGBTTracker(small_cfg(fusion="transformer")).named_parameters()]
    assert len(names) == len(set(names))
    assert all(n.split("/")[0] in ("backbone", "fusion", "head") for n in names)


def test_synthetic_scene_geometry():
    scene = generate_synthetic_scene(7)
    x, y, w, h = scene.gt_box
    assert scene.rgb_image.shape == scene.tir_image.shape == (32, 32, 3)
    assert 0 <= x and 0 <= y and x + w <= 32 and y + h <= 32
    again = generate_synthetic_scene(7)
    assert np.array_equal(scene.rgb_image, again.rgb_image)
    # the target stands out from the background in both modalities
    for img in (scene.rgb_image, scene.tir_image):
        inside = img[int(y + h / 2), int(x + w / 2)]
        assert np.abs(inside - img[0, 0]).max() > 0.05 or np.abs(inside - img[-1, -1]).max() > 0.05


def test_synthetic_sequence_and_training_set():
    seq = generate_synthetic_sequence(3, length=6)
    assert len(seq) == 6 and len(seq.gt_boxes) == 6
    samples = make_training_set(2, 3, seed=0)
    assert len(samples) == 6
    assert samples[0].rgb_template.shape == (16, 16, 3)


def test_gradient_reaches_all_parameters(rng):
    from misskit.losses import task_loss
    model = RGBTTracker(small_cfg(fusion="transformer"))
    with T.Tape() as tape:
        loss = task_loss(model(*images(rng)), (2.0, 3.0, 6.0, 5.0)).total
    tape.backward(loss)
    for name, p in model.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name
