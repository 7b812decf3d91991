import json

import pytest

from misskit.config import RunConfig
from misskit.errors import ConfigurationError


def test_roundtrip_and_hash():
    cfg = RunConfig()
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg and back.hash() == cfg.hash()
    assert cfg.replace(seed=3).hash() != cfg.hash()


def test_unknown_keys_rejected_at_every_level():
    with pytest.raises(ConfigurationError, match="unknown keys"):
        RunConfig.from_dict({"sed": 1})
    with pytest.raises(ConfigurationError, match="tracker"):
        RunConfig.from_dict({"tracker": {"embed": 4}})
    with pytest.raises(ConfigurationError, match="stage2"):
        RunConfig.from_dict({"stage2": {"lr": 1e-3, "epochs": 2}})


def test_partial_config_fills_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 5, "tracker": {"fusion": "sum"}}))
    cfg = RunConfig.load(path)
    assert cfg.seed == 5 and cfg.tracker.fusion == "sum" and cfg.tracker.embed_dim == 32


def test_partial_section_keeps_run_defaults():
    # a partial stage1 section must not fall back to the bare TrainConfig defaults
    cfg = RunConfig.from_dict({"stage1": {"steps": 3}})
    assert cfg.stage1.steps == 3
    assert cfg.stage1.backbone_lr == RunConfig().stage1.backbone_lr


def test_invalid_values():
    with pytest.raises(ConfigurationError):
        RunConfig(strategy="mean")
    with pytest.raises(ConfigurationError):
        RunConfig.from_json("[1, 2]")
    with pytest.raises(ConfigurationError):
        RunConfig.from_json("{not json")
    with pytest.raises(ConfigurationError):
        RunConfig.from_dict({"data": {"difficulty": 2.0}})
