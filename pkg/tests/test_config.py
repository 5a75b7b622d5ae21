import os

import pytest

from daodet.config import (
    ConfigError,
    apply_overrides,
    config_hash,
    dump_yaml,
    from_dict,
    load_yaml,
    parse_override,
    to_dict,
)
from daodet.detector import DetectorConfig
from daodet.trainer import TrainConfig


def test_defaults_from_empty_mapping():
    assert from_dict(TrainConfig, {}) == TrainConfig()
    assert from_dict(TrainConfig, None) == TrainConfig()


def test_nested_sections_and_tuples():
    config = from_dict(
        TrainConfig,
        {"batch_size": 8, "detector": {"anchor_sizes": [8, 16], "backbone_channels": [4, 8], "feature_stride": 4}},
    )
    assert config.batch_size == 8
    assert config.detector.anchor_sizes == (8.0, 16.0)
    assert isinstance(config.detector.anchor_sizes[0], float)
    assert config.detector.backbone_channels == (4, 8)


def test_unknown_key_reports_dotted_path():
    with pytest.raises(ConfigError) as info:
        from_dict(TrainConfig, {"detector": {"anchor_size": [8]}})
    assert info.value.path == "detector.anchor_size"
    assert "unknown key" in str(info.value)


def test_wrong_types_are_rejected():
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"batch_size": "16"})
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"batch_size": True})
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"target_supervised": 1})
    with pytest.raises(ConfigError):
        from_dict(DetectorConfig, {"anchor_sizes": 8})


def test_post_init_validation_is_a_config_error():
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"batch_size": 1})
    with pytest.raises(ConfigError):
        from_dict(TrainConfig, {"target_fraction": 1.5})
    with pytest.raises(ConfigError):
        DetectorConfig(feature_stride=4)


def test_round_trip():
    config = from_dict(TrainConfig, {"seed": 3, "distill": {"mode": "soft"}, "pipelines": {"source_half": ["hflip"]}})
    assert from_dict(TrainConfig, to_dict(config)) == config


def test_parse_override():
    assert parse_override("train.target_fraction=0.25") == ("train.target_fraction", 0.25)
    assert parse_override("distill.mode=soft") == ("distill.mode", "soft")
    assert parse_override("target_supervised=true") == ("target_supervised", True)
    assert parse_override("detector.anchor_sizes=[8, 16]") == ("detector.anchor_sizes", [8, 16])
    assert parse_override("init_params_file=") == ("init_params_file", None)
    with pytest.raises(ConfigError):
        parse_override("no_equal_sign")
    with pytest.raises(ConfigError):
        parse_override("=3")


def test_apply_overrides():
    config = apply_overrides(TrainConfig(), {"target_fraction": 0.25, "distill.mode": "soft"})
    assert config.target_fraction == 0.25
    assert config.distill.mode == "soft"
    assert TrainConfig().target_fraction == 0.5
    assert apply_overrides(config, {}) is config
    with pytest.raises(ConfigError) as info:
        apply_overrides(TrainConfig(), {"distill.nope": 1})
    assert info.value.path == "distill.nope"


def test_config_hash():
    assert config_hash(TrainConfig()) == config_hash(TrainConfig())
    assert config_hash(TrainConfig()) != config_hash(TrainConfig(seed=1))
    assert len(config_hash(TrainConfig())) == 64


def test_yaml_round_trip(workdir):
    path = os.path.join(workdir, "config.yaml")
    config = TrainConfig(seed=7, batch_size=4)
    dump_yaml(config, path)
    assert from_dict(TrainConfig, load_yaml(path)) == config


def test_load_yaml_errors(workdir):
    empty = os.path.join(workdir, "empty.yaml")
    open(empty, "w").close()
    assert load_yaml(empty) == {}
    broken = os.path.join(workdir, "broken.yaml")
    with open(broken, "w") as f:
        f.write("a: [1, 2\n")
    with pytest.raises(ConfigError):
        load_yaml(broken)
