"""Config loading, strict key validation, and CLI overrides."""

from __future__ import annotations

import pytest

from facecap.config import ConfigError, config_from_dict, load_config
from facecap.debias import DEFAULT_DEBIAS_RULES
from facecap.derive import DEFAULT_AGE_CATEGORIES

from synth import write_config_yaml


def test_empty_config_gives_defaults():
    cfg = config_from_dict({})
    assert cfg.global_seed == 0
    assert cfg.profile_name == "other"
    assert cfg.shard_size == 10_000
    assert cfg.debias_rules == DEFAULT_DEBIAS_RULES
    assert cfg.age_categories == DEFAULT_AGE_CATEGORIES
    assert cfg.fusion.captions_per_image == 3
    assert cfg.fusion.temperature == 0.7
    assert cfg.fusion.max_tokens == 160


def test_unknown_top_level_key():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"shardsize": 5})
    assert exc.value.path == "shardsize"


def test_unknown_nested_key_path():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"fusion": {"temprature": 0.5}})
    assert exc.value.path == "fusion.temprature"


def test_negative_shard_size():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"dataset": {"shard_size": -5}})
    assert exc.value.path == "dataset.shard_size"


def test_unknown_profile_name():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"profile": "imagenet"})
    assert exc.value.path == "profile"


def test_custom_profile_resolves():
    cfg = config_from_dict(
        {
            "profile": "webcrawl",
            "profiles": {"webcrawl": {"min_face_side_px": 300, "require_real_human": True}},
        }
    )
    assert cfg.profile.min_face_side_px == 300
    assert cfg.profile.name == "webcrawl"


def test_debias_rules_from_config():
    cfg = config_from_dict(
        {"debias": {"rules": [{"target": "young", "conditions": ["smiling"], "probability": 0.5}]}}
    )
    assert len(cfg.debias_rules) == 1
    assert cfg.debias_rules[0].target_label == "young"
    assert cfg.debias_rules[0].condition_labels == frozenset({"smiling"})


def test_debias_rule_unknown_attribute():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"debias": {"rules": [{"target": "charisma", "probability": 0.5}]}})
    assert "debias.rules[0]" in exc.value.path


def test_age_categories_must_start_at_zero():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"derive": {"age_categories": [["kid", 5], ["adult", 20]]}})
    assert exc.value.path == "derive.age_categories[0]"


def test_threshold_monotonicity_enforced():
    with pytest.raises(ConfigError):
        config_from_dict({"derive": {"hair_thresholds": {"bald": 0.5, "short": 0.4}}})


def test_load_and_overrides(tmp_path):
    path = tmp_path / "cfg.yaml"
    write_config_yaml(path, tmp_path / "records.jsonl")
    cfg = load_config(path)
    assert cfg.global_seed == 7
    assert cfg.profile_name == "laion_face"
    assert cfg.fusion.mock is True
    assert cfg.shard_size == 25

    over = load_config(path, {"global_seed": 11, "profile": "ffhq", "captions_per_image": 5, "mock": True})
    assert over.global_seed == 11
    assert over.profile_name == "ffhq"
    assert over.fusion.captions_per_image == 5


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/cfg.yaml")


def test_invalid_yaml(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("fusion: [unclosed", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


def test_config_hash_stable_and_sensitive(tmp_path):
    path = tmp_path / "cfg.yaml"
    write_config_yaml(path, "records.jsonl")
    a = load_config(path).config_hash()
    b = load_config(path).config_hash()
    c = load_config(path, {"global_seed": 8}).config_hash()
    assert a == b
    assert a != c
