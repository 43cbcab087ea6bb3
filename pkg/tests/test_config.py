from __future__ import annotations

import pytest

from flowrl.config import PRESETS, config_from_dict, dump_config, load_config
from flowrl.errors import ArtifactIOError, ConfigError


def test_defaults_fill_everything():
    cfg = config_from_dict({"task": "maze"})
    g = cfg.grpo
    assert (g.group_size, g.s_train, g.s_infer, g.beta_kl, g.clip_eps, g.noise_scale) == (8, 30, 50, 0.04, 0.2, 0.5)
    assert cfg.eval.ks == [1, 4, 8, 12, 16]


def test_missing_required_field_is_named():
    with pytest.raises(ConfigError, match="task"):
        config_from_dict({"seed": 1})


@pytest.mark.parametrize("raw, field", [
    ({"task": "maze", "grpo": {"group_size": "eight"}}, "grpo.group_size"),
    ({"task": "maze", "data": {"sizes": 4}}, "data.sizes"),
    ({"task": "maze", "grpo": {"beta_kl": True}}, "grpo.beta_kl"),
    ({"task": "maze", "bogus": 1}, "bogus"),
    ({"task": "maze", "sft": {"epochs": 1, "momentum": 0.9}}, "momentum"),
    ({"task": "cats"}, "task"),
    ({"task": "maze", "data": {"sizes": [[8, 8]]}}, "cond_shape"),
])
def test_bad_fields_are_named(raw, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config_from_dict(raw)


def test_validation_from_nested_dataclass():
    with pytest.raises(ConfigError):
        config_from_dict({"task": "maze", "grpo": {"group_size": 1}})


def test_presets():
    for name in ("kl-0", "kl-0.04", "kl-0.1", "steps-5", "steps-30", "steps-50",
                 "reward-em-only", "reward-dense", "with-sft", "without-sft"):
        assert name in PRESETS
    cfg = config_from_dict({"task": "maze", "grpo": {"beta_kl": 0.5}}, ["kl-0.1", "steps-5"])
    assert cfg.grpo.beta_kl == 0.1 and cfg.grpo.s_train == 5
    assert config_from_dict({"task": "maze"}, ["without-sft"]).sft.epochs == 0
    assert config_from_dict({"task": "maze"}, ["reward-em-only"]).grpo.reward == {"name": "em_only"}
    with pytest.raises(ConfigError, match="preset"):
        config_from_dict({"task": "maze"}, ["nope"])


def test_yaml_round_trip(tmp_path):
    cfg = config_from_dict({"task": "maze", "seed": 7, "grpo": {"iterations": 3}})
    (tmp_path / "c.yaml").write_text(dump_config(cfg))
    assert load_config(tmp_path / "c.yaml") == cfg


def test_yaml_errors(tmp_path):
    (tmp_path / "bad.yaml").write_text("task: maze\ngrpo: [1,\n")
    with pytest.raises(ConfigError, match="line"):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "list.yaml")
    with pytest.raises(ArtifactIOError):
        load_config(tmp_path / "missing.yaml")
