"""Config text format: parse/render round trips and rejection paths."""

import pytest

from flowagg.config import (
    ConfigError,
    RunConfig,
    config_defaults,
    parse_config,
    parse_config_file,
    render_config,
)


def test_defaults_round_trip():
    cfg = parse_config(config_defaults())
    assert cfg == RunConfig()
    assert render_config(cfg) == config_defaults()


def test_parse_assigns_sections():
    cfg = parse_config("""
# comment line
scene.n_clusters = 4
scene.occlusion_mode = global   # trailing comment
module.k = 6
module.scale_logits = false
train.steps = 50
train.learning_rate = 0.02
""")
    assert cfg.scene.n_clusters == 4
    assert cfg.scene.occlusion_mode == "global"
    assert cfg.module.k == 6
    assert cfg.module.scale_logits is False
    assert cfg.train.steps == 50
    assert cfg.train.learning_rate == 0.02


def test_tuple_field():
    cfg = parse_config("module.score_hidden = 8, 4\n")
    assert cfg.module.score_hidden == (8, 4)
    cfg = parse_config("module.score_hidden = 16\n")
    assert cfg.module.score_hidden == (16,)


def test_render_is_reparseable_after_changes():
    cfg = RunConfig()
    cfg.scene.occlusion_fraction = 0.3
    cfg.scene.occlusion_mode = "local"
    cfg.module.disp_hidden = (4, 4)
    cfg.train.freeze_alpha = True
    again = parse_config(render_config(cfg))
    assert again == cfg


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config("scene.wibble = 3\n")
    with pytest.raises(ConfigError):
        parse_config("orbit.radius = 3\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        parse_config("train.steps = 5\ntrain.steps = 6\n")


def test_malformed_lines_rejected():
    with pytest.raises(ConfigError):
        parse_config("train.steps\n")
    with pytest.raises(ConfigError):
        parse_config("steps = 5\n")


def test_bad_values_rejected():
    with pytest.raises(ConfigError):
        parse_config("train.steps = many\n")
    with pytest.raises(ConfigError):
        parse_config("module.scale_logits = maybe\n")
    with pytest.raises(ConfigError):
        parse_config("scene.cluster_spread = wide\n")


def test_bool_accepts_true_false_only():
    assert parse_config("train.freeze_alpha = true\n").train.freeze_alpha is True
    assert parse_config("train.freeze_alpha = false\n").train.freeze_alpha is False
    with pytest.raises(ConfigError):
        parse_config("train.freeze_alpha = 1\n")


def test_validate_catches_bad_settings():
    with pytest.raises(ValueError):
        parse_config("train.learning_rate = -0.5\n").train.validate()
    with pytest.raises(ValueError):
        parse_config("train.optimizer = lbfgs\n").train.validate()


def test_file_loading(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("scene.seed = 9\n")
    assert parse_config_file(path).scene.seed == 9
