"""Flat key=value config: typing, validation, byte-stable round trips."""

import dataclasses

import pytest

from evbei.config import ConfigError, PipelineConfig, parse_config, write_config


def test_defaults_validate():
    cfg = PipelineConfig()
    cfg.validate()
    assert cfg.kappa_bei == 3.0
    assert cfg.cell_size == 16
    assert cfg.merge_threshold == 0.05


def test_roundtrip_byte_stable():
    cfg = PipelineConfig(events_path="a.txt", q_hi=0.97, reset=False, iterations=7)
    text = write_config(cfg)
    again = write_config(parse_config(text))
    assert text == again
    third = write_config(parse_config(again))
    assert again == third


def test_parse_overrides_base():
    base = PipelineConfig()
    cfg = parse_config("kappa_bei = 5.0\nseed = 3\n", base=base)
    assert cfg.kappa_bei == 5.0
    assert cfg.seed == 3
    assert base.kappa_bei == 3.0  # base untouched


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key"):
        parse_config("kappa_extra = 2\n")


def test_bad_value_type():
    with pytest.raises(ConfigError, match="expected float"):
        parse_config("kappa_bei = three\n")
    with pytest.raises(ConfigError, match="expected int"):
        parse_config("cell_size = 4.5\n")
    with pytest.raises(ConfigError, match="boolean"):
        parse_config("reset = maybe\n")


def test_bool_spellings():
    assert parse_config("reset = false\n").reset is False
    assert parse_config("reset = TRUE\n").reset is True
    assert parse_config("impulse_filter = 0\n").impulse_filter is False


def test_comments_and_blanks():
    cfg = parse_config("# a comment\n\nseed = 9\n")
    assert cfg.seed == 9


def test_missing_equals():
    with pytest.raises(ConfigError, match="key = value"):
        parse_config("just some words\n")


def test_domain_validation():
    with pytest.raises(ConfigError):
        parse_config("kappa_bei = 0.5\n")
    with pytest.raises(ConfigError):
        parse_config("q_lo = 0.9\nq_hi = 0.1\n")
    with pytest.raises(ConfigError):
        parse_config("canny_low = 0.8\ncanny_high = 0.2\n")
    with pytest.raises(ConfigError):
        parse_config("merge_threshold = 1.5\n")
    with pytest.raises(ConfigError):
        parse_config("cell_size = 1\n")


def test_every_field_survives_roundtrip():
    cfg = PipelineConfig()
    text = write_config(cfg)
    back = parse_config(text)
    for f in dataclasses.fields(PipelineConfig):
        assert getattr(back, f.name) == getattr(cfg, f.name)


def test_to_pipeline_params_mirrors_fields():
    cfg = PipelineConfig(radius=3, support_size=6, warmup=42, reset_mode="zero")
    p = cfg.to_pipeline_params()
    assert p.radius == 3
    assert p.support_size == 6
    assert p.warmup == 42
    assert p.reset_mode == "zero"


def test_to_cluster_config_mirrors_fields():
    cfg = PipelineConfig(cell_size=8, iterations=4, merge_threshold=0.1)
    cc = cfg.to_cluster_config()
    assert cc.cell_size == 8
    assert cc.iterations == 4
    assert cc.merge_threshold == 0.1
