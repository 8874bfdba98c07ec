import json

import pytest

from prefield.config import ConfigError, ExperimentConfig, config_hash, from_dict, load_config


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.margin == 2 * cfg.field.phi
    assert cfg.study.replicate_count == 20
    assert cfg.rmspe_convention == "paper"


def test_toml_round_trip_and_hash(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(
        "[field]\nmu = 4.0\nphi = 20.0\n"
        "[movement]\nalpha = 0.0\nsigma = [2.0, 3.0]\n"
        "[study]\nreplicate_count = 3\nseed_base = 7\n"
        "[score]\nrmspe_convention = \"rmse\"\n"
    )
    cfg = load_config(p)
    assert cfg.field.mu == 4.0 and cfg.movement.alpha == 0.0
    assert cfg.movement.Sigma_array[1, 1] == 3.0
    assert cfg.study.seed_base == 7 and cfg.rmspe_convention == "rmse"
    again = from_dict(cfg.to_dict())
    assert again.hash() == cfg.hash()
    j = tmp_path / "c.json"
    j.write_text(json.dumps(cfg.to_dict()))
    assert load_config(j).hash() == cfg.hash()


def test_hash_changes_with_content():
    a = ExperimentConfig()
    assert a.hash() != a.with_seed(1).hash()
    assert a.hash() == ExperimentConfig().hash()
    assert config_hash({"a": 1, "b": 2}) == config_hash({"b": 2, "a": 1})


@pytest.mark.parametrize("raw", [
    {"feild": {}},
    {"field": {"muu": 1.0}},
    {"field": {"phi": -1.0}},
    {"movement": {"sigma": [1, 2, 3]}},
    {"protocol": {"domain": [0, 1, 2]}},
    {"study": {"replicate_count": 0}},
    {"fit": {"fixed": ["bogus"]}},
    {"fit": {"mesh_spacing": 0}},
    {"score": {"rmspe_convention": "mae"}},
    {"analysis": {"per_track": 2}},
])
def test_invalid_configs_rejected(raw):
    with pytest.raises(ConfigError):
        from_dict(raw)


def test_unreadable_and_unparsable(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[field\nmu=")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_convention_override():
    assert ExperimentConfig().with_convention("rmse").rmspe_convention == "rmse"
    with pytest.raises(ConfigError):
        ExperimentConfig().with_convention("x")
