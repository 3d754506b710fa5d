import json

import pytest

from lowrank_kbp.config import (
    RunConfig,
    config_from_dict,
    config_hash,
    list_presets,
    load_config,
    validate_config,
    write_config_snapshot,
)
from lowrank_kbp.errors import ConfigError


def _write_toml(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def test_defaults_are_valid() -> None:
    config = RunConfig()
    assert config.discretization.n_steps == 10000
    assert validate_config(config) == []


def test_load_toml_overrides(tmp_path) -> None:
    path = _write_toml(tmp_path, """
name = "small"
seed = 7

[model]
d = 20
sigma = 0

[discretization]
dt = 1e-3
T = 0.5

[filter]
kind = "kbp"
""")
    config = load_config(path)
    assert (config.name, config.seed) == ("small", 7)
    assert config.model.d == 20
    assert isinstance(config.model.sigma, float) and config.model.sigma == 0.0
    assert config.discretization.n_steps == 500
    assert config.filter.kind == "kbp"
    assert config.filter.rank == 15


@pytest.mark.parametrize("data, field", [
    ({"model": {"dimension": 10}}, "model.dimension"),
    ({"colour": "red"}, "colour"),
    ({"filter": {"rank": 2.5}}, "filter.rank"),
    ({"filter": {"rank": True}}, "filter.rank"),
    ({"discretization": {"dt": "small"}}, "discretization.dt"),
    ({"output": {"w2": 1}}, "output.w2"),
    ({"study": {"grid": 3}}, "study.grid"),
    ({"study": {"grid": ["a"]}}, "study.grid[0]"),
    ({"model": {"squares": [[0.1, 0.3, "low", 0.5]]}}, "model.squares[0][2]"),
    ({"model": {"matrices": 5}}, "model.matrices"),
    ({"output": {"directory": ["runs"]}}, "output.directory"),
    ({"model": 4}, "model"),
])
def test_parse_errors_name_the_field(data, field) -> None:
    with pytest.raises(ConfigError) as info:
        config_from_dict(data)
    assert info.value.field == field
    assert info.value.exit_code == 2


@pytest.mark.parametrize("data, field", [
    ({"filter": {"kind": "particle"}}, "filter.kind"),
    ({"filter": {"integrator": "rk4"}}, "filter.integrator"),
    ({"discretization": {"dt": 0.0}}, "discretization.dt"),
    ({"filter": {"rank": 0}}, "filter.rank"),
    ({"model": {"sigma": -1.0}}, "model.sigma"),
    ({"model": {"builtin": "custom"}}, "model.matrices"),
    ({"model": {"builtin": "fem", "nodes": 2}}, "model.nodes"),
    ({"model": {"builtin": "fem"}, "study": {"kind": "rank-sweep", "grid": [2]}}, "study.kind"),
    ({"study": {"kind": "consistency", "grid": [2]}}, "study.kind"),
    ({"study": {"kind": "rank-sweep"}}, "study.grid"),
    ({"study": {"kind": "poc", "grid": [1, 8]}}, "study.grid"),
    ({"study": {"kind": "rank-sweep", "grid": [2.5]}}, "study.grid"),
    ({"filter": {"kind": "enkf", "particles": 1}}, "filter.particles"),
])
def test_validation_errors(data, field) -> None:
    with pytest.raises(ConfigError) as info:
        validate_config(config_from_dict(data))
    assert info.value.field == field


def test_small_ensemble_warns() -> None:
    config = config_from_dict({"filter": {"kind": "dlr-enkf", "rank": 5, "particles": 19}})
    warnings = validate_config(config)
    assert len(warnings) == 1
    assert "4R-1=19" in warnings[0]
    config.filter.particles = 20
    assert validate_config(config) == []


def test_presets_load_and_validate() -> None:
    names = list_presets()
    assert names == [
        "advection_poc",
        "advection_rank_sweep",
        "advection_sigma_sweep",
        "fem_consistency",
        "fem_full_rmse",
        "fem_partial_rmse",
    ]
    for name in names:
        config = load_config(name)
        assert config.name == name
        validate_config(config)


def test_unknown_preset() -> None:
    with pytest.raises(ConfigError):
        load_config("no_such_preset")


def test_malformed_toml(tmp_path) -> None:
    with pytest.raises(ConfigError):
        load_config(_write_toml(tmp_path, "[model\nd = 3"))


def test_snapshot_round_trip_keeps_hash(tmp_path) -> None:
    config = load_config("advection_rank_sweep")
    digest = write_config_snapshot(config, tmp_path / "config.json")
    assert json.loads((tmp_path / "config.json").read_text())["schema_version"] == 1
    reloaded = load_config(tmp_path / "config.json")
    assert reloaded == config
    assert config_hash(reloaded) == digest
    reloaded.seed += 1
    assert config_hash(reloaded) != digest
