import json

import pytest

from core.config_loader import ConfigInvalid, ConfigLoader, MissingFile


def _write(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload, ensure_ascii=False), encoding="utf-8")
    return str(path)


def test_defaults_without_file():
    config = ConfigLoader.load_all_config(None)
    assert config["estimator"] == "shortcut"
    assert config["truncation"] == (1.0, 99.0)
    assert config["seed"] is None
    assert config["columns"]["covariates"] == []


def test_file_overrides_cli_overrides_defaults(tmp_path):
    path = _write(tmp_path, {"模拟设置": {"n": 50}, "自助法设置": {"replicates": 20}})
    config = ConfigLoader.load_all_config(path, {"n": 300, "reps": 7, "seed": 4})
    assert config["n"] == 50
    assert config["bootstrap"] == 20
    assert config["reps"] == 7
    assert config["seed"] == 4


def test_column_section_builds_mapping(tmp_path):
    path = _write(
        tmp_path,
        {
            "数据列": {
                "id": "patient",
                "t": "visit",
                "covariates": "cd4, viral_load",
                "observed": {"cd4": "cd4_measured"},
            }
        },
    )
    config = ConfigLoader.load_all_config(path)
    columns = config["columns"]
    assert columns["id"] == "patient"
    assert columns["t"] == "visit"
    assert columns["covariates"] == ["cd4", "viral_load"]
    assert columns["observed"] == {"cd4": "cd4_measured"}
    assert "col_id" not in config
    schema = ConfigLoader.load_column_schema(path)
    assert schema["id"] == "patient"
    assert schema["baselines"] == []


def test_invalid_values_fall_back_to_defaults(tmp_path):
    path = _write(
        tmp_path,
        {
            "模型设置": {"estimator": "magic", "slope_weighting": "median"},
            "权重设置": {"truncation": [99, 1], "time_basis": "monthly"},
            "自助法设置": {"level": 1.5},
            "模拟设置": {"regimes": ["1", "9"], "n": -3},
        },
    )
    config = ConfigLoader.load_all_config(path)
    assert config["estimator"] == "shortcut"
    assert config["slope_weighting"] == "at_risk"
    assert config["truncation"] == (1.0, 99.0)
    assert config["time_basis"] == "quarters"
    assert config["level"] == 0.95
    assert config["regimes"] == ["1", "2", "3"]
    assert config["n"] == 1000


def test_truncation_can_be_disabled(tmp_path):
    path = _write(tmp_path, {"权重设置": {"truncation": "none"}})
    assert ConfigLoader.load_all_config(path)["truncation"] is None


def test_unknown_key_is_ignored(tmp_path, caplog):
    path = _write(tmp_path, {"运行设置": {"colour": "blue"}})
    config = ConfigLoader.load_all_config(path)
    assert "colour" not in config
    assert "colour" in caplog.text


@pytest.mark.parametrize(
    "content",
    ["{not json", json.dumps([1, 2]), json.dumps({"未知分区": {}}), json.dumps({"运行设置": 3})],
)
def test_malformed_files_are_rejected(tmp_path, content):
    path = tmp_path / "bad.json"
    path.write_text(content, encoding="utf-8")
    with pytest.raises(ConfigInvalid):
        ConfigLoader.load_all_config(str(path))


def test_missing_file(tmp_path):
    with pytest.raises(MissingFile):
        ConfigLoader.load_all_config(str(tmp_path / "absent.json"))


def test_paths_must_differ(tmp_path):
    config = ConfigLoader.load_all_config(None, {"seed": 1})
    same = str(tmp_path / "panel.csv")
    with pytest.raises(ConfigInvalid):
        ConfigLoader.validate_run_config(config, "att", {"input": same, "output": same})


def test_stochastic_commands_need_a_seed():
    config = ConfigLoader.load_all_config(None)
    with pytest.raises(ConfigInvalid, match="seed"):
        ConfigLoader.validate_run_config(config, "simulate", {})
    ConfigLoader.validate_run_config(config, "att", {})
    config["bootstrap"] = 10
    with pytest.raises(ConfigInvalid):
        ConfigLoader.validate_run_config(config, "att", {})
