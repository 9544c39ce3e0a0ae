import json

import pytest

from eegground.config import DEFAULT_CONFIG, ConfigError, config_hash, load_config, merge, validate_config


def test_defaults_validate():
    validate_config(DEFAULT_CONFIG)
    cfg = load_config(None)
    assert cfg["seed"] == 0 and cfg["stage1"]["lambda_ei"] == 1.0


def test_file_overrides_and_relative_paths(tmp_path):
    sub = tmp_path / "cfg"
    sub.mkdir()
    (sub / "c.json").write_text(json.dumps({"seed": 3, "paths": {"output_root": "out"}}))
    cfg = load_config(sub / "c.json")
    assert cfg["seed"] == 3
    assert cfg["paths"]["output_root"] == str((sub / "out").resolve())
    assert load_config(sub / "c.json", seed=9, out=str(tmp_path / "o"))["seed"] == 9


@pytest.mark.parametrize("bad, where", [
    ({"stage1": {"alpha": 1.5}}, "stage1"),
    ({"stage1": {"steps": "many"}}, "stage1/steps"),
    ({"alignment_mode": "quadmodal"}, "alignment_mode"),
    ({"bogus": 1}, "<root>"),
    ({"data": {"split": [0.5, 0.5, 0.5]}}, "data/split"),
])
def test_schema_errors_name_the_field(bad, where):
    with pytest.raises(ConfigError) as info:
        load_config(None, overrides=bad)
    assert info.value.path.startswith(where)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{oops")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_merge_is_deep_and_pure():
    base = {"a": {"b": 1, "c": 2}}
    out = merge(base, {"a": {"b": 5}})
    assert out == {"a": {"b": 5, "c": 2}} and base["a"]["b"] == 1


def test_hash_is_order_independent():
    assert config_hash({"x": 1, "y": [1, 2]}) == config_hash({"y": [1, 2], "x": 1})
    assert config_hash({"x": 1}) != config_hash({"x": 2})
