import json
from pathlib import Path

from config import CONFIG_DEFAULTS, build_settings, load_settings

ROOT = Path(__file__).resolve().parent.parent


def test_defaults_are_used_for_empty_config():
    settings = build_settings(None)
    assert settings["trend_harmonics"] == 5
    assert settings["trend_period"] == 8760
    assert settings["var_order"] == 3
    assert settings["precision_variant"] == "dp"
    assert settings["allowed_periods"] == [12, 365, 8760]


def test_precision_variant_is_normalized():
    assert build_settings({"precision_variant": "DP/SP/HP"})["precision_variant"] == "dpsphp"
    assert build_settings({"precision_variant": "quad"})["precision_variant"] == "dp"


def test_numeric_values_are_coerced():
    settings = build_settings(
        {"threads": "4", "tile_size": 4, "sp_fraction": 2.0, "seed": "x", "log_level": "debug"}
    )
    assert settings["threads"] == 4
    assert settings["tile_size"] == 128
    assert settings["sp_fraction"] == 1.0
    assert settings["seed"] == 0
    assert settings["log_level"] == "DEBUG"


def test_threads_below_minimum_falls_back():
    assert build_settings({"threads": 0})["threads"] == 1


def test_load_settings_applies_overrides(tmp_path):
    path = tmp_path / "conf.json"
    path.write_text(json.dumps({"var_order": 2, "seed": 9}), encoding="utf-8")
    settings = load_settings(path, seed=None, threads=3)
    assert settings["var_order"] == 2
    assert settings["seed"] == 9
    assert settings["threads"] == 3


def test_missing_or_invalid_file_uses_defaults(tmp_path):
    assert load_settings(tmp_path / "absent.json")["var_order"] == 3
    broken = tmp_path / "broken.json"
    broken.write_text("{not json", encoding="utf-8")
    assert load_settings(broken)["var_order"] == 3


def test_schema_documents_every_key():
    schema = json.loads((ROOT / "_conf_schema.json").read_text(encoding="utf-8"))
    assert set(schema) == set(CONFIG_DEFAULTS)
    for key, entry in schema.items():
        assert entry["default"] == CONFIG_DEFAULTS[key], key
        assert entry["description"]
