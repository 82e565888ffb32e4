"""
sphemu 的配置加载与管理。
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

PROJECT_NAME = "sphemu"

logger = logging.getLogger(PROJECT_NAME)

PRECISION_VARIANTS = ("dp", "dpsp", "dpsphp", "dphp")
CONVERSION_SITES = ("sender", "receiver")

CONFIG_DEFAULTS: Dict[str, Any] = {
    "threads": 1,
    "trend_harmonics": 5,
    "trend_period": 8760,
    "allowed_periods": [12, 365, 8760],
    "var_order": 3,
    "burn_in_factor": 10,
    "precision_variant": "dp",
    "tile_size": 128,
    "band_width_dp": 1,
    "sp_fraction": 0.05,
    "conversion_site": "sender",
    "nugget_start": 1e-8,
    "nugget_cap": 1e-2,
    "wigner_cache_dir": "",
    "wigner_memory_cap_mb": 2048,
    "validation_flag_threshold": 0.05,
    "seed": 0,
    "log_level": "INFO",
}


def _load_raw_config(path: Optional[Path]) -> Dict[str, Any]:
    """从磁盘加载原始配置文件。"""
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8-sig") as fp:
            data = json.load(fp)
    except FileNotFoundError:
        logger.warning(f"配置文件 {path} 未找到，将使用默认值。")
        return {}
    except json.JSONDecodeError as exc:
        logger.error(f"解析配置文件 {Path(path).name} 失败: {exc}，将使用默认值。")
        return {}
    if not isinstance(data, dict):
        logger.error(f"配置文件 {Path(path).name} 顶层不是对象，将使用默认值。")
        return {}
    return data


def _ensure_string(value: Any, default: str) -> str:
    """将值强制转换为字符串。"""
    if isinstance(value, str):
        return value
    if value is None:
        return default
    return str(value)


def _coerce_int(value: Any, default: int, minimum: Optional[int] = None) -> int:
    """将值强制转换为整数，可选下限。"""
    try:
        result = int(value)
    except (TypeError, ValueError):
        return default
    if minimum is not None and result < minimum:
        logger.warning(f"配置值 {result} 小于下限 {minimum}，已使用默认值 {default}。")
        return default
    return result


def _coerce_float(value: Any, default: float) -> float:
    """将值强制转换为浮点数。"""
    try:
        return float(value)
    except (TypeError, ValueError):
        return default


def _coerce_choice(value: Any, choices: Iterable[str], default: str) -> str:
    """将值规范化为给定选项之一，大小写与分隔符不敏感。"""
    normalized = _ensure_string(value, default).strip().lower().replace("/", "")
    if normalized in choices:
        return normalized
    logger.warning(f"未知的配置选项 '{value}'，可选值为 {list(choices)}，将使用 '{default}'。")
    return default


def _coerce_int_list(value: Any, default: list) -> list:
    if not isinstance(value, (list, tuple)):
        return list(default)
    result = []
    for item in value:
        try:
            result.append(int(item))
        except (TypeError, ValueError):
            continue
    return result or list(default)


def build_settings(raw: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """根据原始配置和默认值构建最终的设置字典。"""
    raw = raw or {}
    settings = dict(CONFIG_DEFAULTS)
    settings.update(raw)

    settings["threads"] = _coerce_int(
        settings.get("threads"), CONFIG_DEFAULTS["threads"], minimum=1
    )
    settings["trend_harmonics"] = _coerce_int(
        settings.get("trend_harmonics"), CONFIG_DEFAULTS["trend_harmonics"], minimum=0
    )
    settings["allowed_periods"] = _coerce_int_list(
        settings.get("allowed_periods"), CONFIG_DEFAULTS["allowed_periods"]
    )
    settings["trend_period"] = _coerce_int(
        settings.get("trend_period"), CONFIG_DEFAULTS["trend_period"], minimum=1
    )
    settings["var_order"] = _coerce_int(
        settings.get("var_order"), CONFIG_DEFAULTS["var_order"], minimum=0
    )
    settings["burn_in_factor"] = _coerce_int(
        settings.get("burn_in_factor"), CONFIG_DEFAULTS["burn_in_factor"], minimum=0
    )
    settings["precision_variant"] = _coerce_choice(
        settings.get("precision_variant"),
        PRECISION_VARIANTS,
        CONFIG_DEFAULTS["precision_variant"],
    )
    settings["tile_size"] = _coerce_int(
        settings.get("tile_size"), CONFIG_DEFAULTS["tile_size"], minimum=8
    )
    settings["band_width_dp"] = _coerce_int(
        settings.get("band_width_dp"), CONFIG_DEFAULTS["band_width_dp"], minimum=1
    )
    sp_fraction = _coerce_float(
        settings.get("sp_fraction"), CONFIG_DEFAULTS["sp_fraction"]
    )
    settings["sp_fraction"] = min(1.0, max(0.0, sp_fraction))
    settings["conversion_site"] = _coerce_choice(
        settings.get("conversion_site"),
        CONVERSION_SITES,
        CONFIG_DEFAULTS["conversion_site"],
    )
    settings["nugget_start"] = _coerce_float(
        settings.get("nugget_start"), CONFIG_DEFAULTS["nugget_start"]
    )
    settings["nugget_cap"] = _coerce_float(
        settings.get("nugget_cap"), CONFIG_DEFAULTS["nugget_cap"]
    )
    settings["wigner_cache_dir"] = _ensure_string(
        settings.get("wigner_cache_dir"), CONFIG_DEFAULTS["wigner_cache_dir"]
    )
    settings["wigner_memory_cap_mb"] = _coerce_int(
        settings.get("wigner_memory_cap_mb"),
        CONFIG_DEFAULTS["wigner_memory_cap_mb"],
        minimum=1,
    )
    settings["validation_flag_threshold"] = _coerce_float(
        settings.get("validation_flag_threshold"),
        CONFIG_DEFAULTS["validation_flag_threshold"],
    )
    settings["seed"] = _coerce_int(settings.get("seed"), CONFIG_DEFAULTS["seed"])
    settings["log_level"] = _ensure_string(
        settings.get("log_level"), CONFIG_DEFAULTS["log_level"]
    ).upper()
    return settings


def load_settings(path: Optional[Path] = None, **overrides: Any) -> Dict[str, Any]:
    """读取配置文件并应用命令行覆盖（值为 None 的覆盖项会被忽略）。"""
    raw = _load_raw_config(path)
    raw.update({key: value for key, value in overrides.items() if value is not None})
    return build_settings(raw)


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
