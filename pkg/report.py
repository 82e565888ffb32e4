"""
文本报告的模板渲染：分解统计、验证摘要、分辨率表。
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping

import numpy as np
from jinja2 import StrictUndefined, TemplateError
from jinja2.sandbox import SandboxedEnvironment

from config import logger
from storage import dump_json

KEY_VALUE_TEMPLATE = """\
{% for key, value in items %}
{{ key }} = {{ value | fmt }}
{% endfor %}
"""

VALIDATION_TEMPLATE = """\
验证结果: {{ "通过" if report.passed else "未通过" }}
重复模拟数: {{ report.n_reps }}
格点数: {{ report.n_locations }}
均值 |z|>3 比例: {{ report.mean_flag_fraction | fmt }}
标准差 |z|>3 比例: {{ report.std_flag_fraction | fmt }}
任一被标记比例: {{ report.flag_fraction | fmt }} (阈值 {{ report.threshold | fmt }})
{% if report.degree_power_ratio %}
各阶功率比 (观测/模拟): {{ report.degree_power_ratio | tojson }}
{% endif %}
"""

RESOLUTION_TEMPLATE = """\
{{ "%-8s %-12s %-10s %-14s %s" | format("L", "分辨率(°)", "km", "格点数", "表格近似(百万)") }}
{% for row in rows %}
{{ "%-8d %-12.5g %-10.4g %-14d %.3f" | format(row.band_limit, row.degrees, row.km, row.exact_points, row.points_millions) }}
{% endfor %}
"""


def _format_value(value: Any) -> str:
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple, dict)):
        return json.dumps(value, ensure_ascii=False, sort_keys=True)
    return str(value)


class ReportRenderer:
    def __init__(self, *, logger=logger):
        self._logger = logger
        self._env = SandboxedEnvironment(
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True,
            undefined=StrictUndefined,
        )
        self._env.filters["tojson"] = lambda value: json.dumps(
            value, ensure_ascii=False, sort_keys=True
        )
        self._env.filters["fmt"] = _format_value

    def render(self, template: str, **context: Any) -> str:
        try:
            return self._env.from_string(template).render(**context)
        except TemplateError as exc:
            self._logger.error(f"报告模板渲染失败: {exc}")
            raise

    def key_values(self, data: Mapping[str, Any]) -> str:
        return self.render(KEY_VALUE_TEMPLATE, items=sorted(data.items()))

    def validation(self, report: Any) -> str:
        return self.render(VALIDATION_TEMPLATE, report=report)

    def resolution(self, rows: Iterable[Any]) -> str:
        return self.render(RESOLUTION_TEMPLATE, rows=list(rows))


def write_report(data: Dict[str, Any], path: Path, *, renderer: ReportRenderer = None) -> None:
    """.json 目标写 JSON，其余写扁平的 key = value 文本。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix.lower() == ".json":
        dump_json(path, data)
    else:
        renderer = renderer or ReportRenderer()
        path.write_text(renderer.key_values(data), encoding="utf-8")
    logger.info(f"报告已写入 {path}")
