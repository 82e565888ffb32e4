"""
sphemu 命令行入口。

退出码：0 成功，2 验证未通过，1 其他错误（已记录日志）。
"""

import argparse
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from config import PRECISION_VARIANTS, CONVERSION_SITES, configure_logging, load_settings, logger
from grid import (
    FieldSeries,
    GridSpec,
    export_csv,
    load_field_series,
    resolution_table,
    save_field_series,
    upsample_spline,
)
from mpchol import (
    PrecisionMap,
    TiledMatrix,
    factorization_stats,
    random_spd,
    tiled_cholesky,
)
from pipeline import emulate_model, load_model, save_model, train, validate
from report import ReportRenderer, write_report
from sampling import box_muller, make_generator
from sht import forward_sht_series, inverse_sht_batch, load_coefficients, plan_for, save_coefficients
from trend import load_forcing

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VALIDATION_FAILED = 2


def _write_series(series: FieldSeries, out: Path, fmt: str) -> None:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if fmt == "sphf":
        save_field_series(series, out)
    elif series.R == 1 and series.T == 1:
        export_csv(series, out)
    else:
        for r in range(series.R):
            for t in range(series.T):
                name = f"{out.stem}_r{r + 1}_t{series.t_start + t}{out.suffix or '.csv'}"
                export_csv(series, out.with_name(name), t=t, r=r)
    logger.info(f"已写出 {series.R}×{series.T} 个场到 {out}")


def _cache_dir(settings: dict, beside: Optional[Path]) -> Optional[Path]:
    if settings["wigner_cache_dir"]:
        return Path(settings["wigner_cache_dir"])
    return Path(beside).parent if beside is not None else None


def cmd_train(args: argparse.Namespace, settings: dict) -> int:
    series = load_field_series(args.input)
    forcing = load_forcing(args.forcing, args.forcing_cache) if args.forcing else None
    model = train(series, forcing, settings, cache_dir=_cache_dir(settings, args.input))
    save_model(model, args.out)
    return EXIT_OK


def cmd_emulate(args: argparse.Namespace, settings: dict) -> int:
    model = load_model(args.model)
    forcing = load_forcing(args.forcing, args.forcing_cache) if args.forcing else None
    seed = settings["seed"] if args.seed is None else args.seed
    series = emulate_model(
        model,
        args.T,
        seed,
        n_ensembles=args.ensembles,
        t_start=args.t_start,
        forcing=forcing,
        threads=settings["threads"],
    )
    _write_series(series, args.out, args.format)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace, settings: dict) -> int:
    model = load_model(args.model)
    holdout = load_field_series(args.holdout)
    seed = settings["seed"] if args.seed is None else args.seed
    report = validate(
        model,
        holdout,
        args.reps,
        seed,
        threads=settings["threads"],
        threshold=settings["validation_flag_threshold"],
    )
    print(ReportRenderer().validation(report))
    if args.report:
        write_report(report.to_dict(), args.report)
    return EXIT_OK if report.passed else EXIT_VALIDATION_FAILED


def cmd_sht(args: argparse.Namespace, settings: dict) -> int:
    cache_dir = _cache_dir(settings, args.input)
    cap = settings["wigner_memory_cap_mb"]
    if args.direction == "forward":
        series = load_field_series(args.input)
        plan = plan_for(series.spec, cache_dir, memory_cap_mb=cap)
        coefficients = forward_sht_series(plan, series, threads=settings["threads"])
        save_coefficients(args.out, coefficients)
        logger.info(f"正变换完成: {series.R}×{series.T} 个切片 → {args.out}")
    else:
        coefficients = load_coefficients(args.input)
        L = int(round(np.sqrt(coefficients.shape[-1])))
        default = GridSpec.from_band_limit(L)
        spec = GridSpec(
            n_theta=args.n_theta or default.n_theta,
            n_phi=args.n_phi or default.n_phi,
            band_limit=L,
        )
        plan = plan_for(spec, cache_dir, memory_cap_mb=cap)
        series = inverse_sht_batch(plan, coefficients, threads=settings["threads"])
        _write_series(series, args.out, args.format)
    return EXIT_OK


def cmd_chol(args: argparse.Namespace, settings: dict) -> int:
    pmap = PrecisionMap.from_settings(settings)
    matrix = random_spd(args.n, settings["seed"])
    tiled = TiledMatrix.from_dense(matrix, settings["tile_size"], pmap)
    factor = tiled_cholesky(
        tiled, pmap, settings["threads"], conversion_site=settings["conversion_site"]
    )
    stats = factorization_stats(factor, matrix).to_dict()
    renderer = ReportRenderer()
    print(renderer.key_values(stats), end="")
    if args.stats:
        write_report(stats, args.stats, renderer=renderer)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, settings: dict) -> int:
    default = GridSpec.from_band_limit(args.L)
    spec = GridSpec(
        n_theta=args.n_theta or default.n_theta,
        n_phi=args.n_phi or default.n_phi,
        band_limit=args.L,
    )
    coefficients = box_muller(make_generator(settings["seed"]), (args.R, args.T, args.L**2))
    plan = plan_for(spec, _cache_dir(settings, None), memory_cap_mb=settings["wigner_memory_cap_mb"])
    series = inverse_sht_batch(plan, coefficients, threads=settings["threads"])
    _write_series(series, args.out, args.format)
    return EXIT_OK


def cmd_upsample(args: argparse.Namespace, settings: dict) -> int:
    series = load_field_series(args.input)
    default = GridSpec.from_band_limit(args.L)
    target = GridSpec(
        n_theta=args.n_theta or default.n_theta,
        n_phi=args.n_phi or default.n_phi,
        band_limit=args.L,
    )
    _write_series(upsample_spline(series, target), args.out, args.format)
    return EXIT_OK


def cmd_resolution(args: argparse.Namespace, settings: dict) -> int:
    print(ReportRenderer().resolution(resolution_table(args.L)), end="")
    return EXIT_OK


def _add_format(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--format", choices=("sphf", "csv"), default="sphf", help="输出格式")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON 配置文件")
    common.add_argument("--threads", type=int, help="工作线程数")
    common.add_argument("--log-level", dest="log_level", help="日志级别，如 DEBUG/INFO")
    common.add_argument("--seed", type=int, help="随机种子")

    parser = argparse.ArgumentParser(prog="sphemu", description="球谐统计气候模拟器")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="训练模型")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--forcing", help="强迫 CSV 路径或 http(s) 地址")
    p.add_argument("--forcing-cache", dest="forcing_cache", type=Path)
    p.add_argument("--P", dest="var_order", type=int)
    p.add_argument("--K", dest="trend_harmonics", type=int)
    p.add_argument("--tau", dest="trend_period", type=int)
    p.add_argument("--variant", dest="precision_variant", choices=PRECISION_VARIANTS)
    p.add_argument("--tile", dest="tile_size", type=int)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("emulate", parents=[common], help="由模型生成模拟")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--T", type=int, required=True)
    p.add_argument("--ensembles", type=int, default=1)
    p.add_argument("--t-start", dest="t_start", type=int, default=1)
    p.add_argument("--forcing", help="情景强迫，覆盖模型自带的强迫")
    p.add_argument("--forcing-cache", dest="forcing_cache", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_format(p)
    p.set_defaults(handler=cmd_emulate)

    p = sub.add_parser("validate", parents=[common], help="用留出数据验证模型")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--holdout", type=Path, required=True)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--report", type=Path)
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser("sht", parents=[common], help="正/逆球谐变换")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--direction", choices=("forward", "inverse"), default="forward")
    p.add_argument("--n-theta", dest="n_theta", type=int)
    p.add_argument("--n-phi", dest="n_phi", type=int)
    p.add_argument("--out", type=Path, required=True)
    _add_format(p)
    p.set_defaults(handler=cmd_sht)

    p = sub.add_parser("chol", parents=[common], help="随机 SPD 矩阵的分块混合精度 Cholesky")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--tile", dest="tile_size", type=int)
    p.add_argument("--variant", dest="precision_variant", choices=PRECISION_VARIANTS)
    p.add_argument("--workers", dest="threads", type=int)
    p.add_argument("--band-width", dest="band_width_dp", type=int)
    p.add_argument("--sp-fraction", dest="sp_fraction", type=float)
    p.add_argument("--site", dest="conversion_site", choices=CONVERSION_SITES)
    p.add_argument("--stats", type=Path)
    p.set_defaults(handler=cmd_chol)

    p = sub.add_parser("synth", parents=[common], help="生成带限测试数据")
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--n-theta", dest="n_theta", type=int)
    p.add_argument("--n-phi", dest="n_phi", type=int)
    p.add_argument("--T", type=int, default=1)
    p.add_argument("--R", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    _add_format(p)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("upsample", parents=[common], help="样条上采样到更高带限")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--L", type=int, required=True)
    p.add_argument("--n-theta", dest="n_theta", type=int)
    p.add_argument("--n-phi", dest="n_phi", type=int)
    p.add_argument("--out", type=Path, required=True)
    _add_format(p)
    p.set_defaults(handler=cmd_upsample)

    p = sub.add_parser("resolution", parents=[common], help="打印带限与分辨率对照表")
    p.add_argument("--L", type=int, nargs="+", default=[720, 1440, 2880, 5760])
    p.set_defaults(handler=cmd_resolution)
    return parser


_SETTING_KEYS = (
    "threads",
    "log_level",
    "seed",
    "var_order",
    "trend_harmonics",
    "trend_period",
    "precision_variant",
    "tile_size",
    "band_width_dp",
    "sp_fraction",
    "conversion_site",
)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {key: getattr(args, key, None) for key in _SETTING_KEYS}
    settings = load_settings(args.config, **overrides)
    configure_logging(settings["log_level"])
    try:
        return args.handler(args, settings)
    except Exception as exc:
        logger.error(f"命令 {args.command} 执行失败: {exc}", exc_info=True)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
