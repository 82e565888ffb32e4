"""
训练 → 模拟 → 验证 的端到端流程，以及模型目录（bundle）的读写。
"""

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import numpy as np

from config import CONFIG_DEFAULTS, build_settings, logger
from grid import FieldSeries, GridSpec
from mpchol import PrecisionMap
from sht import degree_power, forward_sht_series, inverse_sht_batch, plan_for
from stochastic import (
    InnovationModel,
    NoiseField,
    VarModel,
    emulate,
    estimate_innovation_covariance,
    fit_noise_field,
    fit_var,
    load_innovation,
    load_noise,
    load_var,
    save_innovation,
    save_noise,
    save_var,
)
from storage import BundleStore, dump_json, load_json
from trend import ForcingTrajectory, TrendParams, detrend, fit_trend, load_trend, save_trend

BUNDLE_VERSION = 1
TREND_FILE = "trend.bin"
VAR_FILE = "var.bin"
UCOV_FILE = "ucov.bin"
NOISE_FILE = "noise.bin"
PROVENANCE_FILE = "provenance.json"
FORCING_FILE = "forcing.csv"
BUNDLE_FILES = (TREND_FILE, VAR_FILE, UCOV_FILE, NOISE_FILE, PROVENANCE_FILE, FORCING_FILE)

Z_FLAG = 3.0


class StageError(RuntimeError):
    """训练流程中某一阶段失败。"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@contextmanager
def _stage(name: str) -> Iterator[None]:
    logger.debug(f"开始阶段: {name}")
    try:
        yield
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, str(exc)) from exc


@dataclass(eq=False)
class EmulatorModel:
    spec: GridSpec
    trend: TrendParams
    var: VarModel
    innovation: InnovationModel
    noise: NoiseField
    provenance: Dict[str, Any] = field(default_factory=dict)
    forcing: Optional[ForcingTrajectory] = None

    def __post_init__(self) -> None:
        L = self.spec.band_limit
        if self.trend.spec != self.spec or self.noise.spec != self.spec:
            raise ValueError("趋势参数或噪声场的网格与模型网格不一致。")
        if self.var.band_limit != L:
            raise ValueError(f"VAR 模型带限 {self.var.band_limit} 与网格带限 {L} 不一致。")
        if self.innovation.dimension != L * L:
            raise ValueError(f"新息协方差维数 {self.innovation.dimension} 应为 L²={L * L}。")


def train(
    series: FieldSeries,
    forcing: Optional[ForcingTrajectory],
    settings: Optional[Dict[str, Any]] = None,
    *,
    cache_dir: Optional[Path] = None,
) -> EmulatorModel:
    """依次执行 fit_trend → detrend → sht → fit_var → innovation → noise。"""
    settings = build_settings(settings)
    spec = series.spec
    K, tau, P = settings["trend_harmonics"], settings["trend_period"], settings["var_order"]
    threads = settings["threads"]
    pmap = PrecisionMap.from_settings(settings)
    logger.info(
        f"开始训练: 网格 {spec.shape}, L={spec.band_limit}, T={series.T}, R={series.R}, "
        f"K={K}, τ={tau}, P={P}, 精度方案 {pmap.variant}"
    )

    with _stage("fit_trend"):
        if tau not in settings["allowed_periods"]:
            raise ValueError(f"周期 τ={tau} 不在允许的取值 {settings['allowed_periods']} 中。")
        trend = fit_trend(series, forcing, K, tau)
    with _stage("detrend"):
        standardized = detrend(series, trend, forcing)
    with _stage("sht"):
        plan = plan_for(spec, cache_dir, memory_cap_mb=settings["wigner_memory_cap_mb"])
        coefficients = forward_sht_series(plan, standardized, threads=threads)
    with _stage("fit_var"):
        var, residuals = fit_var(coefficients, P)
    with _stage("innovation"):
        innovation = estimate_innovation_covariance(
            residuals,
            series.R,
            series.T,
            P,
            pmap=pmap,
            tile_size=settings["tile_size"],
            workers=threads,
            conversion_site=settings["conversion_site"],
            nugget_start=settings["nugget_start"],
            nugget_cap=settings["nugget_cap"],
        )
    with _stage("noise"):
        reconstructed = inverse_sht_batch(
            plan, coefficients, threads=threads, t_start=series.t_start
        )
        noise = fit_noise_field(standardized, reconstructed)

    provenance = {
        "version": BUNDLE_VERSION,
        **spec.to_dict(),
        "T": series.T,
        "R": series.R,
        "t_start": series.t_start,
        "K": K,
        "tau": tau,
        "P": P,
        "seed": settings["seed"],
        "precision_variant": pmap.variant,
        "band_width_dp": pmap.band_width_dp,
        "sp_fraction": pmap.sp_fraction,
        "tile_size": settings["tile_size"],
        "conversion_site": settings["conversion_site"],
        "nugget": innovation.nugget,
        "nugget_start": settings["nugget_start"],
        "nugget_cap": settings["nugget_cap"],
        "burn_in_factor": settings["burn_in_factor"],
        "residual_mean_norm": innovation.residual_mean_norm,
        "has_forcing": forcing is not None,
    }
    logger.info("训练完成。")
    return EmulatorModel(
        spec=spec,
        trend=trend,
        var=var,
        innovation=innovation,
        noise=noise,
        provenance=provenance,
        forcing=forcing,
    )


def save_model(model: EmulatorModel, directory: Path, *, max_backups: int = 5) -> None:
    """写出模型目录；已有模型会先被移动到 old/<时间戳>/。"""
    store = BundleStore(Path(directory), max_backups=max_backups)
    store.prepare(BUNDLE_FILES)
    save_trend(model.trend, store.path(TREND_FILE))
    save_var(model.var, store.path(VAR_FILE))
    save_innovation(model.innovation, store.path(UCOV_FILE))
    save_noise(model.noise, store.path(NOISE_FILE))
    dump_json(store.path(PROVENANCE_FILE), model.provenance)
    if model.forcing is not None:
        model.forcing.to_csv(store.path(FORCING_FILE))
    logger.info(f"模型已保存到 {store.directory}")


def load_model(directory: Path) -> EmulatorModel:
    store = BundleStore(Path(directory))
    required = (TREND_FILE, VAR_FILE, UCOV_FILE, NOISE_FILE, PROVENANCE_FILE)
    missing = [name for name in required if not store.path(name).exists()]
    if missing:
        raise FileNotFoundError(f"模型目录 {store.directory} 缺少文件: {', '.join(missing)}")
    provenance = load_json(store.path(PROVENANCE_FILE))
    trend = load_trend(store.path(TREND_FILE))
    recorded = GridSpec.from_dict(provenance)
    if recorded != trend.spec:
        raise ValueError(f"provenance.json 记录的网格 {recorded} 与 trend.bin 不一致。")
    forcing = None
    if store.path(FORCING_FILE).exists():
        forcing = ForcingTrajectory.from_csv(store.path(FORCING_FILE))
    return EmulatorModel(
        spec=trend.spec,
        trend=trend,
        var=load_var(store.path(VAR_FILE)),
        innovation=load_innovation(
            store.path(UCOV_FILE),
            residual_mean_norm=float(provenance.get("residual_mean_norm", 0.0)),
        ),
        noise=load_noise(store.path(NOISE_FILE), trend.spec),
        provenance=provenance,
        forcing=forcing,
    )


def emulate_model(
    model: EmulatorModel,
    T_out: int,
    seed: int,
    *,
    n_ensembles: int = 1,
    t_start: int = 1,
    forcing: Optional[ForcingTrajectory] = None,
    threads: int = 1,
) -> FieldSeries:
    """使用模型记录的 burn-in 设置进行模拟。"""
    burn_in_factor = int(
        model.provenance.get("burn_in_factor", CONFIG_DEFAULTS["burn_in_factor"])
    )
    return emulate(
        model,
        T_out,
        seed,
        n_ensembles=n_ensembles,
        t_start=t_start,
        forcing=forcing,
        threads=threads,
        burn_in_factor=burn_in_factor,
    )


@dataclass
class ValidationReport:
    n_reps: int
    n_locations: int
    mean_flag_fraction: float
    std_flag_fraction: float
    flag_fraction: float
    threshold: float
    passed: bool
    degree_power_holdout: List[float]
    degree_power_emulated: List[float]
    degree_power_ratio: List[float]
    z_mean: np.ndarray = field(repr=False, default=None)
    z_std: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("z_mean")
        data.pop("z_std")
        return data


def _z_scores(observed: np.ndarray, samples: np.ndarray) -> np.ndarray:
    center = samples.mean(axis=0)
    spread = samples.std(axis=0, ddof=1)
    difference = observed - center
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(spread > 0.0, difference / spread, np.where(difference == 0.0, 0.0, np.inf))
    return z


def validate(
    model: EmulatorModel,
    holdout: FieldSeries,
    n_reps: int,
    seed: int,
    *,
    threads: int = 1,
    threshold: float = CONFIG_DEFAULTS["validation_flag_threshold"],
) -> ValidationReport:
    """用 n_reps 次模拟构成的分布检验留出数据逐格点的时间均值与标准差。"""
    if n_reps < 2:
        raise ValueError(f"验证至少需要 2 次重复模拟，实际为 {n_reps}。")
    if holdout.spec != model.spec:
        raise ValueError(f"留出数据网格 {holdout.spec} 与模型网格 {model.spec} 不一致。")
    emulations = emulate_model(
        model,
        holdout.T,
        seed,
        n_ensembles=n_reps,
        t_start=holdout.t_start,
        threads=threads,
    )
    emulated = emulations.values
    sample_mean = emulated.mean(axis=1)
    sample_std = emulated.std(axis=1, ddof=1) if holdout.T > 1 else np.zeros_like(sample_mean)
    observed_mean = holdout.values.mean(axis=1)
    observed_std = (
        holdout.values.std(axis=1, ddof=1) if holdout.T > 1 else np.zeros_like(observed_mean)
    )
    z_mean = np.stack([_z_scores(member, sample_mean) for member in observed_mean])
    z_std = np.stack([_z_scores(member, sample_std) for member in observed_std])
    mean_flags = np.abs(z_mean) > Z_FLAG
    std_flags = np.abs(z_std) > Z_FLAG

    plan = plan_for(model.spec)

    def mean_spectrum(series: FieldSeries) -> np.ndarray:
        standardized = detrend(series, model.trend, model.forcing)
        coefficients = forward_sht_series(plan, standardized, threads=threads)
        return degree_power(coefficients).mean(axis=(0, 1))

    holdout_power = mean_spectrum(holdout)
    emulated_power = mean_spectrum(emulations)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(emulated_power > 0.0, holdout_power / emulated_power, np.nan)

    flag_fraction = float(np.mean(mean_flags | std_flags))
    report = ValidationReport(
        n_reps=n_reps,
        n_locations=model.spec.point_count,
        mean_flag_fraction=float(np.mean(mean_flags)),
        std_flag_fraction=float(np.mean(std_flags)),
        flag_fraction=flag_fraction,
        threshold=float(threshold),
        passed=flag_fraction <= threshold,
        degree_power_holdout=[float(v) for v in holdout_power],
        degree_power_emulated=[float(v) for v in emulated_power],
        degree_power_ratio=[float(v) for v in ratio],
        z_mean=z_mean,
        z_std=z_std,
    )
    logger.info(
        f"验证完成: 标记比例 {flag_fraction:.4f}（阈值 {threshold}），"
        f"{'通过' if report.passed else '未通过'}"
    )
    return report
