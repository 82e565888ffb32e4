"""
逐格点的确定性均值趋势：截距、辐射强迫的当期项与几何衰减分布滞后项、K 阶谐波。

m_t = β₀ + β₁x_{⌈t/τ⌉} + β₂(1−ρ)Σ_{s≥1}ρ^{s−1}x_{⌈t/τ⌉−s} + Σ_k [a_k cos(2πtk/τ) + b_k sin(2πtk/τ)]
"""

import asyncio
import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union
from urllib.parse import urlparse

import aiofiles
import httpx
import numpy as np

from config import logger
from grid import FieldSeries, GridSpec
from storage import ContainerFormatError, expect_count, read_container, write_container

TREND_MAGIC = b"TRND"
TREND_LAYOUT = (
    ("band_limit", "I"),
    ("n_theta", "I"),
    ("n_phi", "I"),
    ("K", "I"),
    ("tau", "I"),
)

LAG_CUTOFF = 1e-12
RHO_PROBES = 33
GOLDEN_ITERATIONS = 48
SIGMA_FLOOR = 1e-12
_NO_CUTOFF = np.int64(2**62)


@dataclass(frozen=True)
class ForcingTrajectory:
    """按年份索引的辐射强迫序列，values[0] 对应 start_year。"""

    values: np.ndarray
    start_year: int = 1

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64).copy()
        if values.ndim != 1 or values.size == 0:
            raise ValueError("强迫序列必须是非空的一维数组。")
        if not np.all(np.isfinite(values)):
            raise ValueError("强迫序列包含非有限值。")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "start_year", int(self.start_year))

    @property
    def end_year(self) -> int:
        return self.start_year + self.values.size - 1

    def covers(self, first_year: int, last_year: int) -> bool:
        return self.start_year <= first_year and last_year <= self.end_year

    def at(self, years: np.ndarray) -> np.ndarray:
        years = np.asarray(years)
        if years.size and not self.covers(int(years.min()), int(years.max())):
            raise ValueError(
                f"强迫序列只覆盖 {self.start_year}..{self.end_year} 年，"
                f"请求了 {int(years.min())}..{int(years.max())} 年。"
            )
        return self.values[years - self.start_year]

    @classmethod
    def from_csv(cls, path: Path) -> "ForcingTrajectory":
        """读取两列 CSV（year, forcing），年份必须连续递增。"""
        path = Path(path)
        years, values = [], []
        with open(path, "r", encoding="utf-8-sig", newline="") as fp:
            reader = csv.reader(fp)
            for row in reader:
                if not row or row[0].strip().startswith("#"):
                    continue
                try:
                    year, value = int(row[0]), float(row[1])
                except (ValueError, IndexError):
                    if not years:
                        continue  # 表头
                    raise ValueError(f"{path.name}: 无法解析的行 {row!r}。")
                years.append(year)
                values.append(value)
        if not years:
            raise ValueError(f"{path.name}: 没有强迫数据。")
        if np.any(np.diff(years) != 1):
            raise ValueError(f"{path.name}: 年份必须连续递增。")
        return cls(values=np.array(values), start_year=years[0])

    def to_csv(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["year", "forcing"])
            for offset, value in enumerate(self.values):
                writer.writerow([self.start_year + offset, repr(float(value))])


def _is_url(source: str) -> bool:
    return urlparse(str(source)).scheme in ("http", "https")


async def _download(url: str, target: Path, transport: Optional[httpx.AsyncBaseTransport]) -> None:
    async with httpx.AsyncClient(transport=transport) as client:
        try:
            response = await client.get(url, follow_redirects=True, timeout=30)
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise RuntimeError(f"下载强迫数据时发生网络错误: {exc}") from exc
    async with aiofiles.open(target, "wb") as fp:
        await fp.write(response.content)


def load_forcing(
    source: Union[str, Path],
    cache_dir: Optional[Path] = None,
    *,
    transport: Optional[httpx.AsyncBaseTransport] = None,
) -> ForcingTrajectory:
    """本地 CSV 直接读取；http(s) 地址下载一次后缓存到 cache_dir。"""
    if not _is_url(str(source)):
        return ForcingTrajectory.from_csv(Path(source))
    url = str(source)
    cache_dir = Path(cache_dir) if cache_dir else Path.cwd() / ".sphemu_cache"
    cache_dir.mkdir(parents=True, exist_ok=True)
    filename = Path(urlparse(url).path).name
    if not filename:
        filename = hashlib.sha256(url.encode("utf-8")).hexdigest()[:16] + ".csv"
    target = cache_dir / filename
    if target.exists():
        logger.debug(f"使用已缓存的强迫数据 {target}")
    else:
        logger.info(f"正在下载强迫数据: {url}")
        asyncio.run(_download(url, target, transport))
    return ForcingTrajectory.from_csv(target)


def year_index(ts: np.ndarray, tau: int) -> np.ndarray:
    """⌈t/τ⌉，t 从 1 开始。"""
    ts = np.asarray(ts, dtype=np.int64)
    return -(-ts // int(tau))


def harmonic_design(ts: np.ndarray, K: int, tau: int) -> np.ndarray:
    """形状 (T, 2K)：先是 cos(2πtk/τ)，再是 sin(2πtk/τ)，k = 1..K。"""
    ts = np.asarray(ts, dtype=np.float64)
    k = np.arange(1, K + 1, dtype=np.float64)
    angles = 2.0 * np.pi * np.outer(ts, k) / tau
    return np.hstack([np.cos(angles), np.sin(angles)])


def _lag_cutoff(rho: np.ndarray) -> np.ndarray:
    """最大的 s 使 ρ^{s−1} ≥ 1e−12。"""
    cutoff = np.full(rho.shape, _NO_CUTOFF, dtype=np.int64)
    cutoff[rho <= 0.0] = 1
    inner = (rho > 0.0) & (rho < 1.0)
    with np.errstate(divide="ignore"):
        cutoff[inner] = 1 + np.floor(math.log(LAG_CUTOFF) / np.log(rho[inner])).astype(
            np.int64
        )
    return cutoff


def lag_table(
    forcing: ForcingTrajectory, first_year: int, last_year: int, rho: np.ndarray
) -> np.ndarray:
    """截断分布滞后项 (1−ρ)Σ_s ρ^{s−1}x_{y−s}，返回形状 (年份数, ρ 个数)。

    沿年份递推累加，超过截断长度的最旧一项在递推中减去，结果与逐项截断求和一致。
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=np.float64))
    if first_year - 1 < forcing.start_year or last_year - 1 > forcing.end_year:
        raise ValueError(
            f"缺少强迫历史: 滞后项需要 {first_year - 1}..{last_year - 1} 年，"
            f"强迫序列只覆盖 {forcing.start_year}..{forcing.end_year} 年。"
        )
    x = forcing.values
    y0 = forcing.start_year
    cutoff = _lag_cutoff(rho)
    with np.errstate(over="ignore", under="ignore"):
        finite = cutoff < _NO_CUTOFF
        drop_scale = np.where(
            finite, np.power(rho, np.where(finite, cutoff, 0).astype(np.float64)), 0.0
        )

    table = np.empty((last_year - first_year + 1, rho.size))
    partial = np.zeros(rho.size)
    for year in range(y0, last_year + 1):
        if year >= first_year:
            table[year - first_year] = partial
        if year == last_year:
            break
        drop = (year - y0) >= cutoff
        dropped = np.zeros(rho.size)
        if np.any(drop):
            dropped[drop] = drop_scale[drop] * x[year - cutoff[drop] - y0]
        partial = x[year - y0] + rho * partial - dropped
    return (1.0 - rho) * table


@dataclass(frozen=True, eq=False)
class TrendParams:
    """逐格点的趋势参数，每个字段形状为 (n_theta, n_phi)，a/b 形状为 (K, n_theta, n_phi)。"""

    spec: GridSpec
    K: int
    tau: int
    beta0: np.ndarray
    beta1: np.ndarray
    beta2: np.ndarray
    rho: np.ndarray
    a: np.ndarray
    b: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        if self.K < 0 or self.tau < 1:
            raise ValueError(f"K 必须 ≥ 0 且 τ 必须 ≥ 1，实际为 K={self.K}, τ={self.tau}。")
        shape = self.spec.shape
        for name in ("beta0", "beta1", "beta2", "rho", "sigma"):
            value = np.array(getattr(self, name), dtype=np.float64)
            if value.shape != shape:
                raise ValueError(f"参数 {name} 的形状 {value.shape} 与网格 {shape} 不一致。")
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        for name in ("a", "b"):
            value = np.array(getattr(self, name), dtype=np.float64).reshape(self.K, *shape)
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        if np.any(self.rho < 0.0) or np.any(self.rho > 1.0):
            raise ValueError("ρ 必须位于 [0, 1]。")
        if np.any(self.sigma <= 0.0) or not np.all(np.isfinite(self.sigma)):
            raise ValueError("σ 必须处处为正。")

    @classmethod
    def constant(
        cls,
        spec: GridSpec,
        *,
        K: int = 0,
        tau: int = 12,
        beta0: float = 0.0,
        sigma: float = 1.0,
        a: Sequence[float] = (),
        b: Sequence[float] = (),
        beta1: float = 0.0,
        beta2: float = 0.0,
        rho: float = 0.0,
    ) -> "TrendParams":
        """所有格点取相同参数。"""

        def full(value: float) -> np.ndarray:
            return np.full(spec.shape, float(value))

        def harmonics(values: Sequence[float]) -> np.ndarray:
            padded = (list(values) + [0.0] * K)[:K]
            return np.array([full(v) for v in padded]).reshape(K, *spec.shape)

        return cls(
            spec=spec,
            K=K,
            tau=tau,
            beta0=full(beta0),
            beta1=full(beta1),
            beta2=full(beta2),
            rho=full(rho),
            a=harmonics(a),
            b=harmonics(b),
            sigma=full(sigma),
        )

    @property
    def uses_forcing(self) -> bool:
        return bool(np.any(self.beta1 != 0.0) or np.any(self.beta2 != 0.0))

    def records(self) -> np.ndarray:
        """每个格点一行：(β₀, β₁, β₂, ρ, a₁..a_K, b₁..b_K, σ)。"""
        n = self.spec.point_count
        columns = [self.beta0, self.beta1, self.beta2, self.rho]
        columns += list(self.a) + list(self.b) + [self.sigma]
        return np.column_stack([c.reshape(n) for c in columns])

    @classmethod
    def from_records(
        cls, spec: GridSpec, K: int, tau: int, records: np.ndarray
    ) -> "TrendParams":
        shape = spec.shape
        cols = records.T.reshape(5 + 2 * K, *shape)
        return cls(
            spec=spec,
            K=K,
            tau=tau,
            beta0=cols[0],
            beta1=cols[1],
            beta2=cols[2],
            rho=cols[3],
            a=cols[4 : 4 + K],
            b=cols[4 + K : 4 + 2 * K],
            sigma=cols[4 + 2 * K],
        )


def _trend_values(
    params: TrendParams, forcing: Optional[ForcingTrajectory], ts: np.ndarray
) -> np.ndarray:
    """形状 (T, N) 的均值趋势。"""
    n = params.spec.point_count
    ts = np.asarray(ts, dtype=np.int64)
    if np.any(ts < 1):
        raise ValueError("时间下标 t 必须 ≥ 1。")
    values = np.broadcast_to(params.beta0.reshape(n), (ts.size, n)).copy()
    if params.K:
        coefficients = np.concatenate([params.a, params.b]).reshape(2 * params.K, n)
        values += harmonic_design(ts, params.K, params.tau) @ coefficients
    if not params.uses_forcing:
        return values
    if forcing is None:
        raise ValueError("趋势参数含有强迫斜率，但没有提供强迫序列。")
    years = year_index(ts, params.tau)
    values += np.outer(forcing.at(years), params.beta1.reshape(n))
    active = params.beta2.reshape(n) != 0.0
    if np.any(active):
        first, last = int(years.min()), int(years.max())
        lags = lag_table(forcing, first, last, params.rho.reshape(n)[active])
        values[:, active] += lags[years - first] * params.beta2.reshape(n)[active]
    return values


def mean_trend_field(
    params: TrendParams, forcing: Optional[ForcingTrajectory], t: int
) -> np.ndarray:
    return _trend_values(params, forcing, np.array([t]))[0].reshape(params.spec.shape)


def mean_trend_stack(
    params: TrendParams, forcing: Optional[ForcingTrajectory], ts: Sequence[int]
) -> np.ndarray:
    """形状 (T, n_theta, n_phi)。"""
    ts = np.asarray(ts)
    return _trend_values(params, forcing, ts).reshape(ts.size, *params.spec.shape)


def eval_mean_trend(
    params: TrendParams,
    forcing: Optional[ForcingTrajectory],
    t: int,
    location: Tuple[int, int],
) -> float:
    """单个格点、单个时刻的均值趋势，逐项求和。"""
    if t < 1:
        raise ValueError("时间下标 t 必须 ≥ 1。")
    i, j = location
    value = params.beta0[i, j]
    for k in range(1, params.K + 1):
        angle = 2.0 * math.pi * t * k / params.tau
        value += params.a[k - 1, i, j] * math.cos(angle)
        value += params.b[k - 1, i, j] * math.sin(angle)
    beta1, beta2, rho = params.beta1[i, j], params.beta2[i, j], params.rho[i, j]
    if beta1 == 0.0 and beta2 == 0.0:
        return float(value)
    if forcing is None:
        raise ValueError("趋势参数含有强迫斜率，但没有提供强迫序列。")
    year = -(-t // params.tau)
    if beta1 != 0.0:
        value += beta1 * forcing.at(np.array([year]))[0]
    if beta2 != 0.0:
        if year - 1 < forcing.start_year:
            raise ValueError(f"缺少第 {year - 1} 年之前的强迫历史。")
        lag, s = 0.0, 1
        while year - s >= forcing.start_year:
            weight = rho ** (s - 1)
            if weight < LAG_CUTOFF:
                break
            lag += weight * forcing.values[year - s - forcing.start_year]
            s += 1
        value += beta2 * (1.0 - rho) * lag
    return float(value)


def detrend(
    series: FieldSeries, params: TrendParams, forcing: Optional[ForcingTrajectory]
) -> FieldSeries:
    """Z = (y − m_t)/σ。"""
    if series.spec != params.spec:
        raise ValueError("趋势参数与序列的网格不一致。")
    ts = series.t_start + np.arange(series.T)
    trend = mean_trend_stack(params, forcing, ts)
    return FieldSeries(
        spec=series.spec,
        values=(series.values - trend[None]) / params.sigma,
        t_start=series.t_start,
    )


def retrend(
    series: FieldSeries, params: TrendParams, forcing: Optional[ForcingTrajectory]
) -> FieldSeries:
    """y = m_t + σZ。"""
    if series.spec != params.spec:
        raise ValueError("趋势参数与序列的网格不一致。")
    ts = series.t_start + np.arange(series.T)
    trend = mean_trend_stack(params, forcing, ts)
    return FieldSeries(
        spec=series.spec,
        values=trend[None] + params.sigma * series.values,
        t_start=series.t_start,
    )


class _LagProfile:
    """给定固定回归量 F=[1, x, 谐波] 后，滞后项系数与残差平方和关于 ρ 的轮廓。"""

    def __init__(self, forcing, years, fixed, ybar):
        self.forcing = forcing
        self.first = int(years.min())
        self.last = int(years.max())
        positions = years - self.first
        span = self.last - self.first + 1
        onehot = np.zeros((years.size, span))
        onehot[np.arange(years.size), positions] = 1.0

        self.pinv = np.linalg.pinv(fixed)
        self.gamma0 = self.pinv @ ybar
        residual = ybar - fixed @ self.gamma0
        self.base_rss = np.sum(residual**2, axis=0)
        self.year_sums = onehot.T @ residual
        self.lag_to_gamma = self.pinv @ onehot
        self.gram = onehot.T @ (onehot - fixed @ self.lag_to_gamma)
        self.counts = onehot.sum(axis=0)

    def evaluate(self, rho: np.ndarray):
        lags = lag_table(self.forcing, self.first, self.last, rho)
        numerator = np.sum(lags * self.year_sums, axis=0)
        denominator = np.sum(lags * (self.gram @ lags), axis=0)
        scale = np.sum(self.counts[:, None] * lags**2, axis=0)
        usable = denominator > 1e-10 * scale
        safe = np.where(usable, denominator, 1.0)
        beta2 = np.where(usable, numerator / safe, 0.0)
        rss = self.base_rss - np.where(usable, numerator**2 / safe, 0.0)
        return rss, beta2, lags, usable


def _golden_refine(profile: _LagProfile, lower, upper):
    ratio = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lower.copy(), upper.copy()
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc = profile.evaluate(c)[0]
    fd = profile.evaluate(d)[0]
    for _ in range(GOLDEN_ITERATIONS):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        kept_point = np.where(left, c, d)
        kept_value = np.where(left, fc, fd)
        new_point = np.where(left, b - ratio * (b - a), a + ratio * (b - a))
        new_value = profile.evaluate(new_point)[0]
        c = np.where(left, new_point, kept_point)
        fc = np.where(left, new_value, kept_value)
        d = np.where(left, kept_point, new_point)
        fd = np.where(left, kept_value, new_value)
    better = fc < fd
    return np.where(better, c, d), np.where(better, fc, fd)


def fit_trend(
    series: FieldSeries,
    forcing: Optional[ForcingTrajectory],
    K: int,
    tau: int,
) -> TrendParams:
    """逐格点高斯极大似然：给定 ρ 时为线性最小二乘，ρ 在 [0, 1] 上做轮廓似然搜索。

    ρ 先在 33 个等距探测点上取最优，再在相邻区间内做黄金分割细化，
    只有细化结果更优时才采用。σ 为合并各集合成员后的残差标准差。
    """
    spec = series.spec
    R, T = series.R, series.T
    n = spec.point_count
    if K < 0:
        raise ValueError(f"谐波阶数 K 必须 ≥ 0，实际为 {K}。")
    if T < 4 + 2 * K:
        raise ValueError(f"拟合趋势需要 T ≥ 4 + 2K = {4 + 2 * K}，实际 T={T}。")

    ts = series.t_start + np.arange(T)
    years = year_index(ts, tau)
    values = series.values.reshape(R, T, n)
    ybar = values.mean(axis=0)
    within = np.sum((values - ybar[None]) ** 2, axis=(0, 1))
    harmonics = harmonic_design(ts, K, tau)

    use_forcing = forcing is not None
    if use_forcing:
        x_t = forcing.at(years)
        if np.ptp(x_t) == 0.0:
            logger.warning("强迫序列在拟合区间内为常数，β₁ 与 β₂ 不可识别，已置零。")
            use_forcing = False

    beta1 = np.zeros(n)
    beta2 = np.zeros(n)
    rho = np.zeros(n)
    if not use_forcing:
        fixed = np.column_stack([np.ones(T), harmonics])
        _warn_rank(fixed)
        gamma = np.linalg.pinv(fixed) @ ybar
        rss = np.sum((ybar - fixed @ gamma) ** 2, axis=0)
        beta0, harmonic_coeffs = gamma[0], gamma[1:]
    else:
        fixed = np.column_stack([np.ones(T), x_t, harmonics])
        _warn_rank(fixed)
        profile = _LagProfile(forcing, years, fixed, ybar)

        probes = np.linspace(0.0, 1.0, RHO_PROBES)
        probe_rss = np.stack([profile.evaluate(np.array([p]))[0] for p in probes])
        best = np.argmin(probe_rss, axis=0)
        lower = probes[np.maximum(best - 1, 0)]
        upper = probes[np.minimum(best + 1, RHO_PROBES - 1)]
        refined, refined_rss = _golden_refine(profile, lower, upper)
        best_rss = probe_rss[best, np.arange(n)]
        rho = np.where(refined_rss < best_rss, refined, probes[best])

        rss, beta2, lags, usable = profile.evaluate(rho)
        if not np.any(usable):
            logger.warning("滞后回归量与 [1, x] 共线，β₂ 已置零。")
        rho = np.where(usable, rho, 0.0)
        gamma = profile.gamma0 - beta2[None, :] * (profile.lag_to_gamma @ lags)
        beta0, beta1, harmonic_coeffs = gamma[0], gamma[1], gamma[2:]

    sigma = np.sqrt(np.maximum(within + R * rss, 0.0) / (R * T))
    if np.any(sigma < SIGMA_FLOOR):
        logger.debug(f"{int(np.sum(sigma < SIGMA_FLOOR))} 个格点的 σ 取下限 {SIGMA_FLOOR}。")
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    shape = spec.shape
    harmonic_coeffs = harmonic_coeffs.reshape(2 * K, *shape)
    params = TrendParams(
        spec=spec,
        K=K,
        tau=tau,
        beta0=beta0.reshape(shape),
        beta1=beta1.reshape(shape),
        beta2=beta2.reshape(shape),
        rho=np.clip(rho, 0.0, 1.0).reshape(shape),
        a=harmonic_coeffs[:K],
        b=harmonic_coeffs[K:],
        sigma=sigma.reshape(shape),
    )
    logger.info(
        f"趋势拟合完成: {n} 个格点, T={T}, R={R}, K={K}, τ={tau}, "
        f"平均 σ={float(np.mean(sigma)):.4g}"
    )
    return params


def _warn_rank(design: np.ndarray) -> None:
    rank = np.linalg.matrix_rank(design)
    if rank < design.shape[1]:
        logger.warning(
            f"趋势设计矩阵秩亏 ({rank} < {design.shape[1]})，不可识别的系数取最小范数解。"
        )


def save_trend(params: TrendParams, path: Path) -> None:
    header = {
        "band_limit": params.spec.band_limit,
        "n_theta": params.spec.n_theta,
        "n_phi": params.spec.n_phi,
        "K": params.K,
        "tau": params.tau,
    }
    write_container(Path(path), TREND_MAGIC, TREND_LAYOUT, header, params.records())


def load_trend(path: Path) -> TrendParams:
    path = Path(path)
    header, payload = read_container(path, TREND_MAGIC, TREND_LAYOUT)
    spec = GridSpec(
        n_theta=header["n_theta"], n_phi=header["n_phi"], band_limit=header["band_limit"]
    )
    K = header["K"]
    expect_count(payload, spec.point_count * (5 + 2 * K), path.name)
    try:
        return TrendParams.from_records(
            spec, K, header["tau"], payload.reshape(spec.point_count, 5 + 2 * K)
        )
    except ValueError as exc:
        raise ContainerFormatError(f"{path.name}: {exc}") from exc
