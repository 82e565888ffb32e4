"""
谐波系数的时间依赖建模（对角 VAR(P)）、新息协方差估计、残差噪声场与随机模拟。
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, List, Optional, Tuple

import numpy as np

from config import logger
from grid import FieldSeries, GridSpec
from mpchol import NotPositiveDefiniteError, PrecisionMap, factorize_dense
from sampling import box_muller, make_generator
from sht import inverse_sht_batch, plan_for
from storage import ContainerFormatError, expect_count, read_container, write_container
from trend import ForcingTrajectory, mean_trend_stack

if TYPE_CHECKING:
    from pipeline import EmulatorModel

VAR_MAGIC = b"VARM"
VAR_LAYOUT = (("P", "I"), ("band_limit", "I"))
UCOV_MAGIC = b"UCOV"
UCOV_LAYOUT = (("dimension", "I"), ("nugget", "d"))
NOISE_MAGIC = b"NOIS"
NOISE_LAYOUT = (("n_theta", "I"), ("n_phi", "I"))

COVARIANCE_CHUNK = 256
MA_TOLERANCE = 1e-12
MA_MAX_TERMS = 100_000


class InnovationError(RuntimeError):
    """新息协方差无法因子分解（残差全零或 nugget 超过上限）。"""


@dataclass(frozen=True, eq=False)
class VarModel:
    """对角 VAR(P)：phi[p−1, j] 为第 j 个系数的第 p 阶自回归权重。"""

    P: int
    band_limit: int
    phi: np.ndarray

    def __post_init__(self) -> None:
        phi = np.array(self.phi, dtype=np.float64).reshape(self.P, self.band_limit**2)
        if not np.all(np.isfinite(phi)):
            raise ValueError("VAR 系数包含非有限值。")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    def unstable_count(self) -> int:
        """伴随矩阵谱半径 ≥ 1 的系数个数。"""
        if self.P == 0:
            return 0
        n = self.phi.shape[1]
        companion = np.zeros((n, self.P, self.P))
        companion[:, 0, :] = self.phi.T
        if self.P > 1:
            companion[:, np.arange(1, self.P), np.arange(self.P - 1)] = 1.0
        radius = np.max(np.abs(np.linalg.eigvals(companion)), axis=1)
        return int(np.count_nonzero(radius >= 1.0))


def _as_coefficient_array(coeff_series) -> np.ndarray:
    if isinstance(coeff_series, np.ndarray):
        array = coeff_series
    else:
        array = np.array([[vector.coeffs for vector in member] for member in coeff_series])
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3:
        raise ValueError(f"系数序列形状 {array.shape} 应为 (R, T, L²)。")
    return np.asarray(array, dtype=np.float64)


def fit_var(coeff_series, P: int) -> Tuple[VarModel, np.ndarray]:
    """逐系数、合并集合成员的最小二乘；返回模型与 t = P+1..T 的残差，形状 (R, T−P, L²)。"""
    f = _as_coefficient_array(coeff_series)
    R, T, n = f.shape
    L = math.isqrt(n)
    if L * L != n:
        raise ValueError(f"系数长度 {n} 不是完全平方数。")
    if P < 0:
        raise ValueError(f"VAR 阶数必须 ≥ 0，实际为 {P}。")
    if T <= P + 1:
        raise ValueError(f"拟合 VAR({P}) 需要 T > P + 1，实际 T={T}。")

    if P == 0:
        residuals = f - f.mean(axis=(0, 1), keepdims=True)
        return VarModel(P=0, band_limit=L, phi=np.zeros((0, n))), residuals

    target = f[:, P:, :]
    lags = np.stack([f[:, P - p : T - p, :] for p in range(1, P + 1)])
    gram = np.einsum("arti,brti->iab", lags, lags)
    rhs = np.einsum("arti,rti->ia", lags, target)

    scale = np.trace(gram, axis1=1, axis2=2)
    degenerate = scale <= np.finfo(np.float64).tiny
    safe = ~degenerate
    if np.any(safe):
        degenerate[safe] = np.linalg.cond(gram[safe]) > 1e12
    phi = np.zeros((n, P))
    ok = ~degenerate
    if np.any(ok):
        phi[ok] = np.linalg.solve(gram[ok], rhs[ok][..., None])[..., 0]
    if np.any(degenerate):
        logger.warning(f"{int(np.sum(degenerate))} 个谐波系数的回归量退化，其 VAR 系数置零。")

    model = VarModel(P=P, band_limit=L, phi=phi.T)
    residuals = target - np.einsum("pi,prti->rti", model.phi, lags)
    unstable = model.unstable_count()
    if unstable:
        logger.warning(f"{unstable} 个谐波系数的 AR({P}) 多项式不平稳（谱半径 ≥ 1）。")
    logger.info(f"VAR({P}) 拟合完成: L={L}, R={R}, T={T}")
    return model, residuals


def _pairwise_sum(parts: List[np.ndarray]) -> np.ndarray:
    """固定顺序的两两归约树，结果与线程数无关。"""
    while len(parts) > 1:
        merged = [parts[k] + parts[k + 1] for k in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            merged.append(parts[-1])
        parts = merged
    return parts[0]


def second_moment(xi: np.ndarray, *, workers: int = 1) -> np.ndarray:
    """Σ ξξᵀ，按固定大小的块分别累加后归约。"""
    chunks = [xi[start : start + COVARIANCE_CHUNK] for start in range(0, xi.shape[0], COVARIANCE_CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda chunk: chunk.T @ chunk, chunks))
    else:
        parts = [chunk.T @ chunk for chunk in chunks]
    return _pairwise_sum(parts)


@dataclass(frozen=True, eq=False)
class InnovationModel:
    u_hat: np.ndarray
    v_factor: np.ndarray
    nugget: float = 0.0
    residual_mean_norm: float = 0.0

    def __post_init__(self) -> None:
        u = np.asarray(self.u_hat, dtype=np.float64)
        v = np.asarray(self.v_factor, dtype=np.float64)
        if u.ndim != 2 or u.shape[0] != u.shape[1] or v.shape != u.shape:
            raise ValueError(f"Û 与 V 的形状不一致: {u.shape} / {v.shape}。")
        if not np.allclose(u, u.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.max(np.abs(u))))):
            raise ValueError("Û 不对称。")
        if np.any(np.triu(v, 1) != 0.0):
            raise ValueError("V 必须是下三角矩阵。")
        if self.nugget < 0.0:
            raise ValueError("nugget 不能为负。")
        object.__setattr__(self, "u_hat", u)
        object.__setattr__(self, "v_factor", v)

    @property
    def dimension(self) -> int:
        return self.u_hat.shape[0]

    @classmethod
    def from_covariance(
        cls,
        u_hat: np.ndarray,
        pmap: Optional[PrecisionMap] = None,
        *,
        tile_size: int = 128,
        workers: int = 1,
        conversion_site: str = "sender",
    ) -> "InnovationModel":
        """直接分解给定的协方差（不加 nugget）。"""
        v, _ = factorize_dense(
            u_hat,
            pmap or PrecisionMap(),
            tile_size=tile_size,
            workers=workers,
            conversion_site=conversion_site,
        )
        return cls(u_hat=u_hat, v_factor=v)


def estimate_innovation_covariance(
    residuals: np.ndarray,
    R: int,
    T: int,
    P: int,
    *,
    pmap: Optional[PrecisionMap] = None,
    tile_size: int = 128,
    workers: int = 1,
    conversion_site: str = "sender",
    nugget_start: float = 1e-8,
    nugget_cap: float = 1e-2,
) -> InnovationModel:
    """Û = Σ ξξᵀ / (R(T−P))；秩亏或分解失败时按 ×10 逐步增大对角 nugget。"""
    xi = np.asarray(residuals, dtype=np.float64)
    xi = xi.reshape(-1, xi.shape[-1])
    count = R * (T - P)
    if count < 1:
        raise ValueError(f"残差数量 R(T−P) = {count} 必须 ≥ 1。")
    if xi.shape[0] != count:
        raise ValueError(f"残差有 {xi.shape[0]} 个向量，但 R(T−P) = {count}。")
    dimension = xi.shape[1]
    pmap = pmap or PrecisionMap()

    u_hat = second_moment(xi, workers=workers) / count
    u_hat = 0.5 * (u_hat + u_hat.T)
    mean_norm = float(np.linalg.norm(xi.mean(axis=0)))
    mean_diag = float(np.mean(np.diag(u_hat)))
    if mean_diag <= 0.0:
        raise InnovationError("残差全为零，新息协方差无法正定化。")

    nugget = 0.0
    if count < dimension:
        nugget = nugget_start * mean_diag
        logger.warning(
            f"残差数量 R(T−P)={count} 小于维数 L²={dimension}，Û 必然秩亏，加入 nugget {nugget:.3g}。"
        )
    while True:
        if nugget > nugget_cap * mean_diag * (1.0 + 1e-12):
            raise InnovationError(
                f"nugget 已超过上限 {nugget_cap:g}·mean(diag Û)，Û 仍无法分解。"
            )
        try:
            v, _ = factorize_dense(
                u_hat + nugget * np.eye(dimension),
                pmap,
                tile_size=tile_size,
                workers=workers,
                conversion_site=conversion_site,
            )
            break
        except NotPositiveDefiniteError as exc:
            nugget = nugget_start * mean_diag if nugget == 0.0 else nugget * 10.0
            logger.warning(f"Û 分解失败（块 {exc.tile}），nugget 增大到 {nugget:.3g}。")

    logger.info(
        f"新息协方差估计完成: 维数 {dimension}, 样本 {count}, nugget={nugget:.3g}, "
        f"残差均值范数 {mean_norm:.3g}"
    )
    return InnovationModel(
        u_hat=u_hat, v_factor=v, nugget=nugget, residual_mean_norm=mean_norm
    )


@dataclass(frozen=True, eq=False)
class NoiseField:
    spec: GridSpec
    v_squared: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.v_squared, dtype=np.float64)
        if values.shape != self.spec.shape:
            raise ValueError(f"噪声场形状 {values.shape} 与网格 {self.spec.shape} 不一致。")
        if np.any(values < 0.0) or not np.all(np.isfinite(values)):
            raise ValueError("v² 必须处处非负且有限。")
        values.setflags(write=False)
        object.__setattr__(self, "v_squared", values)


def fit_noise_field(detrended: FieldSeries, reconstructed: FieldSeries) -> NoiseField:
    """v² 为逐格点的 (原场 − 带限重构)² 在 t 与 r 上的均值。"""
    if detrended.spec != reconstructed.spec:
        raise ValueError("去趋势场与重构场的网格不一致。")
    if detrended.values.shape != reconstructed.values.shape:
        raise ValueError("去趋势场与重构场的 (R, T) 不一致。")
    difference = detrended.values - reconstructed.values
    return NoiseField(spec=detrended.spec, v_squared=np.mean(difference**2, axis=(0, 1)))


def simulate_coefficients(
    var: VarModel,
    innovation: InnovationModel,
    T_out: int,
    rng: np.random.Generator,
    *,
    burn_in: int,
) -> np.ndarray:
    """ξ_t = Vη_t，f_t = Σ_p Φ_p f_{t−p} + ξ_t，从零初值开始并丢弃 burn_in 步。"""
    n = var.band_limit**2
    total = burn_in + T_out
    eta = box_muller(rng, (total, n))
    xi = eta @ innovation.v_factor.T
    f = np.zeros((total + var.P, n))
    for t in range(total):
        step = xi[t].copy()
        for p in range(1, var.P + 1):
            step += var.phi[p - 1] * f[var.P + t - p]
        f[var.P + t] = step
    return f[var.P + burn_in :]


def emulate(
    model: "EmulatorModel",
    T_out: int,
    seed: int,
    *,
    n_ensembles: int = 1,
    t_start: int = 1,
    forcing: Optional[ForcingTrajectory] = None,
    threads: int = 1,
    burn_in_factor: int = 10,
) -> FieldSeries:
    """按给定种子生成模拟：AR 递推是串行的，逆变换按时间切片并行。"""
    missing = [
        name
        for name in ("trend", "var", "innovation", "noise")
        if getattr(model, name, None) is None
    ]
    if missing:
        raise ValueError(f"模型不完整，缺少: {', '.join(missing)}")
    if T_out < 1 or n_ensembles < 1:
        raise ValueError("T_out 与集合数都必须 ≥ 1。")
    spec = model.spec
    L = spec.band_limit
    if model.var.band_limit != L or model.innovation.dimension != L * L:
        raise ValueError("模型各组成部分的带限不一致。")
    forcing = forcing if forcing is not None else model.forcing

    rng = make_generator(seed)
    burn_in = burn_in_factor * model.var.P
    coefficients = np.empty((n_ensembles, T_out, L * L))
    noise = np.empty((n_ensembles, T_out, *spec.shape))
    noise_std = np.sqrt(model.noise.v_squared)
    for r in range(n_ensembles):
        coefficients[r] = simulate_coefficients(
            model.var, model.innovation, T_out, rng, burn_in=burn_in
        )
        noise[r] = box_muller(rng, (T_out, *spec.shape)) * noise_std

    plan = plan_for(spec)
    standardized = inverse_sht_batch(plan, coefficients, threads=threads, t_start=t_start)
    ts = t_start + np.arange(T_out)
    trend = mean_trend_stack(model.trend, forcing, ts)
    values = trend[None] + model.trend.sigma * (standardized.values + noise)
    logger.info(f"模拟完成: T={T_out}, 集合数={n_ensembles}, 种子={seed}")
    return FieldSeries(spec=spec, values=values, t_start=t_start)


def ma_weights(var: VarModel) -> np.ndarray:
    """各系数 AR 过程的 MA(∞) 权重 ψ(a)，截断到 |ψ| < 1e−12。"""
    n = var.band_limit**2
    weights = [np.ones(n)]
    if var.P == 0:
        return np.stack(weights)
    if var.unstable_count():
        raise ValueError("VAR 模型不平稳，平稳协方差不存在。")
    while len(weights) < MA_MAX_TERMS:
        a = len(weights)
        step = np.zeros(n)
        for p in range(1, min(var.P, a) + 1):
            step += var.phi[p - 1] * weights[a - p]
        weights.append(step)
        tail = np.stack(weights[-var.P :])
        if np.max(np.abs(tail)) < MA_TOLERANCE:
            break
    return np.stack(weights)


def stationary_coefficient_covariance(var: VarModel, u: np.ndarray) -> np.ndarray:
    """Γ_jk = U_jk Σ_a ψ_j(a)ψ_k(a)。"""
    psi = ma_weights(var)
    return np.asarray(u, dtype=np.float64) * (psi.T @ psi)


def synthesis_rows(spec: GridSpec) -> np.ndarray:
    """每个实基函数在网格上的取值，形状 (L², n_theta·n_phi)。"""
    n = spec.band_limit**2
    basis = inverse_sht_batch(plan_for(spec), np.eye(n)[None])
    return basis.values.reshape(n, spec.point_count)


def implied_field_std(model: "EmulatorModel") -> np.ndarray:
    """平稳状态下模拟场的逐格点标准差 σ·sqrt(yᵀΓy + v²)。"""
    spec = model.spec
    innovation = model.innovation
    u = innovation.v_factor @ innovation.v_factor.T
    gamma = stationary_coefficient_covariance(model.var, u)
    rows = synthesis_rows(spec)
    variance = np.sum((gamma @ rows) * rows, axis=0).reshape(spec.shape)
    return model.trend.sigma * np.sqrt(variance + model.noise.v_squared)


def save_var(var: VarModel, path: Path) -> None:
    write_container(
        Path(path), VAR_MAGIC, VAR_LAYOUT, {"P": var.P, "band_limit": var.band_limit}, var.phi
    )


def load_var(path: Path) -> VarModel:
    path = Path(path)
    header, payload = read_container(path, VAR_MAGIC, VAR_LAYOUT)
    P, L = header["P"], header["band_limit"]
    expect_count(payload, P * L * L, path.name)
    return VarModel(P=P, band_limit=L, phi=payload.reshape(P, L * L))


def _pack_lower(matrix: np.ndarray) -> np.ndarray:
    return matrix[np.tril_indices(matrix.shape[0])]


def _unpack_lower(values: np.ndarray, dimension: int) -> np.ndarray:
    matrix = np.zeros((dimension, dimension))
    matrix[np.tril_indices(dimension)] = values
    return matrix


def save_innovation(innovation: InnovationModel, path: Path) -> None:
    """V 与 Û 都只存下三角（Û 对称，读回时补全）。"""
    header = {"dimension": innovation.dimension, "nugget": innovation.nugget}
    payload = np.concatenate(
        [_pack_lower(innovation.v_factor), _pack_lower(innovation.u_hat)]
    )
    write_container(Path(path), UCOV_MAGIC, UCOV_LAYOUT, header, payload)


def load_innovation(path: Path, *, residual_mean_norm: float = 0.0) -> InnovationModel:
    path = Path(path)
    header, payload = read_container(path, UCOV_MAGIC, UCOV_LAYOUT)
    n = header["dimension"]
    packed = n * (n + 1) // 2
    expect_count(payload, 2 * packed, path.name)
    v = _unpack_lower(payload[:packed], n)
    lower = _unpack_lower(payload[packed:], n)
    u = lower + np.tril(lower, -1).T
    return InnovationModel(
        u_hat=u, v_factor=v, nugget=header["nugget"], residual_mean_norm=residual_mean_norm
    )


def save_noise(noise: NoiseField, path: Path) -> None:
    header = {"n_theta": noise.spec.n_theta, "n_phi": noise.spec.n_phi}
    write_container(Path(path), NOISE_MAGIC, NOISE_LAYOUT, header, noise.v_squared)


def load_noise(path: Path, spec: GridSpec) -> NoiseField:
    path = Path(path)
    header, payload = read_container(path, NOISE_MAGIC, NOISE_LAYOUT)
    if (header["n_theta"], header["n_phi"]) != spec.shape:
        raise ContainerFormatError(
            f"{path.name}: 网格 ({header['n_theta']}, {header['n_phi']}) 与模型网格 {spec.shape} 不一致。"
        )
    expect_count(payload, spec.point_count, path.name)
    return NoiseField(spec=spec, v_squared=payload.reshape(spec.shape))
