"""
等角网格上的正/逆球谐变换：φ 方向 FFT，θ 方向借助 Wigner-d 在 π/2 处的分解，
再用块对角的 S 张量完成收缩。
"""

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.fft
from scipy.special import gammaln, lpmv

from config import logger
from grid import EquiangularField, FieldSeries, GridSpec, quadrature_weights, sine_moments
from storage import ContainerFormatError, expect_count, read_container, write_container
from wigner import WignerTables, ensure_cached, load_or_build_tables

COEFF_MAGIC = b"SPHC"
COEFF_LAYOUT = (("band_limit", "I"), ("T", "I"), ("R", "I"))

ORACLE_MAX_BAND_LIMIT = 24
SQRT2 = math.sqrt(2.0)


class SliceTransformError(RuntimeError):
    """某个时间切片的变换失败，携带其时间与集合下标。"""

    def __init__(self, message: str, *, time_index: int, ensemble_index: int = 1):
        super().__init__(message)
        self.time_index = time_index
        self.ensemble_index = ensemble_index


@dataclass(frozen=True, eq=False)
class HarmonicVector:
    """实场的 L² 个实系数，按 ℓ 升序，每个 ℓ 内依次为 m=0 与 m=1..ℓ 的 (Re, Im) 对（已乘 √2）。"""

    band_limit: int
    coeffs: np.ndarray

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=np.float64)
        if coeffs.flags.writeable:
            coeffs = coeffs.copy()
            coeffs.setflags(write=False)
        if coeffs.shape != (self.band_limit * self.band_limit,):
            raise ValueError(
                f"系数长度应为 L²={self.band_limit ** 2}，实际形状为 {coeffs.shape}。"
            )
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("系数向量包含非有限值。")
        object.__setattr__(self, "coeffs", coeffs)


def i_integral(q: int) -> complex:
    """∫₀^π e^{iqθ} sinθ dθ 的闭式值。"""
    q = int(q)
    if q % 2:
        return complex(0.0, q * math.pi / 2.0) if abs(q) == 1 else 0j
    return complex(2.0 / (1.0 - q * q), 0.0)


def _pack_index(band_limit: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """返回 (ℓ, m, 实部槽位)；m ≥ 1 的虚部槽位为实部槽位 + 1。"""
    ls, ms = np.tril_indices(band_limit)
    slots = ls * ls + np.where(ms == 0, 0, 2 * ms - 1)
    return ls, ms, slots


def pack_coefficients(z: np.ndarray) -> np.ndarray:
    """复系数 z[ℓ, m]（m ≥ 0，下三角）压缩为 L² 个实数。"""
    z = np.asarray(z, dtype=np.complex128)
    L = z.shape[-1]
    if z.shape[-2:] != (L, L):
        raise ValueError(f"复系数数组最后两维应为 (L, L)，实际为 {z.shape}。")
    ls, ms, slots = _pack_index(L)
    out = np.zeros(z.shape[:-2] + (L * L,))
    values = z[..., ls, ms]
    zero = ms == 0
    out[..., slots[zero]] = values[..., zero].real
    out[..., slots[~zero]] = SQRT2 * values[..., ~zero].real
    out[..., slots[~zero] + 1] = SQRT2 * values[..., ~zero].imag
    return out


def unpack_coefficients(coeffs: Union[HarmonicVector, np.ndarray]) -> np.ndarray:
    """pack_coefficients 的逆；负 m 由 z_{ℓ,−m} = (−1)^m conj(z_{ℓ,m}) 给出，不单独存储。"""
    values = coeffs.coeffs if isinstance(coeffs, HarmonicVector) else np.asarray(coeffs)
    L = math.isqrt(values.shape[-1])
    if L * L != values.shape[-1]:
        raise ValueError(f"系数长度 {values.shape[-1]} 不是完全平方数。")
    ls, ms, slots = _pack_index(L)
    z = np.zeros(values.shape[:-1] + (L, L), dtype=np.complex128)
    zero = ms == 0
    z[..., ls[zero], ms[zero]] = values[..., slots[zero]]
    z[..., ls[~zero], ms[~zero]] = (
        values[..., slots[~zero]] + 1j * values[..., slots[~zero] + 1]
    ) / SQRT2
    return z


@dataclass(frozen=True, eq=False)
class ShtPlan:
    spec: GridSpec
    tables: WignerTables
    w1: np.ndarray
    w2: np.ndarray
    e_phi: np.ndarray
    d_parity: np.ndarray
    y_blocks: Tuple[np.ndarray, ...]

    @property
    def band_limit(self) -> int:
        return self.spec.band_limit


def _synthesis_block(tables: WignerTables, thetas: np.ndarray, m: int) -> np.ndarray:
    """Ỹ_{ℓ,m}(θ_i)，形状 (n_theta, L−m)，由 S 块按 m″ 折叠成余弦或正弦和。"""
    L = tables.band_limit
    orders = np.arange(L)
    mult = np.where(orders == 0, 1.0, 2.0)
    if m % 2 == 0:
        trig = np.cos(np.outer(thetas, orders))
        sign = -1.0 if (m // 2) % 2 else 1.0
    else:
        trig = np.sin(np.outer(thetas, orders))
        sign = -1.0 if ((m - 1) // 2) % 2 else 1.0
    return sign * trig @ (tables.s_block(m) * mult[None, :]).T


def build_plan(spec: GridSpec, tables: WignerTables) -> ShtPlan:
    """预先计算除数据外的全部算子矩阵。"""
    L = spec.band_limit
    if tables.band_limit != L:
        raise ValueError(
            f"Wigner 表的带限 {tables.band_limit} 与网格带限 {L} 不一致。"
        )
    n_theta, n_phi = spec.n_theta, spec.n_phi
    period = 2 * n_theta - 2
    orders = np.arange(-(L - 1), L)
    ext_thetas = 2.0 * np.pi * np.arange(period) / period

    coupling = sine_moments(orders[:, None] + orders[None, :])
    exponentials = np.exp(-1j * np.outer(orders, ext_thetas))
    weights = coupling @ exponentials / period
    w1 = weights[:, :n_theta]
    w2 = weights[:, n_theta:]

    e_phi = np.exp(-1j * np.outer(spec.phis, orders)) / n_phi
    d_parity = np.where(np.arange(L) % 2, -1.0, 1.0)
    y_blocks = tuple(_synthesis_block(tables, spec.thetas, m) for m in range(L))

    for name, matrix in (("w1", w1), ("w2", w2), ("e_phi", e_phi)):
        matrix.setflags(write=False)
        if not np.all(np.isfinite(matrix)):
            raise FloatingPointError(f"算子矩阵 {name} 含非有限值。")
    for block in y_blocks:
        block.setflags(write=False)
    return ShtPlan(
        spec=spec,
        tables=tables,
        w1=w1,
        w2=w2,
        e_phi=e_phi,
        d_parity=d_parity,
        y_blocks=y_blocks,
    )


_PLAN_CACHE: Dict[GridSpec, ShtPlan] = {}
_PLAN_LOCK = threading.Lock()


def plan_for(
    spec: GridSpec,
    cache_dir: Optional[Path] = None,
    *,
    memory_cap_mb: Optional[int] = None,
) -> ShtPlan:
    """进程内缓存的变换计划；只有 Wigner 表会落盘。"""
    with _PLAN_LOCK:
        plan = _PLAN_CACHE.get(spec)
        if plan is None:
            tables = load_or_build_tables(
                spec.band_limit, cache_dir, memory_cap_mb=memory_cap_mb
            )
            plan = build_plan(spec, tables)
            _PLAN_CACHE[spec] = plan
        else:
            ensure_cached(plan.tables, cache_dir)
        return plan


def _forward_values(plan: ShtPlan, values: np.ndarray) -> np.ndarray:
    spec = plan.spec
    L = spec.band_limit
    g = (2.0 * np.pi / spec.n_phi) * scipy.fft.rfft(values, axis=1)[:, :L]
    reflected = g[1:-1][::-1] * plan.d_parity[None, :]
    h = plan.w1 @ g + plan.w2 @ reflected
    folded = h[L - 1 :] + h[L - 1 :: -1] * plan.d_parity[None, :]
    folded[0] = h[L - 1]

    z = np.zeros((L, L), dtype=np.complex128)
    for m in range(L):
        z[m:, m] = plan.tables.phases[m] * (plan.tables.s_block(m) @ folded[:, m])
    coeffs = pack_coefficients(z)
    if not np.all(np.isfinite(coeffs)):
        raise FloatingPointError("正变换产生了非有限的中间量。")
    return coeffs


def _inverse_values(plan: ShtPlan, coeffs: np.ndarray) -> np.ndarray:
    spec = plan.spec
    L = spec.band_limit
    z = unpack_coefficients(coeffs)
    spectrum = np.zeros((spec.n_theta, spec.n_phi // 2 + 1), dtype=np.complex128)
    for m in range(L):
        spectrum[:, m] = spec.n_phi * (plan.y_blocks[m] @ z[m:, m])
    return scipy.fft.irfft(spectrum, n=spec.n_phi, axis=1)


def forward_sht(plan: ShtPlan, field: EquiangularField) -> HarmonicVector:
    if field.spec != plan.spec:
        raise ValueError(f"场的网格 {field.spec} 与变换计划的网格 {plan.spec} 不一致。")
    try:
        coeffs = _forward_values(plan, field.values)
    except FloatingPointError as exc:
        raise SliceTransformError(
            str(exc), time_index=field.time_index, ensemble_index=field.ensemble_index
        ) from exc
    return HarmonicVector(plan.band_limit, coeffs)


def inverse_sht(
    plan: ShtPlan,
    coeffs: HarmonicVector,
    *,
    time_index: int = 1,
    ensemble_index: int = 1,
) -> EquiangularField:
    if coeffs.band_limit != plan.band_limit:
        raise ValueError(
            f"系数带限 {coeffs.band_limit} 与变换计划带限 {plan.band_limit} 不一致。"
        )
    return EquiangularField(
        spec=plan.spec,
        values=_inverse_values(plan, coeffs.coeffs),
        time_index=time_index,
        ensemble_index=ensemble_index,
    )


def _run_slices(function, count: int, threads: int) -> list:
    if threads <= 1 or count <= 1:
        return [function(index) for index in range(count)]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        return list(executor.map(function, range(count)))


def forward_sht_series(plan: ShtPlan, series: FieldSeries, *, threads: int = 1) -> np.ndarray:
    """整个序列的正变换，返回形状 (R, T, L²)；切片并行，结果按时间顺序排列。"""
    if series.spec != plan.spec:
        raise ValueError(f"序列的网格 {series.spec} 与变换计划的网格 {plan.spec} 不一致。")
    R, T = series.R, series.T

    def transform(index: int) -> np.ndarray:
        r, t = divmod(index, T)
        try:
            return _forward_values(plan, series.values[r, t])
        except Exception as exc:
            raise SliceTransformError(
                f"时间切片 t={series.t_start + t}, r={r + 1} 的正变换失败: {exc}",
                time_index=series.t_start + t,
                ensemble_index=r + 1,
            ) from exc

    results = _run_slices(transform, R * T, threads)
    return np.stack(results).reshape(R, T, plan.band_limit**2)


def forward_sht_batch(
    plan: ShtPlan, series: FieldSeries, *, threads: int = 1
) -> List[HarmonicVector]:
    coeffs = forward_sht_series(plan, series, threads=threads)
    L = plan.band_limit
    return [HarmonicVector(L, row) for row in coeffs.reshape(-1, L * L)]


def inverse_sht_batch(
    plan: ShtPlan,
    coeffs: Union[np.ndarray, Sequence[HarmonicVector]],
    *,
    threads: int = 1,
    t_start: int = 1,
) -> FieldSeries:
    """批量逆变换；输入为 (R, T, L²) 数组或单成员的 HarmonicVector 序列。"""
    if not isinstance(coeffs, np.ndarray):
        coeffs = np.stack([vector.coeffs for vector in coeffs])[None]
    if coeffs.ndim == 2:
        coeffs = coeffs[None]
    L = plan.band_limit
    if coeffs.shape[-1] != L * L:
        raise ValueError(f"系数长度 {coeffs.shape[-1]} 与带限 {L} 不一致。")
    R, T = coeffs.shape[:2]

    def synthesize(index: int) -> np.ndarray:
        r, t = divmod(index, T)
        return _inverse_values(plan, coeffs[r, t])

    slices = _run_slices(synthesize, R * T, threads)
    values = np.stack(slices).reshape(R, T, plan.spec.n_theta, plan.spec.n_phi)
    return FieldSeries(spec=plan.spec, values=values, t_start=t_start)


def quadrature_oracle_sht(field: EquiangularField, band_limit: int) -> HarmonicVector:
    """直接求积的参考实现：θ 用 Clenshaw–Curtis 权重，φ 用均匀权重，勒让德函数逐个计算。"""
    spec = field.spec
    L = int(band_limit)
    if not 1 <= L <= ORACLE_MAX_BAND_LIMIT:
        raise ValueError(f"参考实现只支持 1 ≤ L ≤ {ORACLE_MAX_BAND_LIMIT}，实际为 {L}。")
    if spec.n_theta < 4 * L or spec.n_phi < 2 * L - 1:
        raise ValueError(
            f"网格 {spec.shape} 对 L={L} 分辨率不足（需要 n_theta ≥ 4L 且 n_phi ≥ 2L−1）。"
        )
    thetas = spec.thetas
    weights = quadrature_weights(spec)
    orders = np.arange(L)
    e = np.exp(-1j * np.outer(spec.phis, orders))
    g = field.values @ e
    cos_theta = np.cos(thetas)

    z = np.zeros((L, L), dtype=np.complex128)
    for l in range(L):
        for m in range(l + 1):
            norm = math.sqrt((2 * l + 1) / (4.0 * math.pi)) * math.exp(
                0.5 * (gammaln(l - m + 1) - gammaln(l + m + 1))
            )
            y = norm * lpmv(m, l, cos_theta)
            z[l, m] = np.sum(weights * y * g[:, m])
    return HarmonicVector(L, pack_coefficients(z))


def degree_power(coeffs: Union[HarmonicVector, np.ndarray]) -> np.ndarray:
    """每个 ℓ 的功率 Σ_m |z_{ℓ,m}|²（沿最后一维计算）。"""
    values = coeffs.coeffs if isinstance(coeffs, HarmonicVector) else np.asarray(coeffs)
    L = math.isqrt(values.shape[-1])
    if L * L != values.shape[-1]:
        raise ValueError(f"系数长度 {values.shape[-1]} 不是完全平方数。")
    starts = np.arange(L) ** 2
    return np.add.reduceat(values**2, starts, axis=-1)


def save_coefficients(path: Path, coeffs: np.ndarray) -> None:
    """写 SPHC 容器，coeffs 形状为 (R, T, L²)。"""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 2:
        coeffs = coeffs[None]
    L = math.isqrt(coeffs.shape[-1])
    if coeffs.ndim != 3 or L * L != coeffs.shape[-1]:
        raise ValueError(f"系数数组形状 {coeffs.shape} 应为 (R, T, L²)。")
    header = {"band_limit": L, "T": coeffs.shape[1], "R": coeffs.shape[0]}
    write_container(Path(path), COEFF_MAGIC, COEFF_LAYOUT, header, coeffs)


def load_coefficients(path: Path) -> np.ndarray:
    path = Path(path)
    header, payload = read_container(path, COEFF_MAGIC, COEFF_LAYOUT)
    L, T, R = header["band_limit"], header["T"], header["R"]
    if L < 1 or T < 1 or R < 1:
        raise ContainerFormatError(f"{path.name}: L、T、R 必须为正。")
    expect_count(payload, R * T * L * L, path.name)
    if not np.all(np.isfinite(payload)):
        raise ContainerFormatError(f"{path.name}: 包含非有限值。")
    logger.debug(f"已读取系数文件 {path.name}: L={L}, T={T}, R={R}")
    return payload.reshape(R, T, L * L)
