"""
等角网格几何、场数据的存储与读写、合成数据生成，以及不同分辨率之间的样条上采样。
"""

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from config import logger
from sampling import box_muller, make_generator
from storage import (
    ContainerFormatError,
    expect_count,
    read_container,
    write_container,
)

FIELD_MAGIC = b"SPHF"
FIELD_VERSION = 1
FIELD_LAYOUT = (
    ("version", "I"),
    ("n_theta", "I"),
    ("n_phi", "I"),
    ("band_limit", "I"),
    ("T", "I"),
    ("R", "I"),
)

KM_PER_DEGREE = 111.2


class AdmissibilityError(ValueError):
    """带限 L 不满足 L ≤ min(n_theta − 1, (n_phi + 1)/2)。"""


class FieldFormatError(ContainerFormatError):
    """场文件头部、形状或数值不合法。"""


@dataclass(frozen=True)
class GridSpec:
    """包含两极的等角网格：n_theta 条等纬度环，每环 n_phi 个经度点。"""

    n_theta: int
    n_phi: int
    band_limit: int

    def __post_init__(self) -> None:
        for name in ("n_theta", "n_phi", "band_limit"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise AdmissibilityError(f"{name} 必须是正整数，实际为 {value!r}。")
            object.__setattr__(self, name, int(value))
        L = self.band_limit
        if L > self.n_theta - 1 or 2 * L > self.n_phi + 1:
            raise AdmissibilityError(
                f"带限 L={L} 不可采纳: 需要 L ≤ min(n_theta−1, (n_phi+1)/2) = "
                f"min({self.n_theta - 1}, {(self.n_phi + 1) / 2})。"
            )

    @classmethod
    def from_band_limit(cls, band_limit: int) -> "GridSpec":
        """ERA5 风格网格：L+1 条纬度环、2L 个经度点（L=720 对应 721×1440）。"""
        return cls(n_theta=band_limit + 1, n_phi=2 * band_limit, band_limit=band_limit)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GridSpec":
        return cls(
            n_theta=int(data["n_theta"]),
            n_phi=int(data["n_phi"]),
            band_limit=int(data["band_limit"]),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def shape(self) -> tuple:
        return (self.n_theta, self.n_phi)

    @property
    def thetas(self) -> np.ndarray:
        return np.pi * np.arange(self.n_theta) / (self.n_theta - 1)

    @property
    def phis(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_phi) / self.n_phi

    @property
    def point_count(self) -> int:
        return self.n_theta * self.n_phi


def _frozen(values: Any) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if array.flags.writeable:
        array = array.copy()
        array.setflags(write=False)
    return array


@dataclass(frozen=True)
class EquiangularField:
    """某一时刻、某一集合成员在网格上的实值场。values 按环行主序（θ 外层，φ 内层）。"""

    spec: GridSpec
    values: np.ndarray
    time_index: int = 1
    ensemble_index: int = 1

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.shape != self.spec.shape:
            raise FieldFormatError(
                f"场的形状 {values.shape} 与网格 {self.spec.shape} 不一致。"
            )
        if not np.all(np.isfinite(values)):
            raise FieldFormatError(
                f"t={self.time_index}, r={self.ensemble_index} 的场包含非有限值。"
            )
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class FieldSeries:
    """按集合成员分组的时间序列，values 形状为 (R, T, n_theta, n_phi)。"""

    spec: GridSpec
    values: np.ndarray
    t_start: int = 1

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.ndim != 4 or values.shape[2:] != self.spec.shape:
            raise FieldFormatError(
                f"序列形状 {values.shape} 应为 (R, T, {self.spec.n_theta}, {self.spec.n_phi})。"
            )
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise FieldFormatError("序列至少需要一个集合成员和一个时间点。")
        if not np.all(np.isfinite(values)):
            raise FieldFormatError("序列包含非有限值。")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_fields(
        cls, fields: Sequence[EquiangularField], *, n_ensembles: int = 1
    ) -> "FieldSeries":
        """由按 (r, t) 顺序排列的场构造序列。"""
        if not fields:
            raise FieldFormatError("空的场列表。")
        spec = fields[0].spec
        if any(f.spec != spec for f in fields):
            raise FieldFormatError("序列中的场网格不一致。")
        if len(fields) % n_ensembles:
            raise FieldFormatError(
                f"场的数量 {len(fields)} 不能被集合数 {n_ensembles} 整除。"
            )
        stacked = np.stack([f.values for f in fields]).reshape(
            n_ensembles, -1, *spec.shape
        )
        return cls(spec=spec, values=stacked, t_start=fields[0].time_index)

    @property
    def R(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def field(self, r: int, t: int) -> EquiangularField:
        """按 0 起始的下标取出单个场。"""
        return EquiangularField(
            spec=self.spec,
            values=self.values[r, t],
            time_index=self.t_start + t,
            ensemble_index=r + 1,
        )

    @property
    def fields(self) -> List[EquiangularField]:
        return list(self)

    def __iter__(self) -> Iterator[EquiangularField]:
        for r in range(self.R):
            for t in range(self.T):
                yield self.field(r, t)


def load_field_series(path: Path) -> FieldSeries:
    """读取 SPHF 容器；头部、形状或数值不合法时报错，不做任何隐式重排。"""
    path = Path(path)
    try:
        header, payload = read_container(path, FIELD_MAGIC, FIELD_LAYOUT)
    except ContainerFormatError as exc:
        raise FieldFormatError(str(exc)) from exc
    if header["version"] != FIELD_VERSION:
        raise FieldFormatError(
            f"{path.name}: 不支持的版本 {header['version']}，期望 {FIELD_VERSION}。"
        )
    if header["T"] < 1 or header["R"] < 1:
        raise FieldFormatError(f"{path.name}: T 与 R 必须至少为 1。")
    spec = GridSpec(
        n_theta=header["n_theta"], n_phi=header["n_phi"], band_limit=header["band_limit"]
    )
    count = header["R"] * header["T"] * spec.point_count
    try:
        expect_count(payload, count, path.name)
    except ContainerFormatError as exc:
        raise FieldFormatError(str(exc)) from exc
    if not np.all(np.isfinite(payload)):
        bad = int(np.count_nonzero(~np.isfinite(payload)))
        raise FieldFormatError(f"{path.name}: 包含 {bad} 个非有限值。")
    values = payload.reshape(header["R"], header["T"], spec.n_theta, spec.n_phi)
    logger.debug(
        f"已读取 {path.name}: 网格 {spec.shape}, L={spec.band_limit}, "
        f"T={header['T']}, R={header['R']}"
    )
    return FieldSeries(spec=spec, values=values)


def save_field_series(series: FieldSeries, path: Path) -> None:
    header = {
        "version": FIELD_VERSION,
        "n_theta": series.spec.n_theta,
        "n_phi": series.spec.n_phi,
        "band_limit": series.spec.band_limit,
        "T": series.T,
        "R": series.R,
    }
    write_container(Path(path), FIELD_MAGIC, FIELD_LAYOUT, header, series.values)


def export_csv(series: FieldSeries, path: Path, *, t: int = 0, r: int = 0) -> None:
    """把一个时间切片导出为 (theta, phi, value) 行。"""
    spec = series.spec
    theta_grid, phi_grid = np.meshgrid(spec.thetas, spec.phis, indexing="ij")
    rows = np.column_stack(
        [theta_grid.ravel(), phi_grid.ravel(), series.values[r, t].ravel()]
    )
    np.savetxt(
        Path(path), rows, delimiter=",", header="theta,phi,value", comments="", fmt="%.17g"
    )


def clenshaw_curtis_weights(n_theta: int) -> np.ndarray:
    """θ 方向含两极等角节点上的 Clenshaw–Curtis 权重，积分 ∫₀^π g(θ) sinθ dθ。"""
    if n_theta < 2:
        raise ValueError("Clenshaw–Curtis 权重至少需要 2 个节点。")
    n = n_theta - 1
    thetas = np.pi * np.arange(n_theta) / n
    j = np.arange(1, n // 2 + 1)
    b = np.where(2 * j == n, 1.0, 2.0)
    weights = 1.0 - (b / (4.0 * j**2 - 1.0)) @ np.cos(2.0 * np.outer(j, thetas))
    c = np.full(n_theta, 2.0)
    c[0] = c[-1] = 1.0
    return c * weights / n


def quadrature_weights(spec: GridSpec) -> np.ndarray:
    """每条纬度环上单点的面积权重（θ 用 Clenshaw–Curtis，φ 均匀）。"""
    return clenshaw_curtis_weights(spec.n_theta) * (2.0 * np.pi / spec.n_phi)


def sine_moments(q: np.ndarray) -> np.ndarray:
    """逐元素计算 ∫₀^π e^{iqθ} sinθ dθ。"""
    q = np.asarray(q)
    out = np.zeros(q.shape, dtype=np.complex128)
    even = q % 2 == 0
    out[even] = 2.0 / (1.0 - q[even].astype(np.float64) ** 2)
    unit = np.abs(q) == 1
    out[unit] = 1j * q[unit] * np.pi / 2.0
    return out


def field_energy(field: EquiangularField) -> float:
    """∫ Z² dΩ；对带限为 L 的场在任意可采纳网格上精确。

    每个方位频率 m 的 θ 剖面沿 θ → 2π−θ 延拓为整圆上次数 < L 的三角多项式，
    再与 sinθ 的矩相乘求和。
    """
    spec = field.spec
    L = spec.band_limit
    n = spec.n_theta - 1
    orders = np.arange(-(L - 1), L)
    profiles = np.fft.fft(field.values, axis=1)[:, orders % spec.n_phi] / spec.n_phi
    parity = np.where(orders % 2, -1.0, 1.0)
    extended = np.vstack([profiles, profiles[n - 1 : 0 : -1] * parity[None, :]])
    fourier = np.fft.fft(extended, axis=0)[orders % (2 * n)] / (2 * n)
    coupling = sine_moments(orders[:, None] - orders[None, :])
    energy = np.einsum("km,kj,jm->", fourier, coupling, fourier.conj())
    return float(2.0 * np.pi * energy.real)


@dataclass(frozen=True)
class ResolutionRow:
    band_limit: int
    degrees: float
    km: float
    exact_points: int
    points_millions: float


def resolution_row(band_limit: int) -> ResolutionRow:
    """带限对应的空间分辨率与格点数；points_millions 采用表格中的 2L² 近似。"""
    L = int(band_limit)
    return ResolutionRow(
        band_limit=L,
        degrees=180.0 / L,
        km=180.0 * KM_PER_DEGREE / L,
        exact_points=(L - 1) * 2 * L,
        points_millions=2.0 * L * L / 1e6,
    )


def resolution_table(band_limits: Sequence[int] = (720, 1440, 2880, 5760)) -> List[ResolutionRow]:
    return [resolution_row(L) for L in band_limits]


def draw_coefficients(band_limit: int, seed: int) -> np.ndarray:
    """由种子确定地抽取 L² 个实系数。"""
    return box_muller(make_generator(seed), band_limit * band_limit)


def synth_bandlimited(
    spec: GridSpec, seed: int, coeffs: Optional[np.ndarray] = None
) -> EquiangularField:
    """对伪随机（或给定）系数做逆变换，得到在 L 处严格带限的场。"""
    import sht  # 延迟导入，sht 依赖本模块的网格类型

    if coeffs is None:
        coeffs = draw_coefficients(spec.band_limit, seed)
    plan = sht.plan_for(spec)
    return sht.inverse_sht(plan, sht.HarmonicVector(spec.band_limit, coeffs))


def upsample_spline(series: FieldSeries, target_spec: GridSpec) -> FieldSeries:
    """逐时间切片做双三次样条插值：φ 方向周期边界，θ 方向 not-a-knot 边界。"""
    source = series.spec
    if target_spec.n_theta < source.n_theta or target_spec.n_phi < source.n_phi:
        raise ValueError(
            f"不支持降采样: 源网格 {source.shape}，目标网格 {target_spec.shape}。"
        )
    if target_spec.band_limit < source.band_limit:
        raise ValueError(
            f"目标带限 {target_spec.band_limit} 小于源带限 {source.band_limit}。"
        )
    if source.n_theta < 2:
        raise ValueError("θ 方向至少需要 2 条纬度环才能插值。")

    values = series.values
    phi_ext = np.append(source.phis, 2.0 * np.pi)
    wrapped = np.concatenate([values, values[..., :1]], axis=-1)
    along_phi = CubicSpline(phi_ext, wrapped, axis=-1, bc_type="periodic")(
        target_spec.phis
    )
    bc_theta = "not-a-knot" if source.n_theta >= 4 else "natural"
    upsampled = CubicSpline(source.thetas, along_phi, axis=-2, bc_type=bc_theta)(
        target_spec.thetas
    )
    logger.info(
        f"样条上采样完成: {source.shape} → {target_spec.shape}，"
        f"共 {series.R * series.T} 个切片。"
    )
    return FieldSeries(spec=target_spec, values=upsampled, t_start=series.t_start)

