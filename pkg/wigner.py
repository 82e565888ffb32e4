"""
Wigner-d 函数在 π/2 处的递推计算、压缩存储与 S（Q）耦合张量。

只保存 m, m″ ≥ 0 的象限：行按 (ℓ, m) 以 m 为主序排列，列为 m″，
负阶通过对称关系重建。
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import gammaln

from config import logger
from storage import ContainerFormatError, expect_count, read_container, write_container

WIGNER_MAGIC = b"WIGD"
WIGNER_VERSION = 1
WIGNER_LAYOUT = (("version", "I"), ("band_limit", "I"))

MAX_BRUTE_FORCE_DEGREE = 12
RENORM_TOLERANCE = 1e-9

# i^{−m}，按 m mod 4 取值
_PHASE_TABLE = np.array([1.0, -1.0j, -1.0, 1.0j])


def row_index(band_limit: int, l, m):
    """压缩表中 (ℓ, m) 的行号；固定 m 时 ℓ = m..L−1 连续存放。"""
    return m * band_limit - (m * (m - 1)) // 2 + (l - m)


def compressed_row_count(band_limit: int) -> int:
    return (band_limit * band_limit + band_limit) // 2


def estimate_table_bytes(band_limit: int) -> int:
    """d 表与 S 表合计的字节数。"""
    return 2 * compressed_row_count(band_limit) * band_limit * 8


def phase(m: int) -> complex:
    return complex(_PHASE_TABLE[m % 4])


@dataclass(frozen=True)
class WignerTables:
    band_limit: int
    d_half_pi: np.ndarray
    s_table: np.ndarray
    renormalized_columns: int = 0
    phases: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "phases", _PHASE_TABLE[np.arange(self.band_limit) % 4])
        for array in (self.d_half_pi, self.s_table):
            array.setflags(write=False)

    @property
    def entry_count(self) -> int:
        return self.d_half_pi.size

    def block_slice(self, m: int) -> slice:
        start = row_index(self.band_limit, m, m)
        return slice(start, start + self.band_limit - m)

    def s_block(self, m: int) -> np.ndarray:
        """固定 m 的 S 块，形状 (L−m, L)，行对应 ℓ = m..L−1，列为 m″。"""
        return self.s_table[self.block_slice(m)]


def _seed_magnitudes(j: int, k: np.ndarray) -> np.ndarray:
    """2^{−j}·sqrt(C(2j, j+k))，用对数伽马避免溢出。"""
    log_value = 0.5 * (
        gammaln(2 * j + 1) - gammaln(j + k + 1) - gammaln(j - k + 1)
    ) - j * math.log(2.0)
    return np.exp(log_value)


def _check_band_limit(band_limit: int, memory_cap_mb: Optional[int]) -> int:
    if not isinstance(band_limit, (int, np.integer)) or band_limit < 1:
        raise ValueError(f"带限必须是正整数，实际为 {band_limit!r}。")
    band_limit = int(band_limit)
    if memory_cap_mb is not None:
        needed = estimate_table_bytes(band_limit)
        if needed > memory_cap_mb * 1024 * 1024:
            raise MemoryError(
                f"L={band_limit} 的 Wigner 表约需 {needed / 2**20:.1f} MiB，"
                f"超过上限 {memory_cap_mb} MiB。"
            )
    return band_limit


def _s_from_d(band_limit: int, d_half_pi: np.ndarray) -> np.ndarray:
    L = band_limit
    s_table = np.zeros_like(d_half_pi)
    for l in range(L):
        rows = row_index(L, l, np.arange(l + 1))
        c_l = math.sqrt((2 * l + 1) / (4.0 * math.pi))
        d_m0 = d_half_pi[row_index(L, l, 0)]
        s_table[rows] = c_l * d_m0[None, :] * d_half_pi[rows]
    return s_table


def build_wigner_tables(
    band_limit: int, *, memory_cap_mb: Optional[int] = None
) -> WignerTables:
    """沿 ℓ 的三项递推计算 d^ℓ_{m″,m}(π/2)，所有 (m″, m) 链一起向量化推进。"""
    L = _check_band_limit(band_limit, memory_cap_mb)
    orders = np.arange(L, dtype=np.float64)
    m2 = orders[:, None]
    m = orders[None, :]
    start = np.maximum(m2, m)
    m2_grid, m_grid = np.broadcast_arrays(m2, m)
    d_half_pi = np.zeros((compressed_row_count(L), L))

    prev = np.zeros((L, L))
    curr = np.zeros((L, L))
    renormalized = 0
    for l in range(L):
        new = np.zeros((L, L))
        if l == 0:
            new[0, 0] = 1.0
        else:
            j = l - 1
            if j > 0:
                mask = start < l
                mm, mm2 = m_grid[mask], m2_grid[mask]
                num = (2 * j + 1) * mm * mm2 * curr[mask] + (j + 1) * np.sqrt(
                    np.clip((j * j - mm * mm) * (j * j - mm2 * mm2), 0.0, None)
                ) * prev[mask]
                den = j * np.sqrt(((j + 1) ** 2 - mm * mm) * ((j + 1) ** 2 - mm2 * mm2))
                new[mask] = -num / den
            # d^1_{0,0}(π/2) = cos(π/2) = 0，保持为零
            seeds = _seed_magnitudes(l, np.arange(l + 1))
            signs = np.where((l - np.arange(l + 1)) % 2, -1.0, 1.0)
            new[l, : l + 1] = signs * seeds
            new[:l, l] = seeds[:l]

        bad = np.abs(new) > 1.0 + RENORM_TOLERANCE
        if np.any(bad):
            columns = np.unique(np.nonzero(bad)[1])
            norms = np.sqrt(
                new[0, columns] ** 2 + 2.0 * np.sum(new[1:, columns] ** 2, axis=0)
            )
            new[:, columns] /= norms
            renormalized += len(columns)
            logger.warning(
                f"Wigner 递推在 ℓ={l} 处出现 |d|>1，已按正交归一化重整 {len(columns)} 列。"
            )

        rows = row_index(L, l, np.arange(l + 1))
        d_half_pi[rows] = new[:, : l + 1].T
        prev, curr = curr, new

    s_table = _s_from_d(L, d_half_pi)
    logger.debug(f"已构建 L={L} 的 Wigner 表，共 {d_half_pi.size} 个压缩条目。")
    return WignerTables(
        band_limit=L,
        d_half_pi=d_half_pi,
        s_table=s_table,
        renormalized_columns=renormalized,
    )


def _check_indices(band_limit: int, l: int, m2: int, m: int) -> None:
    if not 0 <= l < band_limit:
        raise ValueError(f"阶数 ℓ={l} 超出范围 [0, {band_limit - 1}]。")
    if abs(m) > l or abs(m2) > l:
        raise ValueError(f"次数 (m″={m2}, m={m}) 超出 |·| ≤ ℓ={l} 的范围。")


def d_value(tables: WignerTables, l: int, m2: int, m: int) -> float:
    """任意符号的 d^ℓ_{m″,m}(π/2)，负阶由对称关系重建。"""
    _check_indices(tables.band_limit, l, m2, m)
    value = tables.d_half_pi[row_index(tables.band_limit, l, abs(m)), abs(m2)]
    if m < 0:
        value *= -1.0 if (l + abs(m2)) % 2 else 1.0
    if m2 < 0:
        value *= -1.0 if (l + abs(m)) % 2 else 1.0
    return float(value)


def wigner_matrix(tables: WignerTables, l: int) -> np.ndarray:
    """完整的 (2ℓ+1)×(2ℓ+1) 矩阵，下标为 [m″+ℓ, m+ℓ]。"""
    if not 0 <= l < tables.band_limit:
        raise ValueError(f"阶数 ℓ={l} 超出范围 [0, {tables.band_limit - 1}]。")
    orders = np.arange(-l, l + 1)
    a = np.abs(orders)[:, None]
    b = np.abs(orders)[None, :]
    base = tables.d_half_pi[row_index(tables.band_limit, l, b), a]
    sign = np.ones_like(base)
    sign *= np.where((orders[None, :] < 0) & ((l + a) % 2 == 1), -1.0, 1.0)
    sign *= np.where((orders[:, None] < 0) & ((l + b) % 2 == 1), -1.0, 1.0)
    return base * sign


def q_lookup(tables: WignerTables, l: int, m: int, m2: int) -> complex:
    """Q_{ℓ,m,m″} = i^{−m}·sqrt((2ℓ+1)/4π)·d^ℓ_{m″,0}(π/2)·d^ℓ_{m″,m}(π/2)。"""
    if abs(m) >= tables.band_limit or abs(m2) >= tables.band_limit:
        raise ValueError(f"次数 (m={m}, m″={m2}) 超出带限 {tables.band_limit}。")
    _check_indices(tables.band_limit, l, m2, m)
    c_l = math.sqrt((2 * l + 1) / (4.0 * math.pi))
    return phase(m) * c_l * d_value(tables, l, m2, 0) * d_value(tables, l, m2, m)


def wigner_brute_force(l: int, m2: int, m: int) -> float:
    """显式阶乘求和公式在 θ=π/2 处的值，求和部分用有理数精确计算。"""
    for name, value in (("l", l), ("m2", m2), ("m", m)):
        if not isinstance(value, (int, np.integer)):
            raise ValueError(f"{name} 必须是整数，实际为 {value!r}。")
    if not 0 <= l <= MAX_BRUTE_FORCE_DEGREE:
        raise ValueError(f"ℓ={l} 超出参考公式支持的范围 [0, {MAX_BRUTE_FORCE_DEGREE}]。")
    if abs(m) > l or abs(m2) > l:
        raise ValueError(f"次数 (m″={m2}, m={m}) 超出 |·| ≤ ℓ={l} 的范围。")

    fact = math.factorial
    total = Fraction(0)
    for s in range(max(0, m - m2), min(l + m, l - m2) + 1):
        sign = -1 if (m2 - m + s) % 2 else 1
        total += Fraction(
            sign, fact(l + m - s) * fact(s) * fact(m2 - m + s) * fact(l - m2 - s)
        )
    norm = math.sqrt(fact(l + m2) * fact(l - m2) * fact(l + m) * fact(l - m))
    return float(total) * norm / 2.0**l


def cache_path(cache_dir: Path, band_limit: int) -> Path:
    return Path(cache_dir) / f"wigner_L{band_limit}.wigd"


def save_tables(tables: WignerTables, path: Path) -> None:
    header = {"version": WIGNER_VERSION, "band_limit": tables.band_limit}
    write_container(path, WIGNER_MAGIC, WIGNER_LAYOUT, header, tables.d_half_pi)


def load_tables(path: Path) -> WignerTables:
    path = Path(path)
    header, payload = read_container(path, WIGNER_MAGIC, WIGNER_LAYOUT)
    if header["version"] != WIGNER_VERSION:
        raise ContainerFormatError(f"{path.name}: 不支持的版本 {header['version']}。")
    L = header["band_limit"]
    if L < 1:
        raise ContainerFormatError(f"{path.name}: 带限必须为正。")
    expect_count(payload, compressed_row_count(L) * L, path.name)
    d_half_pi = payload.reshape(compressed_row_count(L), L)
    return WignerTables(band_limit=L, d_half_pi=d_half_pi, s_table=_s_from_d(L, d_half_pi))


def load_or_build_tables(
    band_limit: int,
    cache_dir: Optional[Path] = None,
    *,
    memory_cap_mb: Optional[int] = None,
) -> WignerTables:
    """优先读取磁盘缓存，缺失或损坏时重新计算并写回。"""
    band_limit = _check_band_limit(band_limit, memory_cap_mb)
    if cache_dir is None:
        return build_wigner_tables(band_limit)
    path = cache_path(cache_dir, band_limit)
    if path.exists():
        try:
            tables = load_tables(path)
        except (ContainerFormatError, OSError) as exc:
            logger.warning(f"Wigner 缓存 {path.name} 无法使用 ({exc})，将重新计算。")
        else:
            if tables.band_limit == band_limit:
                logger.debug(f"已从缓存 {path} 加载 Wigner 表。")
                return tables
            logger.warning(f"Wigner 缓存 {path.name} 的带限不匹配，将重新计算。")
    tables = build_wigner_tables(band_limit)
    _write_cache(tables, path)
    return tables


def ensure_cached(tables: WignerTables, cache_dir: Optional[Path]) -> None:
    """已在内存中的表在缓存目录里缺失时补写一份。"""
    if cache_dir is None:
        return
    path = cache_path(cache_dir, tables.band_limit)
    if not path.exists():
        _write_cache(tables, path)


def _write_cache(tables: WignerTables, path: Path) -> None:
    try:
        save_tables(tables, path)
        logger.info(f"Wigner 表已缓存到 {path}")
    except OSError as exc:
        logger.warning(f"写入 Wigner 缓存 {path} 失败: {exc}")
