"""
分块混合精度 Cholesky 分解。

矩阵按 b×b 分块，每块带有存储精度（DP/SP/HP）；计算内核先把操作数升到 DP，
计算完成后再按目标块的精度回写。任务之间的依赖构成 DAG，由线程池按优先级调度。
"""

import heapq
import math
import threading
import time
from collections import deque
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from config import CONVERSION_SITES, PRECISION_VARIANTS, logger
from sampling import box_muller, make_generator

HP_MAX = float(np.finfo(np.float16).max)

TileIndex = Tuple[int, int]


class Precision(str, Enum):
    DP = "dp"
    SP = "sp"
    HP = "hp"

    @property
    def dtype(self) -> np.dtype:
        return _DTYPES[self]


_DTYPES = {
    Precision.DP: np.dtype(np.float64),
    Precision.SP: np.dtype(np.float32),
    Precision.HP: np.dtype(np.float16),
}


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """POTRF 在某个对角块上遇到非正主元。"""

    def __init__(self, message: str, *, tile: TileIndex):
        super().__init__(message)
        self.tile = tile


@dataclass(frozen=True)
class PrecisionMap:
    variant: str = "dp"
    band_width_dp: int = 1
    sp_fraction: float = 0.05

    def __post_init__(self) -> None:
        variant = str(self.variant).strip().lower().replace("/", "")
        if variant not in PRECISION_VARIANTS:
            raise ValueError(
                f"未知的精度方案 '{self.variant}'，可选值为 {list(PRECISION_VARIANTS)}。"
            )
        if self.band_width_dp < 1:
            raise ValueError(f"band_width_dp 必须 ≥ 1，实际为 {self.band_width_dp}。")
        if not 0.0 <= self.sp_fraction <= 1.0:
            raise ValueError(f"sp_fraction 必须位于 [0, 1]，实际为 {self.sp_fraction}。")
        object.__setattr__(self, "variant", variant)

    @classmethod
    def from_settings(cls, settings: Dict) -> "PrecisionMap":
        return cls(
            variant=settings["precision_variant"],
            band_width_dp=settings["band_width_dp"],
            sp_fraction=settings["sp_fraction"],
        )


def assign_precisions(n_tiles: int, pmap: PrecisionMap) -> Dict[TileIndex, Precision]:
    """下三角各块 (i, j) 的存储精度。"""
    if n_tiles < 1:
        raise ValueError(f"块数必须 ≥ 1，实际为 {n_tiles}。")
    grid: Dict[TileIndex, Precision] = {}
    off_band: List[TileIndex] = []
    for i in range(n_tiles):
        for j in range(i + 1):
            if pmap.variant == "dp" or i - j < pmap.band_width_dp:
                grid[(i, j)] = Precision.DP
            else:
                off_band.append((i, j))

    if pmap.variant == "dpsp":
        grid.update({tile: Precision.SP for tile in off_band})
    elif pmap.variant == "dphp":
        grid.update({tile: Precision.HP for tile in off_band})
    elif pmap.variant == "dpsphp":
        # 离对角带最近的先取 SP，距离相同时行号小者优先
        off_band.sort(key=lambda tile: (tile[0] - tile[1], tile[0]))
        sp_count = math.ceil(pmap.sp_fraction * len(off_band) - 1e-9)
        for rank, tile in enumerate(off_band):
            grid[tile] = Precision.SP if rank < sp_count else Precision.HP
    return grid


class ConversionCounter:
    """精度转换与 HP 饱和计数，多线程安全。"""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.conversions = 0
        self.saturations = 0
        self.by_site: Dict[str, int] = {site: 0 for site in CONVERSION_SITES}

    def record(self, *, site: Optional[str], saturated: int) -> None:
        with self._lock:
            self.conversions += 1
            self.saturations += saturated
            if site in self.by_site:
                self.by_site[site] += 1


def convert_tile(
    tile: np.ndarray,
    from_precision: Precision,
    to_precision: Precision,
    site: Optional[str] = None,
    *,
    counter: Optional[ConversionCounter] = None,
) -> np.ndarray:
    """块的精度转换：变窄时就近舍入到偶数，变宽是精确的；HP 溢出饱和到 ±65504。"""
    from_precision = Precision(from_precision)
    to_precision = Precision(to_precision)
    if site is not None and site not in CONVERSION_SITES:
        raise ValueError(f"未知的转换位置 '{site}'。")
    if from_precision == to_precision:
        return tile
    source = np.asarray(tile, dtype=from_precision.dtype)
    saturated = 0
    if to_precision == Precision.HP:
        overflow = np.abs(source) > HP_MAX
        saturated = int(np.count_nonzero(overflow))
        if saturated:
            source = np.clip(source, -HP_MAX, HP_MAX)
            logger.warning(f"HP 转换中有 {saturated} 个值超出范围，已饱和到 ±{HP_MAX:g}。")
    converted = source.astype(to_precision.dtype)
    if counter is not None:
        counter.record(site=site, saturated=saturated)
    return converted


class TiledMatrix:
    """对称矩阵的下三角分块存储，对角块总是 DP。"""

    def __init__(
        self,
        n: int,
        tile_size: int,
        tiles: Dict[TileIndex, np.ndarray],
        precisions: Dict[TileIndex, Precision],
    ):
        self.n = n
        self.tile_size = tile_size
        self.tiles = tiles
        self.precisions = precisions
        self.run: Optional["CholeskyRun"] = None

    @property
    def n_tiles(self) -> int:
        return -(-self.n // self.tile_size)

    def tile_bounds(self, index: int) -> slice:
        start = index * self.tile_size
        return slice(start, min(start + self.tile_size, self.n))

    @classmethod
    def from_dense(
        cls,
        matrix: np.ndarray,
        tile_size: int,
        pmap: Optional[PrecisionMap] = None,
        *,
        counter: Optional[ConversionCounter] = None,
    ) -> "TiledMatrix":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise ValueError(f"需要方阵，实际形状为 {matrix.shape}。")
        if tile_size < 1:
            raise ValueError(f"块大小必须为正，实际为 {tile_size}。")
        n = matrix.shape[0]
        tiled = cls(n, tile_size, {}, {})
        precisions = assign_precisions(tiled.n_tiles, pmap or PrecisionMap())
        for (i, j), precision in precisions.items():
            block = matrix[tiled.tile_bounds(i), tiled.tile_bounds(j)].copy()
            tiled.tiles[(i, j)] = convert_tile(block, Precision.DP, precision, counter=counter)
            tiled.precisions[(i, j)] = precision
        return tiled

    def to_dense(self, *, symmetric: bool = False) -> np.ndarray:
        """按 DP 还原为稠密矩阵；symmetric=False 时只填下三角块。"""
        dense = np.zeros((self.n, self.n))
        for (i, j), tile in self.tiles.items():
            rows, cols = self.tile_bounds(i), self.tile_bounds(j)
            dense[rows, cols] = tile.astype(np.float64)
            if symmetric and i != j:
                dense[cols, rows] = dense[rows, cols].T
        return dense

    def apply_precisions(
        self, precisions: Dict[TileIndex, Precision], counter: Optional[ConversionCounter] = None
    ) -> None:
        for index, precision in precisions.items():
            current = self.precisions[index]
            if current != precision:
                self.tiles[index] = convert_tile(
                    self.tiles[index], current, precision, counter=counter
                )
                self.precisions[index] = precision

    def storage_bytes(self) -> int:
        return sum(tile.size * tile.itemsize for tile in self.tiles.values())

    def dp_storage_bytes(self) -> int:
        return sum(tile.size * 8 for tile in self.tiles.values())

    def precision_counts(self) -> Dict[str, int]:
        counts = {precision.value: 0 for precision in Precision}
        for precision in self.precisions.values():
            counts[precision.value] += 1
        return counts


class Task(NamedTuple):
    kind: str
    k: int
    i: int = 0
    j: int = 0

    def __str__(self) -> str:
        if self.kind == "POTRF":
            return f"POTRF({self.k})"
        if self.kind == "GEMM":
            return f"GEMM({self.i},{self.j},{self.k})"
        return f"{self.kind}({self.i},{self.k})"

    @property
    def priority(self) -> Tuple[int, int, int, int]:
        """同一步 k 内按 POTRF > TRSM > SYRK > GEMM 的顺序偏向关键路径。"""
        return (self.k, _KIND_RANK[self.kind], self.i, self.j)


_KIND_RANK = {"POTRF": 0, "TRSM": 1, "SYRK": 2, "GEMM": 3}


@dataclass
class TaskGraph:
    n_tiles: int
    nodes: List[Task] = field(default_factory=list)
    predecessors: Dict[Task, List[Task]] = field(default_factory=dict)
    successors: Dict[Task, List[Task]] = field(default_factory=dict)

    def add(self, task: Task, *depends_on: Task) -> None:
        self.nodes.append(task)
        self.predecessors[task] = list(depends_on)
        self.successors.setdefault(task, [])
        for parent in depends_on:
            self.successors.setdefault(parent, []).append(task)

    @property
    def edge_count(self) -> int:
        return sum(len(parents) for parents in self.predecessors.values())

    def kind_counts(self) -> Dict[str, int]:
        counts = {kind: 0 for kind in _KIND_RANK}
        for task in self.nodes:
            counts[task.kind] += 1
        return counts


def build_task_graph(n_tiles: int) -> TaskGraph:
    """右视（right-looking）分块 Cholesky 的任务图。"""
    if n_tiles < 1:
        raise ValueError(f"块数必须 ≥ 1，实际为 {n_tiles}。")
    graph = TaskGraph(n_tiles=n_tiles)
    for k in range(n_tiles):
        potrf = Task("POTRF", k)
        graph.add(potrf, *([Task("SYRK", k - 1, k)] if k > 0 else []))
        for i in range(k + 1, n_tiles):
            deps = [potrf] + ([Task("GEMM", k - 1, i, k)] if k > 0 else [])
            graph.add(Task("TRSM", k, i), *deps)
        for i in range(k + 1, n_tiles):
            deps = [Task("TRSM", k, i)] + ([Task("SYRK", k - 1, i)] if k > 0 else [])
            graph.add(Task("SYRK", k, i), *deps)
            for j in range(k + 1, i):
                deps = [Task("TRSM", k, i), Task("TRSM", k, j)]
                if k > 0:
                    deps.append(Task("GEMM", k - 1, i, j))
                graph.add(Task("GEMM", k, i, j), *deps)
    return graph


def topological_order(graph: TaskGraph) -> List[Task]:
    """卡恩算法；存在环时抛出 ValueError。"""
    in_degree = {task: len(graph.predecessors[task]) for task in graph.nodes}
    queue = deque(task for task in graph.nodes if in_degree[task] == 0)
    order: List[Task] = []
    while queue:
        task = queue.popleft()
        order.append(task)
        for child in graph.successors.get(task, []):
            in_degree[child] -= 1
            if in_degree[child] == 0:
                queue.append(child)
    if len(order) != len(graph.nodes):
        done = set(order)
        stuck = ", ".join(str(task) for task in graph.nodes if task not in done)
        raise ValueError(f"任务图中检测到循环依赖，涉及任务: {stuck}")
    return order


class TaskScheduler:
    """按优先级把就绪任务提交给线程池；只有就绪队列需要加锁（由主线程独占）。"""

    def __init__(self, graph: TaskGraph, workers: int = 1, *, logger=logger):
        self.graph = graph
        self.workers = max(1, int(workers))
        self._logger = logger

    def run(self, execute: Callable[[Task], None]) -> List[Task]:
        graph = self.graph
        remaining = {task: len(graph.predecessors[task]) for task in graph.nodes}
        ready: List[Tuple[Tuple[int, int, int, int], Task]] = []
        for task in graph.nodes:
            if remaining[task] == 0:
                heapq.heappush(ready, (task.priority, task))
        completed: set = set()
        order: List[Task] = []

        def finish(task: Task) -> None:
            completed.add(task)
            order.append(task)
            for child in graph.successors.get(task, []):
                remaining[child] -= 1
                if remaining[child] == 0:
                    heapq.heappush(ready, (child.priority, child))

        def check_legal(task: Task) -> None:
            missing = [p for p in graph.predecessors[task] if p not in completed]
            assert not missing, f"{task} 在依赖 {missing} 完成前被调度"

        if self.workers == 1:
            while ready:
                _, task = heapq.heappop(ready)
                check_legal(task)
                execute(task)
                finish(task)
        else:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                running: Dict[Future, Task] = {}
                try:
                    while ready or running:
                        while ready and len(running) < self.workers:
                            _, task = heapq.heappop(ready)
                            check_legal(task)
                            running[executor.submit(execute, task)] = task
                        done, _ = wait(list(running), return_when=FIRST_COMPLETED)
                        for future in sorted(done, key=lambda f: running[f].priority):
                            task = running.pop(future)
                            future.result()
                            finish(task)
                except BaseException:
                    for future in running:
                        future.cancel()
                    raise

        if len(order) != len(graph.nodes):
            raise RuntimeError("调度结束时仍有任务未执行，任务图可能存在环。")
        self._logger.debug(f"任务图执行完毕: {len(order)} 个任务, {self.workers} 个工作线程")
        return order


@dataclass
class CholeskyRun:
    precision_map: PrecisionMap
    workers: int
    conversion_site: str
    kernel_counts: Dict[str, int]
    conversions: int
    saturations: int
    wall_clock: float
    order: List[Task] = field(repr=False, default_factory=list)


class _Factorization:
    """执行各计算内核。发送端转换时每个生产者的输出只升精度一次并缓存。"""

    def __init__(self, matrix: TiledMatrix, site: str, counter: ConversionCounter):
        self.matrix = matrix
        self.site = site
        self.counter = counter
        self._wide: Dict[TileIndex, np.ndarray] = {}
        self._lock = threading.Lock()
        self.kernel_counts = {kind.lower(): 0 for kind in _KIND_RANK}

    def _operand(self, index: TileIndex) -> np.ndarray:
        precision = self.matrix.precisions[index]
        if precision == Precision.DP:
            return self.matrix.tiles[index]
        if self.site == "sender":
            return self._wide[index]
        return convert_tile(
            self.matrix.tiles[index], precision, Precision.DP, "receiver", counter=self.counter
        )

    def _target(self, index: TileIndex) -> np.ndarray:
        precision = self.matrix.precisions[index]
        return convert_tile(self.matrix.tiles[index], precision, Precision.DP, counter=self.counter)

    def _store(self, index: TileIndex, value: np.ndarray, *, publish: bool = False) -> None:
        precision = self.matrix.precisions[index]
        stored = convert_tile(value, Precision.DP, precision, counter=self.counter)
        self.matrix.tiles[index] = stored
        if publish and self.site == "sender" and precision != Precision.DP:
            self._wide[index] = convert_tile(
                stored, precision, Precision.DP, "sender", counter=self.counter
            )

    def __call__(self, task: Task) -> None:
        k, i, j = task.k, task.i, task.j
        if task.kind == "POTRF":
            try:
                factor = cholesky(self.matrix.tiles[(k, k)], lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefiniteError(
                    f"对角块 ({k}, {k}) 非正定: {exc}", tile=(k, k)
                ) from exc
            self._store((k, k), factor)
        elif task.kind == "TRSM":
            solved = solve_triangular(
                self._operand((k, k)), self._target((i, k)).T, lower=True, check_finite=False
            ).T
            self._store((i, k), solved, publish=True)
        elif task.kind == "SYRK":
            panel = self._operand((i, k))
            self._store((i, i), self._target((i, i)) - panel @ panel.T)
        else:
            update = self._operand((i, k)) @ self._operand((j, k)).T
            self._store((i, j), self._target((i, j)) - update)
        with self._lock:
            self.kernel_counts[task.kind.lower()] += 1


def tiled_cholesky(
    matrix: TiledMatrix,
    pmap: PrecisionMap,
    workers: int = 1,
    *,
    conversion_site: str = "sender",
) -> TiledMatrix:
    """原地分解为下三角因子 L（A = LLᵀ），运行信息记录在返回矩阵的 run 属性上。"""
    if conversion_site not in CONVERSION_SITES:
        raise ValueError(f"未知的转换位置 '{conversion_site}'。")
    if matrix.tile_size < 8 and matrix.n > matrix.tile_size:
        raise ValueError(f"块大小必须 ≥ 8，实际为 {matrix.tile_size}。")
    expected = {(i, j) for i in range(matrix.n_tiles) for j in range(i + 1)}
    if set(matrix.tiles) != expected:
        raise ValueError("分块布局与矩阵维度不一致。")

    counter = ConversionCounter()
    matrix.apply_precisions(assign_precisions(matrix.n_tiles, pmap), counter)
    graph = build_task_graph(matrix.n_tiles)
    kernels = _Factorization(matrix, conversion_site, counter)
    started = time.perf_counter()
    order = TaskScheduler(graph, workers).run(kernels)
    elapsed = time.perf_counter() - started

    for (i, j), tile in matrix.tiles.items():
        if i == j:
            matrix.tiles[(i, j)] = np.tril(tile)
    matrix.run = CholeskyRun(
        precision_map=pmap,
        workers=int(workers),
        conversion_site=conversion_site,
        kernel_counts=kernels.kernel_counts,
        conversions=counter.conversions,
        saturations=counter.saturations,
        wall_clock=elapsed,
        order=order,
    )
    logger.debug(
        f"分块 Cholesky 完成: n={matrix.n}, b={matrix.tile_size}, 方案={pmap.variant}, "
        f"耗时 {elapsed:.3f}s"
    )
    return matrix


@dataclass
class FactorizationReport:
    n: int
    tile_size: int
    n_tiles: int
    variant: str
    band_width_dp: int
    sp_fraction: float
    conversion_site: str
    workers: int
    tiles_dp: int
    tiles_sp: int
    tiles_hp: int
    storage_bytes: int
    dp_storage_bytes: int
    bytes_saved: int
    saved_fraction: float
    kernels_potrf: int
    kernels_trsm: int
    kernels_syrk: int
    kernels_gemm: int
    conversions: int
    hp_saturations: int
    wall_clock_s: float
    relative_residual: Optional[float] = None

    def to_dict(self, *, include_timing: bool = True) -> Dict:
        data = asdict(self)
        if not include_timing:
            data.pop("wall_clock_s")
        return data


def factorization_stats(
    factor: TiledMatrix, original: Optional[np.ndarray] = None
) -> FactorizationReport:
    """汇总一次分解的块精度分布、存储、内核次数与残差。"""
    run = factor.run
    if run is None:
        raise ValueError("该矩阵尚未完成分解。")
    counts = factor.precision_counts()
    storage = factor.storage_bytes()
    dp_storage = factor.dp_storage_bytes()
    residual = None
    if original is not None:
        residual = relative_residual(original, factor.to_dense())
    return FactorizationReport(
        n=factor.n,
        tile_size=factor.tile_size,
        n_tiles=factor.n_tiles,
        variant=run.precision_map.variant,
        band_width_dp=run.precision_map.band_width_dp,
        sp_fraction=run.precision_map.sp_fraction,
        conversion_site=run.conversion_site,
        workers=run.workers,
        tiles_dp=counts["dp"],
        tiles_sp=counts["sp"],
        tiles_hp=counts["hp"],
        storage_bytes=storage,
        dp_storage_bytes=dp_storage,
        bytes_saved=dp_storage - storage,
        saved_fraction=(dp_storage - storage) / dp_storage if dp_storage else 0.0,
        kernels_potrf=run.kernel_counts["potrf"],
        kernels_trsm=run.kernel_counts["trsm"],
        kernels_syrk=run.kernel_counts["syrk"],
        kernels_gemm=run.kernel_counts["gemm"],
        conversions=run.conversions,
        hp_saturations=run.saturations,
        wall_clock_s=run.wall_clock,
        relative_residual=residual,
    )


def relative_residual(matrix: np.ndarray, lower: np.ndarray) -> float:
    """‖A − LLᵀ‖_F / ‖A‖_F。"""
    matrix = np.asarray(matrix, dtype=np.float64)
    return float(np.linalg.norm(matrix - lower @ lower.T) / np.linalg.norm(matrix))


def untiled_cholesky(matrix: np.ndarray) -> np.ndarray:
    """不分块的 DP 参考分解。"""
    try:
        return cholesky(np.asarray(matrix, dtype=np.float64), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"矩阵非正定: {exc}", tile=(0, 0)) from exc


def random_spd(n: int, seed: int) -> np.ndarray:
    """条件数良好的随机对称正定矩阵 GGᵀ/n + I。"""
    g = box_muller(make_generator(seed), (n, n))
    return g @ g.T / n + np.eye(n)


def factorize_dense(
    matrix: np.ndarray,
    pmap: PrecisionMap,
    *,
    tile_size: int = 128,
    workers: int = 1,
    conversion_site: str = "sender",
) -> Tuple[np.ndarray, TiledMatrix]:
    """稠密输入的便捷入口，返回 (DP 下三角因子, 分块结果)。"""
    tiled = TiledMatrix.from_dense(matrix, min(tile_size, max(1, matrix.shape[0])), pmap)
    factor = tiled_cholesky(tiled, pmap, workers, conversion_site=conversion_site)
    return factor.to_dense(), factor
