"""
统一的随机数来源：所有采样都经由同一个带种子的生成器。
"""

from typing import Tuple, Union

import numpy as np

Shape = Union[int, Tuple[int, ...]]


def make_generator(seed: int) -> np.random.Generator:
    """根据种子创建生成器（PCG64，跨平台位级一致）。"""
    return np.random.Generator(np.random.PCG64(int(seed)))


def box_muller(rng: np.random.Generator, shape: Shape) -> np.ndarray:
    """用 Box–Muller 变换生成标准正态样本。

    只依赖 ``rng.random``，不走 ziggurat 路径，相同种子在不同平台上结果一致。
    """
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    pairs = (count + 1) // 2
    u1 = rng.random(pairs)
    u2 = rng.random(pairs)
    # u1 ∈ [0, 1)，取 1 - u1 避免 log(0)
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * np.pi * u2
    samples = np.empty(2 * pairs)
    samples[0::2] = radius * np.cos(angle)
    samples[1::2] = radius * np.sin(angle)
    return samples[:count].reshape(shape)
