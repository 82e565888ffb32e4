"""
二进制容器的读写以及模型目录（bundle）的持久化管理。

所有容器都是小端序：4 字节魔数 | 若干 u32/f64 头字段 | float64 负载。
"""

import json
import os
import shutil
import struct
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import logger

HeaderLayout = Sequence[Tuple[str, str]]


class ContainerFormatError(ValueError):
    """容器文件头或负载不符合约定格式。"""


def _header_struct(layout: HeaderLayout) -> struct.Struct:
    return struct.Struct("<4s" + "".join(code for _, code in layout))


def encode_container(
    magic: bytes, layout: HeaderLayout, header: Dict[str, Any], payload: np.ndarray
) -> bytes:
    """把头字段和负载编码为字节串。"""
    if len(magic) != 4:
        raise ValueError(f"魔数必须是 4 字节: {magic!r}")
    packer = _header_struct(layout)
    values = []
    for name, code in layout:
        value = header[name]
        values.append(int(value) if code == "I" else float(value))
    body = np.ascontiguousarray(payload, dtype="<f8").tobytes()
    return packer.pack(magic, *values) + body


def write_container(
    path: Path,
    magic: bytes,
    layout: HeaderLayout,
    header: Dict[str, Any],
    payload: np.ndarray,
) -> None:
    """先写临时文件再替换，避免留下半截文件。"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_container(magic, layout, header, payload)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as fp:
        fp.write(data)
    os.replace(tmp_path, path)


def decode_container(
    data: bytes, magic: bytes, layout: HeaderLayout, source: str = "<bytes>"
) -> Tuple[Dict[str, Any], np.ndarray]:
    packer = _header_struct(layout)
    if len(data) < packer.size:
        raise ContainerFormatError(f"{source}: 文件过短，无法读取头部。")
    unpacked = packer.unpack_from(data, 0)
    if unpacked[0] != magic:
        raise ContainerFormatError(
            f"{source}: 魔数不匹配，期望 {magic!r}，实际 {unpacked[0]!r}。"
        )
    header = {name: value for (name, _), value in zip(layout, unpacked[1:])}
    body = data[packer.size :]
    if len(body) % 8:
        raise ContainerFormatError(f"{source}: 负载长度 {len(body)} 不是 8 的倍数。")
    payload = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return header, payload


def read_container(
    path: Path, magic: bytes, layout: HeaderLayout
) -> Tuple[Dict[str, Any], np.ndarray]:
    path = Path(path)
    with open(path, "rb") as fp:
        data = fp.read()
    return decode_container(data, magic, layout, source=path.name)


def expect_count(payload: np.ndarray, count: int, source: str) -> None:
    if payload.size != count:
        raise ContainerFormatError(
            f"{source}: 负载包含 {payload.size} 个值，头部声明需要 {count} 个。"
        )


def dump_json(path: Path, data: Dict[str, Any]) -> None:
    """确定性地写 JSON（键排序），保证同样的输入得到同样的字节。"""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(data, fp, ensure_ascii=False, indent=2, sort_keys=True)
        fp.write("\n")


def load_json(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as fp:
        return json.load(fp)


class BundleStore:
    """负责模型目录的创建、覆盖前备份与旧备份清理。"""

    def __init__(self, directory: Path, *, max_backups: int = 5):
        self.directory = Path(directory)
        self._backup_dir = self.directory / "old"
        self._max_backups = max_backups

    def path(self, name: str) -> Path:
        return self.directory / name

    def exists(self, names: Sequence[str]) -> bool:
        return all(self.path(name).exists() for name in names)

    def prepare(self, names: Sequence[str]) -> None:
        """写入新模型之前，把已有的同名文件移动到 old/<时间戳>/ 下。"""
        self.directory.mkdir(parents=True, exist_ok=True)
        existing = [self.path(name) for name in names if self.path(name).exists()]
        if not existing:
            return
        try:
            timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
            target = self._backup_dir / timestamp
            target.mkdir(parents=True, exist_ok=True)
            for file_path in existing:
                os.rename(str(file_path), str(target / file_path.name))
            logger.info(f"已将旧模型文件备份到 {target}")
            self._prune_backups()
        except OSError as exc:
            logger.error(f"创建或清理模型备份失败: {exc}", exc_info=True)

    def _prune_backups(self) -> None:
        backups: List[Path] = sorted(
            (p for p in self._backup_dir.iterdir() if p.is_dir()), key=lambda p: p.name
        )
        for stale in backups[: -self._max_backups]:
            shutil.rmtree(stale, ignore_errors=True)
            logger.info(f"已删除旧备份目录: {stale.name}")

    def latest_backup(self) -> Optional[Path]:
        if not self._backup_dir.is_dir():
            return None
        backups = sorted(p for p in self._backup_dir.iterdir() if p.is_dir())
        return backups[-1] if backups else None
