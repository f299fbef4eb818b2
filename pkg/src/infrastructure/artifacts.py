"""
运行产物写入：JSON、CSV 与 JSON Lines 审计流

每个 JSON 产物带 config_hash 字段，每个 CSV 带 config_hash 列
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def format_value(value: Any) -> Any:
    """浮点数固定 6 位小数，保证同配置重跑的 CSV 逐字节一致"""
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def write_json(path: PathLike, payload: Mapping[str, Any], config_hash: Optional[str] = None) -> Path:
    path = Path(path)
    body = dict(payload)
    if config_hash is not None:
        body["config_hash"] = config_hash
    path.write_text(json.dumps(body, indent=2, sort_keys=False), encoding="utf-8")
    return path


def write_csv(
    path: PathLike,
    rows: Sequence[Mapping[str, Any]],
    config_hash: str,
    columns: Optional[List[str]] = None,
) -> Path:
    """
    写出 CSV 表，末列为 config_hash

    Args:
        path: 输出路径
        rows: 行字典
        config_hash: 配置哈希
        columns: 列顺序，缺省取第一行的键
    """
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([*columns, "config_hash"])
        for row in rows:
            writer.writerow([*(format_value(row.get(c, "")) for c in columns), config_hash])
    return path


class CsvLog:
    """
    逐行追加的 CSV 日志（训练日志按 epoch 写一行）
    """

    def __init__(self, path: PathLike, columns: Sequence[str], config_hash: str):
        self.path = Path(path)
        self.columns = list(columns)
        self.config_hash = config_hash
        with open(self.path, "w", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([*self.columns, "config_hash"])

    def append(self, row: Mapping[str, Any]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.writer(f).writerow([*(format_value(row.get(c, "")) for c in self.columns), self.config_hash])


class AuditWriter:
    """
    每个样本一行的 JSON Lines 审计流（置信度、路由、保留/主导决策）
    """

    def __init__(self, path: PathLike, config_hash: str):
        self.path = Path(path)
        self.config_hash = config_hash
        self._file = None
        self.count = 0

    def __enter__(self) -> "AuditWriter":
        self._file = open(self.path, "w", encoding="utf-8")
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        self.close()

    def write(self, record: Dict[str, Any]) -> None:
        if self._file is None:
            raise RuntimeError("audit writer is not open")
        self._file.write(json.dumps({**record, "config_hash": self.config_hash}) + "\n")
        self.count += 1

    def write_all(self, records: Iterable[Dict[str, Any]]) -> None:
        for record in records:
            self.write(record)

    def close(self) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None
            logger.info(f"审计流已写入: {self.path} ({self.count} rows)")


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
