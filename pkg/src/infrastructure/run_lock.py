"""
运行目录独占锁

一个运行独占其输出目录，并发运行需要不同目录
"""

import logging
import os
from pathlib import Path
from typing import Optional, Union

from core.errors import RunLockError

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"


class RunLock:
    """
    以 O_EXCL 创建 .lock 文件，退出时删除
    """

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.path = self.directory / LOCK_NAME
        self._fd: Optional[int] = None

    def acquire(self) -> "RunLock":
        self.directory.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as exc:
            raise RunLockError(
                f"output directory {self.directory} is locked by another run (remove {self.path} if stale)"
            ) from exc
        os.write(self._fd, str(os.getpid()).encode("ascii"))
        logger.debug(f"已获取运行锁: {self.path}")
        return self

    def release(self) -> None:
        if self._fd is None:
            return
        os.close(self._fd)
        self._fd = None
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass

    @property
    def held(self) -> bool:
        return self._fd is not None

    def __enter__(self) -> "RunLock":
        return self.acquire()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.release()
