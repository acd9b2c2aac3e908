"""Line-delimited JSON helpers."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterable, Iterator


def dumps(obj: Any) -> str:
    # sorted keys + fixed separators keep persisted files byte-stable
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def iter_lines(path: str | os.PathLike) -> Iterator[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                yield lineno, line


def read(path: str | os.PathLike) -> list[dict]:
    return [json.loads(line) for _, line in iter_lines(path)]


def write(path: str | os.PathLike, rows: Iterable[Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(dumps(row) + "\n")


class Appender:
    """Durable line appender: every record is flushed and fsynced."""

    def __init__(self, path: str | os.PathLike, mode: str = "a", fsync: bool = True):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, mode, encoding="utf-8")
        self._fsync = fsync

    def append(self, obj: Any) -> None:
        self._fh.write(dumps(obj) + "\n")
        self._fh.flush()
        if self._fsync:
            os.fsync(self._fh.fileno())

    def write_raw(self, line: str) -> None:
        """Copy an already-serialized line verbatim."""
        self._fh.write(line)
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
