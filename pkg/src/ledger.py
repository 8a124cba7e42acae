# src/ledger.py
"""
JSONL ledger: one MetamorphicRecord per line.

Appends go through a single writer guarded by a thread lock and an exclusive
lock file next to the ledger, so two processes never append at once.
"""
from __future__ import annotations

import logging
import os
import threading
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator, List

from src.errors import ParseError, WriteError
from src.models import MetamorphicRecord, deserialize_record, serialize_record

logger = logging.getLogger(__name__)


@contextmanager
def exclusive_lock(target: Path) -> Iterator[Path]:
    """Hold `<target>.lock` for the duration of the block."""
    lock_path = target.with_name(target.name + ".lock")
    try:
        target.parent.mkdir(parents=True, exist_ok=True)
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as exc:
        raise WriteError(
            f"{target} is locked by another writer (remove {lock_path} if stale)"
        ) from exc
    except OSError as exc:
        raise WriteError(f"cannot create lock file {lock_path}: {exc}") from exc

    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        yield lock_path
    finally:
        os.close(fd)
        try:
            os.remove(lock_path)
        except OSError:
            pass


def read_records(path: str | Path) -> List[MetamorphicRecord]:
    """
    Load every record of a ledger. A truncated last line (interrupted append)
    is dropped with a warning; corruption anywhere else is a ParseError.
    """
    path = Path(path)
    if not path.exists():
        return []

    lines = path.read_text(encoding="utf-8").splitlines()
    records: List[MetamorphicRecord] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            records.append(deserialize_record(line))
        except (ParseError, KeyError, TypeError, ValueError) as exc:
            if lineno == len(lines):
                logger.warning("Dropping truncated ledger line %d in %s", lineno, path)
                break
            raise ParseError(f"bad ledger record: {exc}", line=lineno) from exc
    return records


def write_records(path: str | Path, records: Iterable[MetamorphicRecord]) -> None:
    """Replace the ledger with `records` (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    try:
        with exclusive_lock(path):
            with tmp.open("w", encoding="utf-8", newline="\n") as fh:
                for record in records:
                    fh.write(serialize_record(record) + "\n")
            os.replace(tmp, path)
    except OSError as exc:
        raise WriteError(f"could not write ledger {path}: {exc}") from exc


class LedgerWriter:
    """Serialized appender; safe to share between worker threads."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fh = None
        self._lock_ctx = None

    def __enter__(self) -> "LedgerWriter":
        self._lock_ctx = exclusive_lock(self.path)
        self._lock_ctx.__enter__()
        try:
            self._fh = self.path.open("a", encoding="utf-8", newline="\n")
        except OSError as exc:
            self._lock_ctx.__exit__(None, None, None)
            raise WriteError(f"could not open ledger {self.path}: {exc}") from exc
        return self

    def append(self, record: MetamorphicRecord) -> None:
        line = serialize_record(record) + "\n"
        with self._lock:
            try:
                self._fh.write(line)
                self._fh.flush()
            except OSError as exc:
                raise WriteError(f"could not append to {self.path}: {exc}") from exc

    def __exit__(self, *exc_info) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
        if self._lock_ctx is not None:
            self._lock_ctx.__exit__(*exc_info)
            self._lock_ctx = None
