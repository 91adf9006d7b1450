"""Atomic output files and content hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import IO, Any


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_json(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


class OutputSet:
    """Collects outputs in temp files and renames them into place together.

    Nothing appears under the final names until :meth:`commit`; :meth:`abort`
    removes every temp file.
    """

    def __init__(self, out_dir: str | Path):
        self.out_dir = Path(out_dir)
        self._pending: dict[Path, Path] = {}

    def open(self, name: str, mode: str = "w") -> IO:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        final = self.out_dir / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=self.out_dir)
        os.close(fd)
        self._pending[final] = Path(tmp)
        if "b" in mode:
            return open(tmp, mode)
        return open(tmp, mode, encoding="utf-8", newline="")

    def write_text(self, name: str, text: str) -> None:
        with self.open(name) as fh:
            fh.write(text)

    @property
    def names(self) -> list[Path]:
        return sorted(self._pending)

    def temp_path(self, final: Path) -> Path:
        return self._pending[final]

    def commit(self) -> list[Path]:
        done = []
        for final, tmp in sorted(self._pending.items()):
            os.replace(tmp, final)
            done.append(final)
        self._pending.clear()
        return done

    def abort(self) -> None:
        for tmp in self._pending.values():
            try:
                tmp.unlink()
            except FileNotFoundError:
                pass
        self._pending.clear()
