# utils/file_helper.py - Atomic writes and #-headed TSV tables
import contextlib
import os
import tempfile
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, TextIO, Union

PathLike = Union[str, Path]


@contextlib.contextmanager
def atomic_path(path: PathLike, suffix: str = "") -> Iterator[Path]:
    """
    Yield a temporary path next to `path`; rename it over `path` only when the
    block finishes without raising. A partial file never replaces a complete one.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=suffix or ".tmp", dir=target.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, target)
    finally:
        if tmp.exists():
            tmp.unlink()


def write_text_atomic(path: PathLike, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text, encoding="utf-8")


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(format_cell(v) for v in value)
    if value is None:
        return ""
    return str(value)


def format_table(columns: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append("#" + "\t".join(columns))
    for row in rows:
        lines.append("\t".join(format_cell(v) for v in row))
    return "\n".join(lines) + "\n"


class TableStream:
    """
    Row-at-a-time TSV writer for metric streams.
    Rows go to a temporary file that replaces `path` on close.
    """

    def __init__(self, path: Optional[PathLike], columns: Sequence[str], comments: Sequence[str] = (),
                 stream: Optional[TextIO] = None):
        self.columns = list(columns)
        self._path = Path(path) if path else None
        self._stack = contextlib.ExitStack()
        if self._path is not None:
            tmp = self._stack.enter_context(atomic_path(self._path))
            self._fh = self._stack.enter_context(open(tmp, "w", encoding="utf-8"))
        else:
            self._fh = stream
        if self._fh is None:
            return
        for c in comments:
            self._fh.write(f"# {c}\n")
        self._fh.write("#" + "\t".join(self.columns) + "\n")

    def write(self, row: Sequence) -> None:
        if self._fh is None:
            return
        self._fh.write("\t".join(format_cell(v) for v in row) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._stack.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        # on error the pending rename is skipped and the partial file removed
        self._stack.__exit__(exc_type, exc, tb)
        return False
