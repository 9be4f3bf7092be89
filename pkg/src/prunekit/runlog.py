"""Append-only CSV run logs with reproducible float formatting."""

from __future__ import annotations

from pathlib import Path


def csv_value(value) -> str:
    """Stable scalar formatting: shortest round-trip floats, lowercase bools."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


def format_row(values) -> str:
    return ",".join(csv_value(v) for v in values) + "\n"


class CsvLog:
    """CSV writer that flushes per row so kills lose at most the current line."""

    def __init__(self, path: str | Path, header: list[str], append: bool = False):
        self.path = Path(path)
        self.header = header
        mode = "a" if append and self.path.exists() else "w"
        self._fh = open(self.path, mode)
        if mode == "w":
            self._fh.write(",".join(header) + "\n")
            self._fh.flush()

    def write(self, values) -> None:
        self._fh.write(format_row(values))
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def truncate_rows(path: str | Path, keep_rows: int) -> None:
    """Keep the header plus the first ``keep_rows`` data rows (resume safety)."""
    p = Path(path)
    if not p.exists():
        return
    lines = p.read_text().splitlines(keepends=True)
    p.write_text("".join(lines[: 1 + keep_rows]))
