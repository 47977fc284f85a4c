"""
Shared Rich console utilities for consistent CLI output.

Prose goes to standard error; standard output is reserved for JSON reports.
"""

from __future__ import annotations

import os
import sys
from typing import Iterable, Sequence

from rich import box
from rich.console import Console
from rich.table import Table

_STYLES = {"info": "cyan", "warn": "yellow", "error": "red", "success": "green"}
_FALSY = {"", "0", "false", "no", "off"}


def _env_flag(name: str) -> bool:
    value = os.getenv(name)
    return value is not None and value.strip().lower() not in _FALSY


def _resolve_color_setting(force_color: bool | None) -> bool | None:
    if force_color is not None:
        return force_color
    if _env_flag("HAZYDET_NO_COLOR"):
        return False
    if _env_flag("HAZYDET_COLOR"):
        return True
    return None


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


class ConsoleOutput:
    def __init__(self, force_color: bool | None = None, stream=None):
        self._color = _resolve_color_setting(force_color)
        self._stream = stream
        self._console = self._open(stream or sys.stderr)

    def _open(self, stream) -> Console:
        return Console(
            file=stream,
            force_terminal=self._color,
            no_color=None if self._color is None else not self._color,
            highlight=False,
            soft_wrap=True,
        )

    def _target(self) -> Console:
        # pytest's capsys swaps sys.stderr after import
        if self._stream is None and self._console.file is not sys.stderr:
            self._console = self._open(sys.stderr)
        return self._console

    def _say(self, kind: str, message: str):
        self._target().print(message, style=_STYLES[kind])

    def info(self, message: str):
        self._say("info", message)

    def warn(self, message: str):
        self._say("warn", message)

    def error(self, message: str):
        self._say("error", message)

    def success(self, message: str):
        self._say("success", message)

    def rule(self, title: str | None = None):
        self._target().rule(title or "", characters="-")

    def table(self, title: str, columns: Sequence[str], rows: Iterable[Sequence]):
        table = Table(title=title, box=box.ASCII, show_header=True, header_style="bold")
        for col in columns:
            table.add_column(col)
        for row in rows:
            table.add_row(*[_cell(item) for item in row])
        self._target().print(table)

    def summary_table(self, title: str, rows: Iterable[Sequence]):
        table = Table(title=title, box=box.ASCII, show_header=False)
        table.add_column("Key", style="bold")
        table.add_column("Value")
        for key, value in rows:
            table.add_row(str(key), _cell(value))
        self._target().print(table)

    def skipped(self, what: str, problems: Sequence[str]):
        """List the items a batch command passed over."""
        if not problems:
            return
        self.warn(f"{len(problems)} {what} skipped")
        self.table(f"Skipped {what}", ["#", "Problem"], enumerate(problems, 1))


_console = ConsoleOutput()


def configure_console(no_color: bool | None = None):
    global _console
    _console = ConsoleOutput(force_color=False if no_color else None)


def get_console() -> ConsoleOutput:
    return _console
