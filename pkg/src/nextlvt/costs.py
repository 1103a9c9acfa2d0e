"""Lightweight cost instrumentation shared by the tensor core and profiler.

A `CostRecorder` is installed with `recording(...)`; while active, tensor
ops report multiply-accumulate and elementwise counts, attributed to the
current scope path. Modules push their registered names onto the scope
stack during `__call__`, so rows end up keyed like `stages.0.blocks.1.mhca`.

When no recorder is active every hook is a no-op, so normal training pays
only one `is None` check per op.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field


@dataclass
class CostRow:
    macs: int = 0
    elementwise: int = 0


@dataclass
class CostRecorder:
    rows: dict[str, CostRow] = field(default_factory=dict)
    _stack: list[str] = field(default_factory=list)

    def _row(self) -> CostRow:
        path = ".".join(self._stack) if self._stack else "<top>"
        row = self.rows.get(path)
        if row is None:
            row = self.rows[path] = CostRow()
        return row

    def add_macs(self, n: int) -> None:
        self._row().macs += n

    def add_elementwise(self, n: int) -> None:
        self._row().elementwise += n

    def total_macs(self) -> int:
        return sum(r.macs for r in self.rows.values())


_ACTIVE: CostRecorder | None = None


def active_recorder() -> CostRecorder | None:
    return _ACTIVE


@contextmanager
def recording(recorder: CostRecorder):
    """Install `recorder` as the cost sink for the duration of the block."""
    global _ACTIVE
    prev = _ACTIVE
    _ACTIVE = recorder
    try:
        yield recorder
    finally:
        _ACTIVE = prev


@contextmanager
def scope(name: str):
    """Attribute costs inside the block to `name` under the current path."""
    if _ACTIVE is None:
        yield
        return
    _ACTIVE._stack.append(name)
    try:
        yield
    finally:
        _ACTIVE._stack.pop()


def add_macs(n: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.add_macs(n)


def add_elementwise(n: int) -> None:
    if _ACTIVE is not None:
        _ACTIVE.add_elementwise(n)
