"""Multiply-accumulate instrumentation.

Ops that do contraction work call :func:`record` with a category and a count.
Counting is active only inside a :class:`FlopCounter` context, is thread-local,
and is suspended while gradients are being propagated.
"""

from __future__ import annotations

import contextlib
import threading
from collections import Counter

_local = threading.local()

CATEGORIES = ("matmul", "sample", "contract", "softmax")


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


class FlopCounter:
    """Accumulates multiply-accumulate counts per op category.

    Examples
    --------
    >>> with FlopCounter() as fc:
    ...     _ = F.matmul(a, b)
    >>> fc.total
    """

    def __init__(self):
        self.counts: Counter = Counter()

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().remove(self)
        return False

    @property
    def total(self) -> int:
        return int(sum(self.counts.values()))

    def __getitem__(self, category: str) -> int:
        return int(self.counts[category])


def record(category: str, count: int) -> None:
    if getattr(_local, "suspended", 0):
        return
    for counter in _stack():
        counter.counts[category] += int(count)


@contextlib.contextmanager
def suspend_counting():
    _local.suspended = getattr(_local, "suspended", 0) + 1
    try:
        yield
    finally:
        _local.suspended -= 1
