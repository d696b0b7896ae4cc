from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_VAR = "MERGEGRID_THREADS"


def max_threads() -> int:
    return os.cpu_count() or 1


def thread_count(threads: int | None = None) -> int:
    """Resolve an explicit thread count, else ``MERGEGRID_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get(ENV_VAR)
        threads = int(env) if env else 1
    if threads < 1:
        raise ValueError(f"thread count must be >= 1, got {threads}")
    return threads


def pmap(fn: Callable[[T], R], items: Iterable[T], threads: int | None = None) -> list[R]:
    """Ordered map; results are positional so completion order never leaks out."""
    items = list(items)
    n = min(thread_count(threads), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
