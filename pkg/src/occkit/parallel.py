"""Worker-count control. Every parallel map returns results in input order."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits

_threads = 1


def env_threads(default: int = 1) -> int:
    try:
        return max(1, int(os.environ.get("OCCKIT_THREADS", default)))
    except ValueError:
        return default


def set_threads(n: int):
    """Cap occkit workers; returns the threadpoolctl limiter.

    BLAS is always held to one thread: its GEMM partitioning, and so the
    floating-point summation order, depends on the thread count.
    """
    global _threads
    _threads = max(1, int(n))
    return threadpool_limits(limits=1)


def get_threads() -> int:
    return _threads


def pmap(fn, items):
    items = list(items)
    if _threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=_threads) as ex:
        return list(ex.map(fn, items))
