"""Order-preserving worker pool capped by the ``ASL_THREADS`` variable."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count(requested: int | None = None) -> int:
    cap = os.environ.get("ASL_THREADS")
    n = requested if requested is not None else 1
    if cap:
        n = min(n, max(1, int(cap))) if requested is not None else max(1, int(cap))
    return max(1, n)


def parallel_map(fn, items, workers: int | None = 1):
    """``list(map(fn, items))``; results never depend on the worker count."""
    items = list(items)
    n = worker_count(workers)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
