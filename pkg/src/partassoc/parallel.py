"""Ordered per-image fan-out over worker processes."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "BPJ_THREADS"


def resolve_workers(requested: int | None = None, env: dict | None = None) -> int:
    """Worker count: ``requested`` (0 = auto), capped by ``BPJ_THREADS`` (0 = auto)."""
    env = os.environ if env is None else env
    auto = os.cpu_count() or 1
    n = 1 if requested is None else int(requested)
    if n < 0:
        raise ValueError(f"worker count must be >= 0, got {n}")
    if n == 0:
        n = auto
    raw = env.get(ENV_THREADS, "").strip()
    if raw:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_THREADS}={raw!r} is not an integer") from None
        if cap < 0:
            raise ValueError(f"{ENV_THREADS} must be >= 0, got {cap}")
        n = min(n, cap or auto)
    return max(1, n)


def map_ordered(fn: Callable[[T], R], items: Iterable[T], workers: int = 1, chunksize: int = 1) -> list[R]:
    """``[fn(x) for x in items]``, computed on ``workers`` processes, results in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
