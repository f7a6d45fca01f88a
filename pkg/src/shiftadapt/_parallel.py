"""Order-preserving map over a process pool; serial when ``jobs <= 1``."""
from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, Iterable, TypeVar

from numpy.random import SeedSequence

T = TypeVar("T")
R = TypeVar("R")


def default_jobs() -> int:
    return max(1, int(os.environ.get("SHIFTADAPT_JOBS", "1")))


def parallel_map(fn: Callable[[T], R], items: Iterable[T], jobs: int | None = None) -> list[R]:
    items = list(items)
    jobs = default_jobs() if jobs is None else jobs
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


def derive_seed(*path: int) -> int:
    """Stable 32-bit seed for a task path such as ``(seed, repeat, fold)``."""
    return int(SeedSequence([int(p) & 0xFFFFFFFF for p in path]).generate_state(1)[0])
