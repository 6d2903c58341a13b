"""Per-trial rng streams and optional thread fan-out for Monte-Carlo loops."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, TypeVar

import numpy as np

T = TypeVar("T")


def trial_rngs(seed: int, count: int, stream: int = 0) -> list[np.random.Generator]:
    """Independent generators, one per trial, reproducible from ``seed``."""
    children = np.random.SeedSequence([seed, stream]).spawn(count)
    return [np.random.default_rng(c) for c in children]


def resolve_threads(threads: int | None) -> int:
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return threads


def map_trials(fn: Callable[..., T], items: Iterable, threads: int | None = 1) -> list[T]:
    """``[fn(x) for x in items]``, fanned out over threads when asked.

    Results keep input order, so output is independent of the thread count.
    """
    items = list(items)
    n = resolve_threads(threads)
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))
