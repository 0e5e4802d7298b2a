"""Worker-count control.  Work is always cut into fixed-size chunks, so the
number of threads never changes which floating-point operations run."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

_THREADS = 1


def set_threads(n: int) -> None:
    global _THREADS
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _THREADS = int(n)


def get_threads() -> int:
    return _THREADS


def chunked_map(fn, n_items: int, chunk: int):
    """``[fn(lo, hi) for each chunk]`` in chunk order, possibly on worker threads."""
    bounds = [(lo, min(lo + chunk, n_items)) for lo in range(0, n_items, chunk)]
    if _THREADS == 1 or len(bounds) < 2:
        return [fn(lo, hi) for lo, hi in bounds]
    with ThreadPoolExecutor(max_workers=_THREADS) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))
