"""
Chunked thread-pool execution for ray batches.

Chunk boundaries depend only on the batch size and the chunk size, never on the
thread count, so an ordered reduction gives the same floating point result for any
number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, List, Sequence, Tuple, TypeVar

T = TypeVar("T")

DEFAULT_CHUNK = 2048


def chunk_ranges(n: int, chunk: int = DEFAULT_CHUNK) -> List[Tuple[int, int]]:
    if chunk < 1:
        raise ValueError(f"chunk size must be >= 1, got {chunk}")
    return [(i, min(i + chunk, n)) for i in range(0, n, chunk)]


def map_chunks(
    fn: Callable[[int, int], T],
    ranges: Sequence[Tuple[int, int]],
    *,
    threads: int = 1,
    ordered: bool = True,
) -> List[T]:
    """
    Run fn(start, stop) for each range.

    ordered=True returns results in range order (deterministic reductions);
    ordered=False returns them in completion order.
    """
    if threads <= 1 or len(ranges) <= 1:
        return [fn(a, b) for a, b in ranges]

    with ThreadPoolExecutor(max_workers=threads) as ex:
        if ordered:
            return list(ex.map(lambda r: fn(*r), ranges))
        futures = [ex.submit(fn, a, b) for a, b in ranges]
        return [f.result() for f in as_completed(futures)]
