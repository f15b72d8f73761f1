"""
Thread Fan-out Helper

Replicas and sweep points are independent, so they are farmed out to
worker threads with asyncio.to_thread. Results come back in input order;
callers fold them afterwards, so no state is shared between workers.
"""

import asyncio
from typing import Callable, Iterable, TypeVar

T = TypeVar("T")
R = TypeVar("R")


async def _gather(fn: Callable[[T], R], items: list[T], threads: int) -> list[R]:
    # Bound the number of threads working at once
    semaphore = asyncio.Semaphore(max(1, threads))

    async def one(item):
        async with semaphore:
            return await asyncio.to_thread(fn, item)

    return await asyncio.gather(*(one(item) for item in items))


def map_in_threads(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """
    Apply fn to every item, using up to `threads` worker threads.

    With threads <= 1 this is a plain list comprehension (no event loop),
    which keeps single-threaded runs easy to debug.
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    return asyncio.run(_gather(fn, items, threads))
