"""
Bounded parallel map.

Uses dask threaded scheduler when dask is installed, plain loop otherwise.
Results always come back in input order.
"""
from __future__ import annotations

from typing import Callable, List, Sequence, TypeVar

from ._interop import have

T = TypeVar("T")
R = TypeVar("R")

# pylint: disable=import-outside-toplevel


def parallel_map(fn: Callable[[T], R], items: Sequence[T], threads: int = 1) -> List[R]:
    """
    Apply ``fn`` to every item using at most ``threads`` workers.

    :param fn: Pure function, must not mutate shared state
    :param items: Inputs
    :param threads: Number of worker threads, ``<=1`` means run inline
    """
    if threads <= 1 or len(items) <= 1 or not have.dask:
        return [fn(item) for item in items]

    import dask
    from dask import delayed

    tasks = [delayed(fn)(item) for item in items]
    return list(dask.compute(*tasks, scheduler="threads", num_workers=threads))
