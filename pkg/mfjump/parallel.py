"""
Ordered fan-out over worker threads
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, Tuple, TypeVar

from .config import Config

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """Apply fn to every item, returning results in input order whatever the worker count"""
    items = list(items)
    workers = min(Config.resolve_threads(threads), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    logger.debug(f"Mapping {len(items)} items over {workers} threads")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunk_ranges(total: int, chunks: int) -> List[Tuple[int, int]]:
    """Split range(total) into at most chunks contiguous (start, stop) pieces"""
    chunks = max(1, min(chunks, total))
    bounds = [round(i * total / chunks) for i in range(chunks + 1)]
    return [(bounds[i], bounds[i + 1]) for i in range(chunks) if bounds[i + 1] > bounds[i]]
