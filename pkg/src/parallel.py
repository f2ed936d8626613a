"""
并行工具
按连续区间切分任务，用线程池执行，结果按区间顺序返回 (归约结果与线程数无关)
"""

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple, TypeVar

T = TypeVar("T")


def default_threads() -> int:
    """默认线程数: 机器并行度"""
    return os.cpu_count() or 1


def split_ranges(n_items: int, n_chunks: int) -> List[Tuple[int, int]]:
    """把 [0, n_items) 切成至多 n_chunks 个连续区间"""
    n_chunks = max(1, min(n_chunks, n_items))
    size, extra = divmod(n_items, n_chunks)
    ranges, start = [], 0
    for k in range(n_chunks):
        stop = start + size + (1 if k < extra else 0)
        ranges.append((start, stop))
        start = stop
    return ranges


def map_ranges(
    func: Callable[[int, int], T],
    n_items: int,
    threads: Optional[int] = 1,
    chunk_size: int = 8192,
) -> List[T]:
    """
    在连续区间上执行 func(start, stop)

    Args:
        func: 区间任务
        n_items: 任务总数
        threads: 线程数 (None 表示机器并行度)
        chunk_size: 每个区间的目标大小

    Returns:
        按区间顺序排列的结果
    """
    if n_items == 0:
        return []
    threads = threads or default_threads()
    n_chunks = max(threads, -(-n_items // chunk_size))
    ranges = split_ranges(n_items, n_chunks)
    if threads == 1:
        return [func(start, stop) for start, stop in ranges]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: func(*r), ranges))
