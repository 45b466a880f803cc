"""
Chunked thread-pool helper
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, TypeVar

from app.utils.setting import resolve_threads

logger = logging.getLogger(__name__)

T = TypeVar("T")


def chunk_ranges(n: int, chunk: int) -> List[tuple]:
    """[0, n) 범위를 chunk 크기의 연속 구간으로 분할"""
    chunk = max(1, int(chunk))
    return [(start, min(start + chunk, n)) for start in range(0, n, chunk)]


def map_chunks(
    func: Callable[[int, int], T],
    n: int,
    chunk: int,
    threads: Optional[int] = None,
) -> List[T]:
    """
    func(start, stop)을 각 구간에 대해 실행하고 구간 순서대로 결과를 반환합니다.
    스레드 수와 무관하게 결과 순서가 동일합니다.

    Args:
        func: 구간 처리 함수
        n: 전체 항목 수
        chunk: 구간 크기
        threads: 스레드 수 (None이면 설정값)

    Returns:
        구간별 결과 리스트
    """
    ranges = chunk_ranges(n, chunk)
    threads = resolve_threads(threads)

    if threads == 1 or len(ranges) <= 1:
        return [func(start, stop) for start, stop in ranges]

    logger.debug(f"Running {len(ranges)} chunks on {threads} threads")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda r: func(*r), ranges))
