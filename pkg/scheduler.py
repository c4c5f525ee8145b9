"""
Scheduler module for the mask-text engine.
Runs independent jobs (one per frame) on a thread pool and returns
results in submission order so outputs never depend on scheduling.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence, TypeVar

from errors import ContractError

T = TypeVar("T")
R = TypeVar("R")


class Scheduler:
    """
    Schedules pure jobs over a fixed-size worker pool.
    """

    def __init__(self, threads: int = 1):
        """
        Initialize Scheduler.

        Args:
            threads (int): Number of worker threads (1 runs jobs inline)
        """
        if threads < 1:
            raise ContractError(f"thread count must be >= 1, got {threads}")
        self.logger = logging.getLogger(__name__)
        self.threads = threads

    def run(self, job: Callable[[T], R], items: Sequence[T]) -> List[R]:
        """
        Apply `job` to every item and collect the results.

        Args:
            job (Callable[[T], R]): Pure function applied to each item
            items (Sequence[T]): Work items

        Returns:
            List[R]: Results aligned with `items`
        """
        start = time.perf_counter()
        self.logger.debug("Scheduling %d jobs on %d threads", len(items), self.threads)

        if self.threads == 1 or len(items) <= 1:
            results = [job(item) for item in items]
        else:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                # map() yields in submission order and re-raises the first failure
                results = list(pool.map(job, items))

        duration = time.perf_counter() - start
        self.logger.debug("Completed %d jobs in %.2f seconds", len(items), duration)
        return results
