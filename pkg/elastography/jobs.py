import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from django.conf import settings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def _run_and_label(func: Callable[[T], R], item: T, label: str) -> R:
    try:
        return func(item)
    except Exception as exc:
        logger.error(f"Job {label} failed: {exc}")
        raise


def run_parallel(func: Callable[[T], R], items: Iterable[T], workers: Optional[int] = None) -> List[R]:
    """Apply ``func`` to every item on a thread pool.

    Results come back in input order. The first failing item's exception is
    re-raised in the caller once the pool has drained.
    """
    items = list(items)
    workers = workers or getattr(settings, "ELASTOLAB_WORKERS", 1)
    if workers <= 1 or len(items) <= 1:
        return [_run_and_label(func, item, str(i)) for i, item in enumerate(items)]

    logger.debug(f"Running {len(items)} jobs on {workers} threads")
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="elastolab") as pool:
        futures = [pool.submit(_run_and_label, func, item, str(i)) for i, item in enumerate(items)]
        return [f.result() for f in futures]
