"""
Performance monitoring for the expensive numerical stages (solves, inversions,
training) so slow cases show up in the logs.
"""

import time
import logging
import threading
from functools import wraps
from typing import Any, Callable, Dict, Optional

from django.conf import settings
from django.core.cache import cache

logger = logging.getLogger(__name__)

_PERF_INDEX_KEY = "perf__index"
# guards the read-modify-write of the name index across worker threads
_index_lock = threading.Lock()


def monitor_performance(func_name: Optional[str] = None):
    """
    Decorator to monitor function performance and log metrics.
    """
    def decorator(func: Callable) -> Callable:
        name = func_name or func.__name__

        @wraps(func)
        def wrapper(*args, **kwargs) -> Any:
            start_time = time.perf_counter()

            try:
                result = func(*args, **kwargs)
            except Exception as e:
                execution_time = time.perf_counter() - start_time
                logger.error(f"Performance: {name} failed after {execution_time:.3f}s: {e}")
                raise

            execution_time = time.perf_counter() - start_time
            logger.info(f"Performance: {name} executed in {execution_time:.3f}s")
            _record_timing(name, execution_time)
            return result

        return wrapper
    return decorator


def _record_timing(name: str, execution_time: float) -> None:
    try:
        timeout = getattr(settings, "PERF_STATS_TIMEOUT", 3600)
        with _index_lock:
            names = cache.get(_PERF_INDEX_KEY) or []
            if name not in names:
                cache.set(_PERF_INDEX_KEY, sorted(names + [name]), timeout)
        cache.set(f"perf_{name}", execution_time, timeout)
    except Exception as e:
        logger.warning(f"Cache error recording timing for {name}: {e}")


def get_performance_stats() -> Dict[str, str]:
    """
    Latest execution time of every monitored stage, as formatted seconds.
    """
    stats = {}
    for name in cache.get(_PERF_INDEX_KEY) or []:
        execution_time = cache.get(f"perf_{name}")
        if execution_time is not None:
            stats[f"perf_{name}"] = f"{execution_time:.3f}s"
    return stats
