"""
Caching of FFT-domain filter responses.

A dataset run applies the same Butterworth and directional windows to
hundreds of equally sized fields; the responses depend only on the grid shape
and the filter configuration, so they are computed once per process.
"""

import hashlib
import json
import logging
from typing import Any, Dict, Optional, Tuple

import numpy as np
from django.conf import settings
from django.core.cache import cache

logger = logging.getLogger(__name__)


def _filter_key(kind: str, shape: Tuple[int, int], params: Dict[str, Any]) -> str:
    digest = hashlib.sha1(json.dumps(params, sort_keys=True).encode("utf-8")).hexdigest()[:16]
    return f"filter_{kind}_{shape[0]}x{shape[1]}_{digest}"


def get_cached_filter(kind: str, shape: Tuple[int, int], params: Dict[str, Any]) -> Optional[np.ndarray]:
    """Get a cached filter response or return None if not cached."""
    try:
        return cache.get(_filter_key(kind, shape, params))
    except Exception as e:
        logger.warning(f"Cache error getting {kind} filter: {e}")
        return None


def cache_filter(kind: str, shape: Tuple[int, int], params: Dict[str, Any], response: np.ndarray) -> None:
    """Cache a filter response."""
    try:
        cache.set(_filter_key(kind, shape, params), response, settings.FILTER_BANK_CACHE_TIMEOUT)
        logger.debug(f"Cached {kind} filter for {shape[0]}x{shape[1]} grid")
    except Exception as e:
        logger.warning(f"Cache error setting {kind} filter: {e}")


def clear_filter_cache() -> None:
    cache.clear()
    logger.info("Cleared filter cache")
