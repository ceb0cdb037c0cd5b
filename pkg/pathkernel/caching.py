# pathkernel/caching.py
"""
Bounded in-memory array cache
Keeps checkpoint Jacobians and evaluations around so adjacent steps reuse them
"""

import logging
from collections import OrderedDict
from functools import wraps
from typing import Any, Callable, Hashable, Optional

import numpy as np

logger = logging.getLogger(__name__)


class ArrayCache:
    """
    Simple LRU cache for numpy results keyed by tuples

    Example:
        cache = ArrayCache(max_items=256)

        @cache.cached("eval")
        def evaluate(step: int) -> float:
            ...
    """

    def __init__(self, max_items: int = 1024):
        self.max_items = max_items
        self.data: "OrderedDict[Hashable, Any]" = OrderedDict()
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self.data)

    def get(self, key: Hashable) -> Optional[Any]:
        """Get value from cache, refreshing its recency"""
        if key not in self.data:
            self.misses += 1
            return None
        self.hits += 1
        self.data.move_to_end(key)
        return self.data[key]

    def set(self, key: Hashable, value: Any):
        """Set value in cache, evicting the least recently used entry when full"""
        if isinstance(value, np.ndarray):
            # read-only view; the caller's array keeps its flags
            value = value.view()
            value.setflags(write=False)
        self.data[key] = value
        self.data.move_to_end(key)
        while len(self.data) > self.max_items:
            evicted, _ = self.data.popitem(last=False)
            logger.debug(f"Cache evicted: {evicted}")

    def invalidate(self, key: Hashable):
        """Remove key from cache"""
        if key in self.data:
            del self.data[key]

    def invalidate_prefix(self, prefix: Hashable):
        """Invalidate tuple keys whose first element equals prefix (e.g. a step)"""
        keys_to_delete = [
            k for k in self.data if isinstance(k, tuple) and k and k[0] == prefix
        ]
        for key in keys_to_delete:
            del self.data[key]
        if keys_to_delete:
            logger.debug(f"Cache invalidated {len(keys_to_delete)} keys under {prefix}")

    def clear(self):
        self.data.clear()

    def stats(self) -> dict:
        total = self.hits + self.misses
        return {
            'items': len(self.data),
            'hits': self.hits,
            'misses': self.misses,
            'hit_rate': self.hits / total if total else 0.0,
        }

    def cached(self, key_prefix: str):
        """Decorator memoizing a function of hashable positional arguments"""
        def decorator(func: Callable):
            @wraps(func)
            def wrapper(*args):
                cache_key = (key_prefix, func.__name__) + tuple(args)
                cached_value = self.get(cache_key)
                if cached_value is not None:
                    return cached_value
                result = func(*args)
                self.set(cache_key, result)
                return result

            wrapper.cache = self
            return wrapper
        return decorator
