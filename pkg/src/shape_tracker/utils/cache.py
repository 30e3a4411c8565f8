"""
Cache utilities for the shape-prior tracker using diskcache.
"""
import hashlib
import logging
from pathlib import Path
from typing import Any, Optional

import diskcache as dc
import numpy as np

from ..configs.settings import CACHE_DIR, CACHE_ENABLED, CACHE_EXPIRE

logger = logging.getLogger(__name__)


class TrackerCache:
    """Disk cache for expensive, deterministic precomputations (surface sample clouds)."""

    def __init__(self, cache_dir: str = CACHE_DIR):
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        self.cache = dc.Cache(cache_dir)

    @staticmethod
    def array_key(prefix: str, *parts: Any) -> str:
        """Consistent md5 key over numpy arrays and scalars."""
        digest = hashlib.md5()
        for part in parts:
            if isinstance(part, np.ndarray):
                digest.update(str(part.dtype).encode("utf-8"))
                digest.update(str(part.shape).encode("utf-8"))
                digest.update(np.ascontiguousarray(part).tobytes())
            else:
                digest.update(repr(part).encode("utf-8"))
        return f"{prefix}:{digest.hexdigest()}"

    def get(self, key: str) -> Optional[Any]:
        try:
            return self.cache.get(key)
        except Exception as e:
            logger.warning(f"[Cache] Get failed for key {key}: {e}")
            return None

    def set(self, key: str, value: Any, expire: int = CACHE_EXPIRE) -> bool:
        try:
            self.cache.set(key, value, expire=expire)
            return True
        except Exception as e:
            logger.warning(f"[Cache] Set failed for key {key}: {e}")
            return False

    def get_surface_samples(self, vertices: np.ndarray, faces: np.ndarray, density: float, seed: int) -> Optional[dict]:
        return self.get(self.array_key("surface", vertices, faces, float(density), int(seed)))

    def set_surface_samples(
        self, vertices: np.ndarray, faces: np.ndarray, density: float, seed: int, samples: dict
    ) -> bool:
        return self.set(self.array_key("surface", vertices, faces, float(density), int(seed)), samples)

    def clear(self) -> bool:
        try:
            self.cache.clear()
            return True
        except Exception as e:
            logger.warning(f"[Cache] Clear failed: {e}")
            return False

    def size(self) -> int:
        try:
            return len(self.cache)
        except Exception:
            return 0


_cache_instance: Optional[TrackerCache] = None


def get_cache() -> Optional[TrackerCache]:
    """Process-wide cache, or None when caching is disabled or the directory is unusable."""
    global _cache_instance
    if not CACHE_ENABLED:
        return None
    if _cache_instance is None:
        try:
            _cache_instance = TrackerCache()
        except Exception as e:
            logger.warning(f"[Cache] Disabled, could not open {CACHE_DIR}: {e}")
            return None
    return _cache_instance
