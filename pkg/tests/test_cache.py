import numpy as np

from shape_tracker import prior_shape
from shape_tracker.prior_shape import build_surface_index
from shape_tracker.utils.cache import TrackerCache


def test_array_key_tracks_content():
    a = np.arange(6.0).reshape(2, 3)
    assert TrackerCache.array_key("s", a, 1) == TrackerCache.array_key("s", a.copy(), 1)
    assert TrackerCache.array_key("s", a, 1) != TrackerCache.array_key("s", a.reshape(3, 2), 1)
    assert TrackerCache.array_key("s", a, 1) != TrackerCache.array_key("s", a, 2)


def test_surface_samples_are_reused(tmp_path, sphere, monkeypatch):
    cache = TrackerCache(str(tmp_path / "cache"))
    monkeypatch.setattr(prior_shape, "get_cache", lambda: cache)
    first = build_surface_index(sphere, seed=2)
    assert cache.size() == 1
    second = build_surface_index(sphere, seed=2)
    np.testing.assert_array_equal(first.samples, second.samples)
    assert cache.size() == 1
    build_surface_index(sphere, seed=3)
    assert cache.size() == 2
    assert cache.clear() and cache.size() == 0
