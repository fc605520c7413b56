from __future__ import annotations

import numpy as np
import pytest

from focusinfer import model as m
from focusinfer.errors import BoundsError, CacheMissError, ConfigError, ShapeError
from focusinfer.kv_cache import KVCache, block_partition


# --- block partition ---------------------------------------------------------

def test_block_partition_exact():
    assert block_partition(128, 64) == [(0, 64), (64, 128)]


def test_block_partition_ragged_tail():
    assert block_partition(130, 64) == [(0, 64), (64, 128), (128, 130)]


def test_block_partition_single_short_block():
    assert block_partition(10, 64) == [(0, 10)]


def test_block_partition_empty_prompt():
    assert block_partition(0, 64) == []


def test_block_partition_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        block_partition(10, 0)
    with pytest.raises(ConfigError):
        block_partition(-1, 64)


# --- cache -------------------------------------------------------------------

def make_cache(layers=2, seq=12, heads=2, dim=4, prompt=8, block=3):
    return KVCache(layers, seq, heads, dim, prompt, block)


def rows(n, heads=2, dim=4, seed=0):
    return np.random.default_rng(seed).standard_normal((heads, n, dim), dtype=np.float32)


def test_cache_rejects_prompt_longer_than_seq():
    with pytest.raises(ConfigError):
        KVCache(1, 4, 1, 2, prompt_len=5, prompt_block_size=2)


def test_gather_before_write_is_a_miss():
    cache = make_cache()
    with pytest.raises(CacheMissError):
        cache.gather(0, [0])


def test_full_refresh_then_gather_order():
    cache = make_cache()
    k, v = rows(12, seed=1), rows(12, seed=2)
    cache.full_refresh(0, k, v)
    gk, gv = cache.gather(0, [7, 2])
    assert np.array_equal(gk[:, 0, :], k[:, 7, :])
    assert np.array_equal(gk[:, 1, :], k[:, 2, :])
    assert np.array_equal(gv[:, 0, :], v[:, 7, :])
    cache.require_all_valid(0)
    with pytest.raises(CacheMissError):
        cache.require_all_valid(1)


def test_full_refresh_shape_check():
    cache = make_cache()
    with pytest.raises(ShapeError):
        cache.full_refresh(0, rows(11), rows(11))


def test_refresh_at_leaves_complement_bitwise():
    cache = make_cache()
    cache.full_refresh(0, rows(12, seed=3), rows(12, seed=4))
    before_k = cache.layer_keys(0).copy()
    before_v = cache.layer_values(0).copy()
    idx = [9, 11]
    cache.refresh_at(0, idx, rows(2, seed=5), rows(2, seed=6))
    untouched = [i for i in range(12) if i not in idx]
    assert np.array_equal(cache.layer_keys(0)[:, untouched, :], before_k[:, untouched, :])
    assert np.array_equal(cache.layer_values(0)[:, untouched, :], before_v[:, untouched, :])
    assert not np.array_equal(cache.layer_keys(0)[:, idx, :], before_k[:, idx, :])


def test_refresh_at_empty_indices_is_noop():
    cache = make_cache()
    cache.refresh_at(0, [], rows(0), rows(0))
    assert not cache.valid.any()


def test_refresh_at_bounds():
    cache = make_cache()
    with pytest.raises(BoundsError):
        cache.refresh_at(0, [12], rows(1), rows(1))
    with pytest.raises(BoundsError):
        cache.refresh_at(0, [-1], rows(1), rows(1))
    with pytest.raises(BoundsError):
        cache.refresh_at(3, [0], rows(1), rows(1))


def test_refresh_at_prompt_requires_flag():
    cache = make_cache()
    with pytest.raises(BoundsError, match="prompt"):
        cache.refresh_at(0, [0], rows(1), rows(1))
    cache.refresh_at(0, [0], rows(1), rows(1), prompt_touch=True)
    assert cache.valid[0, 0]


def test_partial_validity_tracked_per_position():
    cache = make_cache()
    cache.refresh_at(0, [8, 10], rows(2), rows(2))
    cache.gather(0, [8, 10])
    with pytest.raises(CacheMissError, match=r"\[9\]"):
        cache.gather(0, [8, 9])


def test_gather_out_of_range_is_a_miss():
    cache = make_cache()
    cache.full_refresh(0, rows(12), rows(12))
    with pytest.raises(CacheMissError):
        cache.gather(0, [12])


# --- prompt block means ------------------------------------------------------

def test_prompt_means_values_and_ragged_tail():
    # prompt 8, block 3: blocks (0,3) (3,6) (6,8); the tail averages 2 rows
    cache = make_cache()
    k = rows(12, seed=7)
    cache.full_refresh(0, k, rows(12, seed=8))
    means = cache.prompt_means(0)
    assert means.shape == (2, 3, 4)
    want_tail = np.mean(k[:, 6:8, :].astype(np.float64), axis=1)
    assert np.max(np.abs(means[:, 2, :] - want_tail)) < 1e-6
    want_first = np.mean(k[:, 0:3, :].astype(np.float64), axis=1)
    assert np.max(np.abs(means[:, 0, :] - want_first)) < 1e-6


def test_prompt_means_require_full_prompt():
    cache = make_cache()
    cache.refresh_at(0, list(range(7)), rows(7), rows(7), prompt_touch=True)
    with pytest.raises(CacheMissError):
        cache.prompt_means(0)


def test_prompt_means_cached_then_invalidated_by_prompt_write():
    cache = make_cache()
    cache.full_refresh(0, rows(12, seed=9), rows(12, seed=10))
    first = cache.prompt_means(0)
    assert cache.prompt_means(0) is first
    # a response-only write must not invalidate the cached means
    cache.refresh_at(0, [9], rows(1, seed=11), rows(1, seed=12))
    assert cache.prompt_means(0) is first
    cache.refresh_at(0, [1], rows(1, seed=13), rows(1, seed=14), prompt_touch=True)
    second = cache.prompt_means(0)
    assert second is not first
    assert not np.array_equal(second[:, 0, :], first[:, 0, :])


def test_prompt_means_empty_prompt():
    cache = KVCache(1, 4, 2, 4, prompt_len=0, prompt_block_size=3)
    cache.full_refresh(0, rows(4), rows(4))
    assert cache.prompt_means(0).shape == (2, 0, 4)


# --- utilities ---------------------------------------------------------------

def test_clone_is_independent():
    cache = make_cache()
    cache.full_refresh(0, rows(12, seed=15), rows(12, seed=16))
    twin = cache.clone()
    twin.refresh_at(0, [8], rows(1, seed=17), rows(1, seed=18))
    assert not np.array_equal(twin.layer_keys(0)[:, 8, :], cache.layer_keys(0)[:, 8, :])
    assert np.array_equal(
        twin.layer_keys(0)[:, :8, :], cache.layer_keys(0)[:, :8, :]
    )
    twin2 = cache.clone()
    assert np.array_equal(twin2.valid, cache.valid)
    assert np.array_equal(twin2.layer_values(1), cache.layer_values(1))


def test_dump_layer_roundtrips_through_container(tmp_path):
    cache = make_cache()
    cache.full_refresh(1, rows(12, seed=19), rows(12, seed=20))
    path = tmp_path / "layer1.fdtc"
    cache.dump_layer(1, path)
    tensors = m.read_container(path.read_bytes())
    assert np.array_equal(tensors["keys"], cache.layer_keys(1))
    assert np.array_equal(tensors["values"], cache.layer_values(1))
    assert np.array_equal(tensors["valid"], np.ones(12, dtype=np.float32))
    assert np.array_equal(tensors["prompt_block_means"], cache.prompt_means(1))


def test_dump_layer_without_valid_prompt_omits_means(tmp_path):
    cache = make_cache()
    cache.refresh_at(0, [8], rows(1), rows(1))
    path = tmp_path / "layer0.fdtc"
    cache.dump_layer(0, path)
    tensors = m.read_container(path.read_bytes())
    assert "prompt_block_means" not in tensors
    assert tensors["valid"].sum() == 1.0
