import numpy as np
import pytest

from magesim.errors import ConfigError, PlanError, ShapeError
from magesim.kvcache import KVCache, build_page_meta


def make_slabs(rng, num_layers, width, num_kv_heads, head_dim):
    ks = [rng.standard_normal((width, num_kv_heads, head_dim)).astype(np.float32)
          for _ in range(num_layers)]
    vs = [rng.standard_normal((width, num_kv_heads, head_dim)).astype(np.float32)
          for _ in range(num_layers)]
    return ks, vs


def test_append_grows_by_width():
    cache = KVCache(2, 2, 4)
    rng = np.random.default_rng(0)
    ks, vs = make_slabs(rng, 2, 4, 2, 4)
    cache.append(ks, vs)
    assert cache.length == 4


def test_append_preserves_existing_entries():
    cache = KVCache(2, 2, 4)
    rng = np.random.default_rng(1)
    ks1, vs1 = make_slabs(rng, 2, 4, 2, 4)
    cache.append(ks1, vs1)
    before = cache.keys(0).copy()
    ks2, vs2 = make_slabs(rng, 2, 4, 2, 4)
    cache.append(ks2, vs2)
    assert cache.length == 8
    assert np.array_equal(cache.keys(0)[:4], before)


def test_append_layer_count_mismatch():
    cache = KVCache(3, 2, 4)
    rng = np.random.default_rng(2)
    ks, vs = make_slabs(rng, 2, 4, 2, 4)
    with pytest.raises(ShapeError):
        cache.append(ks, vs)


def test_gather_identity_and_subset():
    cache = KVCache(1, 2, 4)
    rng = np.random.default_rng(3)
    ks, vs = make_slabs(rng, 1, 6, 2, 4)
    cache.append(ks, vs)
    full_k, full_v = cache.gather(0, 1, np.arange(6))
    assert np.array_equal(full_k, cache.keys(0)[:, 1, :])
    assert np.array_equal(full_v, cache.values(0)[:, 1, :])
    sub_k, _ = cache.gather(0, 1, [1, 4])
    assert np.array_equal(sub_k, full_k[[1, 4]])


def test_gather_empty_indices():
    cache = KVCache(1, 1, 4)
    rng = np.random.default_rng(4)
    cache.append(*make_slabs(rng, 1, 3, 1, 4))
    k, v = cache.gather(0, 0, [])
    assert k.shape == (0, 4) and v.shape == (0, 4)


def test_gather_rejects_bad_indices():
    cache = KVCache(1, 1, 4)
    rng = np.random.default_rng(5)
    cache.append(*make_slabs(rng, 1, 3, 1, 4))
    with pytest.raises(PlanError):
        cache.gather(0, 0, [0, 3])
    with pytest.raises(PlanError):
        cache.gather(0, 0, [1, 1])
    with pytest.raises(PlanError):
        cache.gather(0, 0, [2, 0])


def test_gather_survives_append():
    cache = KVCache(1, 1, 2)
    rng = np.random.default_rng(6)
    cache.append(*make_slabs(rng, 1, 4, 1, 2))
    k_before, v_before = cache.gather(0, 0, [0, 2])
    cache.append(*make_slabs(rng, 1, 4, 1, 2))
    k_after, v_after = cache.gather(0, 0, [0, 2])
    assert np.array_equal(k_before, k_after)
    assert np.array_equal(v_before, v_after)


def test_page_meta_two_row_example():
    cache = KVCache(1, 1, 2)
    keys = np.array([[[1.0, 2.0]], [[3.0, -1.0]]], dtype=np.float32)
    cache.append([keys], [np.zeros_like(keys)])
    meta = build_page_meta(cache, 2)
    assert np.array_equal(meta.min_keys[0][0, 0], [1.0, -1.0])
    assert np.array_equal(meta.max_keys[0][0, 0], [3.0, 2.0])


def test_page_meta_page_size_one_degenerates():
    cache = KVCache(1, 1, 3)
    rng = np.random.default_rng(7)
    cache.append(*make_slabs(rng, 1, 5, 1, 3))
    meta = build_page_meta(cache, 1)
    assert meta.num_pages == 5
    for p in range(5):
        assert np.array_equal(meta.min_keys[0][p], cache.keys(0)[p])
        assert np.array_equal(meta.max_keys[0][p], cache.keys(0)[p])


def test_page_meta_partial_last_page():
    cache = KVCache(1, 1, 2)
    rng = np.random.default_rng(8)
    cache.append(*make_slabs(rng, 1, 5, 1, 2))
    meta = build_page_meta(cache, 2)
    assert meta.num_pages == 3
    assert meta.page_token_range(2) == (4, 5)


def test_page_meta_rejects_zero_page_size():
    cache = KVCache(1, 1, 2)
    with pytest.raises(ConfigError):
        build_page_meta(cache, 0)


def test_page_meta_bounds_dominate_keys():
    rng = np.random.default_rng(9)
    for trial in range(20):
        num_layers = int(rng.integers(1, 3))
        heads = int(rng.integers(1, 3))
        dim = int(rng.integers(1, 5))
        width = int(rng.integers(1, 17))
        page = int(rng.integers(1, 7))
        cache = KVCache(num_layers, heads, dim)
        cache.append(*make_slabs(rng, num_layers, width, heads, dim))
        meta = build_page_meta(cache, page)
        for layer in range(num_layers):
            for p in range(meta.num_pages):
                lo, hi = meta.page_token_range(p)
                seg = cache.keys(layer)[lo:hi]
                assert (meta.min_keys[layer][p][None] <= seg + 1e-7).all()
                assert (meta.max_keys[layer][p][None] >= seg - 1e-7).all()
