import numpy as np
import pytest

from magesim.baselines import (BaselineConfig, QuestSelector, TidalSelector,
                               oracle_plan, quest_head_indices,
                               quest_page_scores, quest_plan, random_plan,
                               tidal_plan, window_plan)
from magesim.errors import ConfigError, PlanError
from magesim.kvcache import KVCache, build_page_meta
from magesim.mage import validate_plan

from conftest import random_distributions


def test_quest_page_score_hand_example():
    q = np.array([[1.0, 1.0]])
    lo = np.array([[1.0, -1.0]])
    hi = np.array([[3.0, 2.0]])
    assert quest_page_scores(q, lo, hi)[0] == pytest.approx(5.0)


def test_quest_page_score_upper_bounds_true_score():
    rng = np.random.default_rng(30)
    for _ in range(50):
        d = int(rng.integers(1, 8))
        keys = rng.standard_normal((int(rng.integers(1, 6)), d))
        q = rng.standard_normal((3, d))
        lo, hi = keys.min(axis=0, keepdims=True), keys.max(axis=0, keepdims=True)
        bound = quest_page_scores(q, lo, hi)[0]
        true = (q @ keys.T).sum(axis=0).max()
        assert bound >= true - 1e-9


def test_quest_page_size_one_is_token_topk():
    rng = np.random.default_rng(31)
    n, d = 12, 4
    keys = rng.standard_normal((n, d)).astype(np.float32)
    q = rng.standard_normal((3, d)).astype(np.float32)
    idx = quest_head_indices(q, keys, keys, budget=5, n=n, page_size=1)
    scores = (q @ keys.T).sum(axis=0)
    expected = np.sort(np.argsort(-scores, kind="stable")[:5])
    assert np.array_equal(idx, expected)


def test_quest_concentrated_page_always_selected():
    # One page holds keys of huge magnitude in both directions, so all
    # attention mass lands there and its bound dominates for any query.
    n, d, P = 8, 2, 2
    keys = np.ones((n, 1, d), dtype=np.float32) * 0.01
    keys[4] = 50.0
    keys[5] = -50.0
    cache = KVCache(1, 1, d)
    cache.append([keys], [np.zeros_like(keys)])
    meta = build_page_meta(cache, P)
    rng = np.random.default_rng(32)
    for _ in range(10):
        q = rng.standard_normal((4, 1, d)).astype(np.float32)
        plan = quest_plan([q], meta, budget=P, exact_layer_prefix=0)
        assert set(plan.indices[0][0].tolist()) == {4, 5}
        scores = (q[:, 0, :] @ keys[:, 0, :].T).sum(axis=0)
        assert int(np.argmax(scores)) in (4, 5)


def test_quest_plan_structure():
    rng = np.random.default_rng(33)
    cache = KVCache(2, 2, 4)
    keys = [rng.standard_normal((10, 2, 4)).astype(np.float32) for _ in range(2)]
    cache.append(keys, [np.zeros_like(k) for k in keys])
    meta = build_page_meta(cache, 3)
    queries = [rng.standard_normal((2, 4, 4)).astype(np.float32) for _ in range(2)]
    plan = quest_plan(queries, meta, budget=4, exact_layer_prefix=1)
    validate_plan(plan, 10)
    assert plan.method == "quest"
    assert plan.budgets[0] == 10          # prefix layer carries the full range
    assert plan.budgets[1] == 4
    assert len(plan.indices[1][0]) == 4


def test_tidal_plan_layer_constant():
    rng = np.random.default_rng(34)
    cross = random_distributions(rng, (4, 3, 20))
    plan = tidal_plan(cross, budget=6, num_layers=4, num_kv_heads=2,
                      exact_layer_prefix=1)
    validate_plan(plan, 20)
    for layer in range(2, 4):
        for h in range(2):
            assert np.array_equal(plan.indices[layer][h], plan.indices[1][h])


def test_tidal_uniform_attention_takes_first_indices():
    cross = np.full((2, 2, 9), 1 / 9, dtype=np.float32)
    plan = tidal_plan(cross, budget=3, num_layers=2, num_kv_heads=1,
                      exact_layer_prefix=1)
    assert plan.indices[1][0].tolist() == [0, 1, 2]


def test_tidal_matches_oracle_on_single_planned_layer():
    rng = np.random.default_rng(35)
    cross = random_distributions(rng, (4, 2, 16))
    t = tidal_plan(cross, budget=5, num_layers=2, num_kv_heads=2, exact_layer_prefix=1)
    o = oracle_plan([cross, cross], budget=5, num_kv_heads=2, exact_layer_prefix=1)
    for h in range(2):
        assert np.array_equal(t.indices[1][h], o.indices[1][h])


def test_window_plan_example():
    plan = window_plan(10, num_sinks=2, window_size=3, num_layers=2,
                       num_kv_heads=2, exact_layer_prefix=1)
    for layer in range(2):
        for h in range(2):
            assert plan.indices[layer][h].tolist() == [0, 1, 7, 8, 9]


def test_window_plan_full_when_window_covers():
    plan = window_plan(6, num_sinks=0, window_size=10, num_layers=1,
                       num_kv_heads=1, exact_layer_prefix=1)
    assert plan.indices[0][0].tolist() == list(range(6))


def test_window_plan_single_recent():
    plan = window_plan(9, num_sinks=0, window_size=1, num_layers=1,
                       num_kv_heads=1, exact_layer_prefix=1)
    assert plan.indices[0][0].tolist() == [8]


def test_window_plan_empty_cache_rejected():
    with pytest.raises(PlanError):
        window_plan(0, 1, 1, 1, 1, 1)


def test_oracle_plan_full_budget_is_full_range():
    rng = np.random.default_rng(36)
    cross = [random_distributions(rng, (2, 2, 7)) for _ in range(2)]
    plan = oracle_plan(cross, budget=10, num_kv_heads=1, exact_layer_prefix=1)
    assert plan.indices[1][0].tolist() == list(range(7))


def test_oracle_plan_concentrated_index_first():
    cross = np.zeros((2, 1, 5), dtype=np.float32)
    cross[:, :, 3] = 1.0
    plan = oracle_plan([cross, cross], budget=1, num_kv_heads=1, exact_layer_prefix=1)
    assert plan.indices[1][0].tolist() == [3]


def test_oracle_plan_matches_bruteforce_sort():
    rng = np.random.default_rng(37)
    cross = [random_distributions(rng, (4, 3, 25)) for _ in range(3)]
    plan = oracle_plan(cross, budget=6, num_kv_heads=2, exact_layer_prefix=1)
    for layer in (1, 2):
        for h in range(2):
            mass = cross[layer][2 * h:2 * h + 2].sum(axis=(0, 1))
            expected = sorted(sorted(range(25), key=lambda i: (-mass[i], i))[:6])
            assert plan.indices[layer][h].tolist() == expected


def test_every_baseline_satisfies_plan_invariants():
    rng = np.random.default_rng(38)
    n = 18
    cross = [random_distributions(rng, (4, 2, n)) for _ in range(3)]
    cache = KVCache(3, 2, 4)
    keys = [rng.standard_normal((n, 2, 4)).astype(np.float32) for _ in range(3)]
    cache.append(keys, [np.zeros_like(k) for k in keys])
    meta = build_page_meta(cache, 4)
    queries = [rng.standard_normal((2, 4, 4)).astype(np.float32) for _ in range(3)]
    plans = [
        quest_plan(queries, meta, 5, 1),
        tidal_plan(cross[1], 5, 3, 2, 1),
        window_plan(n, 2, 3, 3, 2, 1),
        oracle_plan(cross, 5, 2, 1),
        random_plan(n, 5, 3, 2, 1, seed=0),
    ]
    for plan in plans:
        validate_plan(plan, n)


def test_baseline_config_validation():
    with pytest.raises(ConfigError):
        BaselineConfig(method="bogus")
    with pytest.raises(ConfigError):
        BaselineConfig(method="quest", page_size=0)


def test_tidal_selector_anchor_flow():
    rng = np.random.default_rng(39)
    sel = TidalSelector(anchor_layer=1, budget=4, exact_layer_prefix=1,
                        num_layers=3, num_kv_heads=2, n=12)
    sel.start_step()
    assert sel.indices_for_layer(1, None) is None       # anchor runs exact
    cross = random_distributions(rng, (4, 2, 12))
    sel.observe(1, cross)
    chosen = sel.indices_for_layer(2, None)
    assert chosen is not None and len(chosen) == 2
    plan = sel.realized_plan()
    validate_plan(plan, 12)
    assert plan.method == "tidal"


def test_quest_selector_records_realized_plan():
    rng = np.random.default_rng(40)
    cache = KVCache(2, 2, 4)
    keys = [rng.standard_normal((9, 2, 4)).astype(np.float32) for _ in range(2)]
    cache.append(keys, [np.zeros_like(k) for k in keys])
    meta = build_page_meta(cache, 2)
    sel = QuestSelector(meta, budget=4, exact_layer_prefix=1, num_layers=2,
                        num_kv_heads=2)
    q = rng.standard_normal((3, 4, 4)).astype(np.float32)
    got = sel.indices_for_layer(1, q)
    assert len(got) == 2 and all(len(g) == 4 for g in got)
    plan = sel.realized_plan()
    validate_plan(plan, 9)
    assert np.array_equal(plan.indices[1][0], got[0])
