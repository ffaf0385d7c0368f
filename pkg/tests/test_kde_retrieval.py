import numpy as np
from hypothesis import given, strategies as st

from neurokalman.kde_retrieval import nw_oracle, retrieve
from neurokalman.memory_bank import MemoryBank


def test_single_anchor():
    bank = MemoryBank(5)
    f = np.array([0.2, -1.0, 3.0])
    bank.try_store(f, 0, 0.9)
    res = retrieve(np.array([1.0, 1.0, 1.0]), bank)
    assert np.array_equal(res.evidence, f) and np.array_equal(res.weights, [1.0]) and res.used_memory


def test_equal_dot_products_give_mean():
    keys = np.array([[1.0, 1.0], [1.0, -1.0]])
    res = retrieve(np.array([1.0, 0.0]), keys)
    assert np.allclose(res.weights, [0.5, 0.5], atol=1e-15)
    assert np.allclose(res.evidence, keys.mean(0), atol=1e-15)


def test_random_bank_matches_oracle(rng):
    bank = MemoryBank(10)
    for t in range(10):
        bank.try_store(rng.standard_normal(16), t, 0.9)
    q = rng.standard_normal(16)
    keys, vals = bank.snapshot()
    assert np.max(np.abs(retrieve(q, bank).evidence - nw_oracle(q, keys, vals))) < 1e-10


def test_oracle_trivial_cases(rng):
    v = rng.standard_normal((1, 3))
    assert np.allclose(nw_oracle(rng.standard_normal(4), rng.standard_normal((1, 4)), v), v[0], atol=1e-15)
    k = np.tile(rng.standard_normal(4), (5, 1))
    vals = rng.standard_normal((5, 3))
    assert np.allclose(nw_oracle(rng.standard_normal(4), k, vals), vals.mean(0), atol=1e-14)


def test_large_logits_stay_finite(rng):
    d = 16
    q = np.full(d, 1.0)
    keys = np.stack([np.full(d, s) for s in (500.0 / 4, -500.0 / 4, 480.0 / 4, 0.0)])
    got = retrieve(q, keys).evidence
    want = nw_oracle(q, keys, keys)
    assert np.all(np.isfinite(got)) and np.max(np.abs(got - want)) < 1e-10


def test_empty_bank_returns_query_copy():
    q = np.array([1.0, 2.0])
    for bank in (None, MemoryBank(3), np.zeros((0, 2))):
        res = retrieve(q, bank)
        assert np.array_equal(res.evidence, q) and res.evidence is not q
        assert not res.used_memory and len(res.weights) == 0


@given(st.integers(1, 64), st.integers(1, 32), st.integers(0, 2**31 - 1))
def test_retrieve_equals_nadaraya_watson(n, d, seed):
    r = np.random.default_rng(seed)
    keys = r.standard_normal((n, d)) * r.uniform(0.1, 3)
    q = r.standard_normal(d) * r.uniform(0.1, 3)
    assert np.max(np.abs(retrieve(q, keys).evidence - nw_oracle(q, keys, keys))) < 1e-10


@given(st.integers(1, 64), st.integers(1, 32), st.integers(0, 2**31 - 1))
def test_evidence_in_convex_hull(n, d, seed):
    r = np.random.default_rng(seed)
    keys = r.uniform(-3, 3, (n, d))
    ev = retrieve(r.uniform(-3, 3, d), keys).evidence
    assert np.all(ev >= keys.min(0) - 1e-12) and np.all(ev <= keys.max(0) + 1e-12)


def test_weights_shift_invariant(rng):
    from neurokalman.nn_core import attention
    q, keys = rng.standard_normal(6), rng.standard_normal((9, 6))
    # appending a constant coordinate to every key and the query shifts all logits equally
    _, w = attention(q, keys, keys)
    q2 = np.append(q, 2.0)
    k2 = np.hstack([keys, np.full((9, 1), 3.0)])
    _, w2 = attention(q2, k2, k2, scale=1.0 / np.sqrt(6))
    assert np.max(np.abs(w - w2)) < 1e-12


def test_oracle_rejects_empty():
    import pytest
    with pytest.raises(ValueError):
        nw_oracle(np.zeros(2), np.zeros((0, 2)), np.zeros((0, 2)))
