import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from impalloc import kernels
from impalloc.kernels import python as pyk

BACKENDS = [pyk] + ([kernels.compiled] if kernels.compiled is not None else [])
needs_compiled = pytest.mark.skipif(kernels.compiled is None, reason="extension not built")


def brute_assignment_value(u, cap):
    n, m = u.shape
    best = 0.0
    for choice in itertools.product(range(-1, m), repeat=n):
        used = np.bincount([c for c in choice if c >= 0], minlength=m)
        if np.any(used > cap):
            continue
        best = max(best, sum(u[i, c] for i, c in enumerate(choice) if c >= 0))
    return best


def assignment_value(u, a):
    return float(sum(u[i, j] for i, j in enumerate(a) if j >= 0))


def test_backend_flag():
    assert kernels.BACKEND in ("python", "cython")


@pytest.mark.parametrize("mod", BACKENDS)
class TestAuctionPass:
    def test_empty_block(self, mod):
        w, c, qv, rtb, h = mod.auction_pass(np.zeros((0, 2)), np.ones(2), np.zeros(2), np.zeros(0))
        assert w.size == 0 and c.tolist() == [0, 0] and qv == rtb == h == 0.0

    def test_no_contracts(self, mod):
        b2 = np.array([0.2, 0.5])
        w, c, qv, rtb, _ = mod.auction_pass(np.zeros((2, 0)), np.zeros(0), np.zeros(0), b2)
        assert w.tolist() == [-1, -1] and rtb == pytest.approx(0.7)

    def test_small(self, mod):
        q = np.array([[0.2], [0.1]])
        w, c, qv, rtb, h = mod.auction_pass(q, np.ones(1), np.array([0.3]), np.array([0.3, 0.6]))
        assert w.tolist() == [0, -1] and c.tolist() == [1]
        assert qv == pytest.approx(0.2) and rtb == pytest.approx(0.6) and h == pytest.approx(0.2)


@needs_compiled
@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 60), m=st.integers(0, 5))
def test_auction_backends_agree(seed, n, m):
    rng = np.random.default_rng(seed)
    q, lam = rng.random((n, m)), rng.uniform(0, 2, m)
    alpha, b2 = rng.uniform(-1, 1, m), rng.uniform(0, 2, n)
    a = pyk.auction_pass(q, lam, alpha, b2)
    b = kernels.compiled.auction_pass(q, lam, alpha, b2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.allclose(a[2:], b[2:], rtol=1e-12, atol=1e-12)


@needs_compiled
@settings(max_examples=80, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 60), m=st.integers(0, 5))
def test_msvv_backends_agree(seed, n, m):
    rng = np.random.default_rng(seed)
    q, lam, pen = rng.random((n, m)), rng.uniform(0, 2, m), rng.uniform(1, 3, m)
    b2 = rng.uniform(0, 2, n)
    demand = rng.integers(0, 10, m).astype(float)
    d1, d2 = np.zeros(m, dtype=np.int64), np.zeros(m, dtype=np.int64)
    a = pyk.msvv_pass(q, lam, pen, b2, demand, d1)
    b = kernels.compiled.msvv_pass(q, lam, pen, b2, demand, d2)
    assert np.array_equal(a[0], b[0]) and np.array_equal(d1, d2)
    assert a[1] == pytest.approx(b[1]) and a[2] == pytest.approx(b[2])


@pytest.mark.parametrize("mod", BACKENDS)
class TestMsvvPass:
    def test_full_contract_bids_zero(self, mod):
        q = np.array([[1.0]])
        delivered = np.array([3], dtype=np.int64)
        w, _, rtb = mod.msvv_pass(q, np.ones(1), np.ones(1), np.array([0.01]), np.array([3.0]), delivered)
        assert w.tolist() == [-1] and rtb == pytest.approx(0.01)

    def test_fresh_contract_discount(self, mod):
        # bid (1 + 0) * (1 - e^-1) = 0.63212 against rtb 1 * 0.63212: tie goes to RTB
        q = np.zeros((1, 1))
        w, _, _ = mod.msvv_pass(q, np.ones(1), np.ones(1), np.array([1.0]), np.array([5.0]), np.zeros(1, dtype=np.int64))
        assert w.tolist() == [-1]
        w, _, _ = mod.msvv_pass(q, np.ones(1), np.ones(1), np.array([0.99]), np.array([5.0]), np.zeros(1, dtype=np.int64))
        assert w.tolist() == [0]


@pytest.mark.parametrize("mod", BACKENDS)
class TestTransport:
    def test_brute_force(self, mod):
        rng = np.random.default_rng(11)
        for _ in range(150):
            n, m = int(rng.integers(1, 7)), int(rng.integers(1, 4))
            u = rng.normal(0, 1, (n, m))
            cap = rng.integers(0, 4, m)
            a = mod.transport_ssp(u, cap)
            assert np.all(np.bincount(a[a >= 0], minlength=m) <= cap)
            assert assignment_value(u, a) == pytest.approx(brute_assignment_value(u, cap), abs=1e-9)

    def test_empty(self, mod):
        assert mod.transport_ssp(np.zeros((0, 2)), np.array([1, 1])).size == 0
        assert mod.transport_ssp(np.zeros((3, 0)), np.zeros(0, dtype=np.int64)).tolist() == [-1] * 3

    def test_warm_start_gives_same_value(self, mod):
        rng = np.random.default_rng(5)
        u = rng.normal(0, 1, (400, 4))
        cap = np.array([30, 60, 10, 80])
        cold = mod.transport_ssp(u, cap)
        warm = mod.transport_ssp(u, cap, np.full(4, 5.0))
        assert assignment_value(u, warm) == pytest.approx(assignment_value(u, cold), rel=1e-12)

    def test_overfull_warm_start_rejected(self, mod):
        u = np.ones((5, 1))
        with pytest.raises(ValueError):
            mod.transport_ssp(u, np.array([2]), np.zeros(1))


@needs_compiled
def test_transport_backends_agree_in_value():
    rng = np.random.default_rng(8)
    u = rng.normal(0, 1, (2000, 6))
    cap = rng.integers(50, 300, 6)
    a = pyk.transport_ssp(u, cap)
    b = kernels.compiled.transport_ssp(u, cap)
    assert assignment_value(u, a) == pytest.approx(assignment_value(u, b), rel=1e-12)


@pytest.mark.parametrize("mod", BACKENDS)
def test_rule_assignment(mod):
    u = np.array([[1.0, 2.0], [0.1, 0.2], [3.0, 0.0]])
    a, best = mod.rule_assignment(u, np.array([0.5, 1.0]))
    assert a.tolist() == [1, -1, 0] and best == pytest.approx([1.0, 0.0, 2.5])
