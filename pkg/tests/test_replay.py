import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from motvla.numerics import Tensor, finite_diff_check, ops
from motvla.numerics.memo import ReplayCache, ReplayDiverged, decision
from motvla.perception.assignment import assignment_margin, hungarian


def _net(p, x):
    h = ops.gelu(ops.linear(x, p["w1"], p["b1"]))
    h = ops.layer_norm(h, p["g"], p["beta"])
    s = ops.softmax_rows(ops.matmul(h, ops.transpose(h, (1, 0))))
    return ops.sum(ops.mul(ops.matmul(s, h), h))


def _params(rng):
    shapes = {"w1": (3, 4), "b1": (4,), "g": (4,), "beta": (4,)}
    return {k: Tensor(rng.standard_normal(s), requires_grad=True, name=k) for k, s in shapes.items()}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000), which=st.sampled_from(["w1", "b1", "g", "beta"]),
       pos=st.integers(0, 11), delta=st.floats(-1.0, 1.0))
def test_propagate_matches_full_evaluation(seed, which, pos, delta):
    rng = np.random.default_rng(seed)
    p, x = _params(rng), Tensor(rng.standard_normal((5, 3)))
    with ReplayCache() as cache:
        out = _net(p, x)
    t = p[which]
    t.data.flat[pos % t.size] += delta
    replayed = cache.propagate(out, [t]).data
    assert replayed.tobytes() == _net(p, x).data.tobytes()


@decision
def _nearest(x: Tensor) -> int:
    return int(np.argmin(x.data))


def _pick_smallest(x):
    return ops.index(ops.scale(x, 2.0), (np.array([_nearest(x)]),))


def test_flipped_decision_raises():
    x = Tensor(np.array([0.0, 1.0, 2.0]), requires_grad=True)
    with ReplayCache() as cache:
        out = _pick_smallest(x)
    x.data[1] = 0.5
    np.testing.assert_array_equal(cache.propagate(out, [x]).data, [0.0])
    x.data[1] = -0.5
    with pytest.raises(ReplayDiverged):
        cache.propagate(out, [x])


def _calls_counter():
    calls = []

    @decision(radius=lambda x: 0.5 * float(np.diff(np.sort(x.data))[0]))
    def nearest(x):
        calls.append(1)
        return int(np.argmin(x.data))

    return nearest, calls


def test_decision_radius_skips_rerun():
    nearest, calls = _calls_counter()
    x = Tensor(np.array([0.0, 1.0, 2.0]), requires_grad=True)
    with ReplayCache() as cache:
        out = ops.index(x, (np.array([nearest(x)]),))
    assert len(calls) == 1
    x.data[0] = 0.3                      # moved less than the radius of 0.5
    cache.propagate(out, [x])
    assert len(calls) == 1
    x.data[0] = 0.9                      # outside the radius: rerun, still the same choice
    cache.propagate(out, [x])
    assert len(calls) == 2


def test_gradcheck_with_and_without_replay_agree():
    rng = np.random.default_rng(3)
    p, x = _params(rng), Tensor(rng.standard_normal((5, 3)))
    a = finite_diff_check(lambda: _net(p, x), p, reuse=True)
    b = finite_diff_check(lambda: _net(p, x), p, reuse=False)
    assert a.passed and b.passed
    for ra, rb in zip(a.params, b.params):
        assert ra.max_err == pytest.approx(rb.max_err, abs=1e-12)


def _brute_margin(cost):
    n, k = cost.shape
    totals = sorted(sum(cost[r, c] for c, r in enumerate(rows)) for rows in itertools.permutations(range(n), k))
    return totals[1] - totals[0] if len(totals) > 1 else np.inf


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 5), k=st.integers(1, 4))
def test_assignment_margin_matches_enumeration(seed, n, k):
    k = min(k, n)
    cost = np.random.default_rng(seed).uniform(0, 3, (n, k))
    assert assignment_margin(cost) == pytest.approx(_brute_margin(cost), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 5), k=st.integers(1, 4))
def test_assignment_stable_inside_margin(seed, n, k):
    k = min(k, n)
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0, 3, (n, k))
    margin = assignment_margin(cost)
    noise = rng.uniform(-1, 1, cost.shape) * 0.99 * min(margin, 10.0) / (2 * k)
    np.testing.assert_array_equal(hungarian(cost + noise)[0], hungarian(cost)[0])
