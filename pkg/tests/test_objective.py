import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldstart.exceptions import NotPositiveDefiniteError
from coldstart.gadgets import counterexample_fixture
from coldstart.linalg import objective_f, trace_of_inverse
from coldstart.objective import REFRESH_EVERY, ObjectiveState, init_state


def test_init_values():
    assert init_state(1.0, 3).current_f == pytest.approx(3.0)
    assert init_state(1e-6, 20).current_f == pytest.approx(2e7)
    s = init_state(0.3, 4)
    assert s.current_f == pytest.approx(trace_of_inverse(0.3 * np.eye(4)), rel=1e-9)
    for bad in (0.0, -1.0):
        with pytest.raises(ValueError):
            init_state(bad, 3)


def test_marginal_gain_hand_computed():
    s = init_state(1.0, 2)
    assert s.marginal_gain(np.array([1.0, 0.0]), 1.0) == pytest.approx(0.5)
    assert s.marginal_gain(np.zeros(2), 1.0) == 0.0
    assert s.eval_counter == 2
    assert s.selected == []


def test_marginal_gain_matches_from_scratch(rng):
    d = 5
    s = init_state(0.1, d)
    V = rng.normal(size=(d, 8))
    sig = rng.uniform(0.5, 2.0, 8)
    for j in range(4):
        s.commit_add(j, V[:, j], sig[j])
    gains = s.marginal_gains(V[:, 4:], sig[4:])
    for k, j in enumerate(range(4, 8)):
        after = objective_f(V[:, list(range(4)) + [j]], np.r_[sig[:4], sig[j]], 0.1)
        assert gains[k] == pytest.approx(s.current_f - after, rel=1e-8, abs=1e-10)


def test_counterexample_add_from_state():
    fx = counterexample_fixture()
    s = ObjectiveState.from_items(range(5), fx.M1, 1.0, 1e-9)
    s.commit_add(99, fx.x, 1.0)
    assert s.current_f == pytest.approx(10.333, abs=1e-2)


def test_add_remove_roundtrip(rng):
    s = init_state(0.5, 3)
    for j in range(3):
        s.commit_add(j, rng.normal(size=3), 1.0)
    f0 = s.current_f
    s.commit_add(10, rng.normal(size=3), 0.8).commit_remove(10)
    assert s.current_f == pytest.approx(f0, abs=1e-8)
    assert s.selected == [0, 1, 2]


def test_random_commit_sequence_matches_scratch(rng):
    d = 4
    s = init_state(0.2, d)
    pool = {j: (rng.normal(size=d), rng.uniform(0.5, 2.0)) for j in range(12)}
    for _ in range(20):
        if s.selected and rng.random() < 0.4:
            s.commit_remove(int(rng.choice(s.selected)))
        else:
            free = [j for j in pool if j not in s]
            j = int(rng.choice(free))
            s.commit_add(j, *pool[j])
        assert s.current_f == pytest.approx(s.from_scratch_f(), rel=1e-7)
        assert s.current_f == pytest.approx(s.gram_inverse.trace(), rel=1e-8)


def test_commit_errors():
    s = init_state(1.0, 2)
    s.commit_add(1, np.ones(2), 1.0)
    with pytest.raises(ValueError):
        s.commit_add(1, np.ones(2), 1.0)
    with pytest.raises(KeyError):
        s.commit_remove(7)
    with pytest.raises(ValueError):
        s.commit_add(2, np.ones(2), 0.0)


def test_remove_refused_when_singular():
    s = ObjectiveState.from_items([0, 1], np.eye(2), 1.0, 0.0)
    with pytest.raises(NotPositiveDefiniteError):
        s.commit_remove(0)
    assert s.selected == [0, 1]
    assert np.isinf(s.removal_cost(0))


def test_removal_cost_matches_scratch(rng):
    V = rng.normal(size=(3, 6))
    s = ObjectiveState.from_items(range(6), V, 1.0, 0.0)
    costs = s.removal_costs(range(6))
    for j in range(6):
        rest = [k for k in range(6) if k != j]
        assert costs[j] == pytest.approx(objective_f(V[:, rest]) - s.current_f, rel=1e-8)


def test_near_singular_removal_uses_direct_path():
    # the third item is almost parallel to the first: removing either one
    # leaves a nearly singular Gram matrix with a tiny ridge
    V = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1e-5]])
    s = ObjectiveState.from_items(range(3), V, [1e-3, 1.0, 1e-3], 1e-6)
    costs = s.removal_costs(range(3))
    for j in range(3):
        rest = [k for k in range(3) if k != j]
        direct = objective_f(V[:, rest], np.array([1e-3, 1.0, 1e-3])[rest], 1e-6) - s.current_f
        assert costs[j] == pytest.approx(direct, rel=1e-6)


def test_periodic_refresh_bounds_drift(rng):
    d = 6
    s = init_state(1e-3, d)
    for j in range(3 * REFRESH_EVERY):
        s.commit_add(j, rng.normal(size=d), rng.uniform(0.5, 2.0))
    assert s.current_f == pytest.approx(s.from_scratch_f(), rel=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_gains_nonnegative_and_order_free(d, seed):
    r = np.random.default_rng(seed)
    V = r.normal(size=(d, 6))
    sig = r.uniform(0.5, 2.0, 6)
    s = init_state(1e-2, d)
    for j in range(6):
        assert s.marginal_gain(V[:, j], sig[j]) >= -1e-9
        s.commit_add(j, V[:, j], sig[j])
    t = init_state(1e-2, d)
    for j in r.permutation(6):
        t.commit_add(int(j), V[:, j], sig[j])
    assert t.current_f == pytest.approx(s.current_f, rel=1e-7)


def test_eval_counter_monotone(rng):
    s = init_state(1.0, 3)
    seen = [s.eval_counter]
    for j in range(5):
        s.marginal_gains(rng.normal(size=(3, 4)), 1.0)
        s.commit_add(j, rng.normal(size=3), 1.0)
        seen.append(s.eval_counter)
    assert seen == sorted(seen) and seen[-1] == 20


def test_copy_is_independent():
    s = init_state(1.0, 2)
    c = s.copy().commit_add(0, np.ones(2), 1.0)
    assert s.selected == [] and c.selected == [0]
    assert s.current_f == pytest.approx(2.0)
