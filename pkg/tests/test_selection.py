import io
import itertools
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldstart.exceptions import MissingMetadataError
from coldstart.gadgets import X3CInstance, build_gadget
from coldstart.linalg import objective_f
from coldstart.selection import (
    ALGORITHMS,
    BACKWARD,
    FORWARD,
    CandidatePool,
    InterviewSelector,
    backward_greedy,
    backward_greedy_lazy,
    baseline_select,
    entropy_bits,
    forward_greedy,
    forward_greedy_lazy,
    log_divergence,
    select,
)

GREEDY = FORWARD + BACKWARD


def toy_pool():
    V = np.array([[2.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    return CandidatePool([0, 1, 2], V, 1.0)


def random_pool(rng, n=30, d=5, meta=False):
    V = rng.normal(size=(d, n))
    sigma = rng.uniform(0.5, 2.0, n)
    kw = {}
    if meta:
        hist = rng.integers(0, 20, size=(n, 5))
        kw = dict(histograms=hist, pred_variance=rng.random(n), n_users=200)
    return CandidatePool(np.arange(n), V, sigma, **kw)


def plan_f(pool, items, sigma=None, gamma=1e-6):
    idx = np.searchsorted(pool.item_ids, items)
    sig = pool.sigma[idx] if sigma is None else np.full(len(idx), sigma)
    return objective_f(pool.vectors[:, idx], sig, gamma)


@pytest.mark.parametrize("algorithm", GREEDY)
def test_toy_pool_global_optimum(algorithm):
    plan = select(toy_pool(), 2, algorithm)
    assert sorted(plan.items) == [0, 2]
    assert plan_f(toy_pool(), plan.items) == pytest.approx(1.25, rel=1e-5)
    best = min(plan_f(toy_pool(), list(c)) for c in itertools.combinations(range(3), 2))
    assert best == pytest.approx(1.25)


@pytest.mark.parametrize("algorithm", FORWARD)
def test_full_budget_takes_everything(algorithm, rng):
    pool = random_pool(rng, n=8, d=3)
    plan = select(pool, 8, algorithm)
    assert sorted(plan.items) == list(range(8))
    assert plan.final_f == pytest.approx(objective_f(pool.vectors, pool.sigma if algorithm.endswith("2")
                                                     else pool.shared_sigma(), 1e-6), rel=1e-8)


@pytest.mark.parametrize("algorithm", BACKWARD)
def test_backward_full_budget_no_removals(algorithm, rng):
    pool = random_pool(rng, n=8, d=3)
    plan = select(pool, 8, algorithm)
    assert sorted(plan.items) == list(range(8)) and plan.steps == [] and plan.total_evals == 0


def gadget_pool():
    inst = X3CInstance(2, ((0, 1, 2), (3, 4, 5), (2, 3, 4)))
    g = build_gadget(inst, 12)
    return g, CandidatePool(np.arange(g.W.shape[1]), g.W, 1.0)


@pytest.mark.parametrize("algorithm", GREEDY)
def test_gadget_pool_reaches_theta(algorithm):
    g, pool = gadget_pool()
    plan = select(pool, g.budget, algorithm)
    assert g.theta == pytest.approx(2 / 15 + 4 / 12)
    assert objective_f(g.W[:, plan.items]) == pytest.approx(g.theta, abs=1e-6)
    assert 2 not in plan.items  # the overlapping set is left out


def test_plan_invariants(rng):
    pool = random_pool(rng)
    for algorithm in FORWARD:
        plan = select(pool, 8, algorithm)
        f = plan.f_values
        assert len(plan.items) == 8 == len(set(plan.items))
        assert all(b <= a + 1e-12 for a, b in zip(f, f[1:]))
    for algorithm in BACKWARD:
        plan = select(pool, 8, algorithm)
        prev = None
        for step in plan.steps:
            if prev is not None and step.gamma == prev.gamma:
                assert step.f_value - prev.f_value == pytest.approx(step.increment, rel=1e-8, abs=1e-10)
            prev = step
        assert len(plan.items) == 8


def test_two_variants_reduce_to_one_variants(rng):
    pool = CandidatePool(np.arange(20), rng.normal(size=(4, 20)), 0.7)
    assert forward_greedy(pool, 6, 2).items == forward_greedy(pool, 6, 1).items
    assert forward_greedy_lazy(pool, 6, 2).items == forward_greedy_lazy(pool, 6, 1).items
    # the shared-noise backward variants run unregularised on a spanning pool
    assert backward_greedy(pool, 6, 2, gamma=0.0).items == select(pool, 6, "BG1").items
    assert backward_greedy_lazy(pool, 6, 2, gamma=0.0).items == select(pool, 6, "ABG1").items


def test_identical_vectors_lazy_equals_eager():
    V = np.tile(np.array([[1.0], [2.0], [0.5]]), (1, 10))
    pool = CandidatePool(np.arange(10), V, 1.0)
    assert forward_greedy(pool, 4).items == forward_greedy_lazy(pool, 4).items
    assert backward_greedy(pool, 4).items == backward_greedy_lazy(pool, 4).items


def test_orthogonal_pool_lazy_sequence_identical(rng):
    d = 8
    V = np.diag(rng.uniform(0.5, 3.0, d))
    V = np.hstack([V, np.diag(rng.uniform(0.5, 3.0, d))])
    pool = CandidatePool(np.arange(2 * d), V, rng.uniform(0.5, 2.0, 2 * d))
    assert forward_greedy(pool, 10).items == forward_greedy_lazy(pool, 10).items


def test_lazy_forward_close_to_eager_on_random_pools():
    worst = 0.0
    for t in range(100):
        pool = random_pool(np.random.default_rng([30, t]), n=30, d=5)
        for mode in (1, 2):
            eager = forward_greedy(pool, 8, mode)
            lazy = forward_greedy_lazy(pool, 8, mode)
            assert lazy.total_evals <= eager.total_evals
            sig = None if mode == 2 else pool.shared_sigma()
            fe, fl = plan_f(pool, eager.items, sig), plan_f(pool, lazy.items, sig)
            worst = max(worst, (fl - fe) / fe)
    assert worst <= 0.05


def test_lazy_backward_close_to_eager_on_random_pools():
    worst = 0.0
    for t in range(100):
        pool = random_pool(np.random.default_rng([31, t]), n=30, d=5)
        for mode in (1, 2):
            eager = backward_greedy(pool, 8, mode)
            lazy = backward_greedy_lazy(pool, 8, mode)
            assert lazy.total_evals <= eager.total_evals
            sig = None if mode == 2 else pool.shared_sigma()
            fe, fl = plan_f(pool, eager.items, sig), plan_f(pool, lazy.items, sig)
            worst = max(worst, (fl - fe) / fe)
    assert worst <= 0.05


@pytest.mark.slow
def test_lazy_backward_faster_on_large_pool():
    rng = np.random.default_rng(7)
    pool = CandidatePool(np.arange(2000), rng.normal(size=(20, 2000)), rng.uniform(0.5, 2.0, 2000))
    t0 = time.perf_counter()
    backward_greedy(pool, 10)
    eager = time.perf_counter() - t0
    t0 = time.perf_counter()
    backward_greedy_lazy(pool, 10)
    lazy = time.perf_counter() - t0
    assert lazy < eager


def test_backward_small_pool_gap_reported(rng):
    pool = random_pool(rng, n=8, d=3)
    plan = backward_greedy(pool, 3)
    best = min(plan_f(pool, list(c)) for c in itertools.combinations(range(8), 3))
    gap = (plan_f(pool, plan.items) - best) / best
    assert gap >= -1e-9
    print(f"backward greedy gap on n=8, d=3, b=3: {gap:.4%}")


def test_forward_greedy_within_factor_on_small_instances():
    within = 0
    for t in range(200):
        r = np.random.default_rng([40, t])
        d = int(r.integers(1, 5))
        n = int(r.integers(max(2, d), 11))
        b = int(r.integers(1, min(4, n - 1) + 1))
        pool = CandidatePool(np.arange(n), r.normal(size=(d, n)), r.uniform(0.5, 2.0, n))
        best = min(plan_f(pool, list(c)) for c in itertools.combinations(range(n), b))
        within += plan_f(pool, forward_greedy(pool, b).items) <= 1.5 * best
    assert within >= 190


def test_budget_larger_than_pool_truncates(rng):
    pool = random_pool(rng, n=5, d=3)
    plan = select(pool, 9, "FG2")
    assert plan.truncated and len(plan.items) == 5
    with pytest.raises(ValueError):
        select(pool, 0, "FG2")


def test_ties_break_by_smallest_id():
    V = np.array([[1.0, 1.0, 1.0]])
    pool = CandidatePool([7, 3, 5], V, 1.0, counts=[4, 4, 4], histograms=[[1, 3], [1, 3], [1, 3]])
    assert forward_greedy(pool, 1).items == [3]
    assert forward_greedy_lazy(pool, 1).items == [3]
    # backward greedy removes the smallest id among equal costs
    assert sorted(backward_greedy(pool, 2, gamma=1e-6).items) == [5, 7]
    assert select(pool, 2, "PI").items == [3, 5]
    assert select(pool, 2, "Ent").items == [3, 5]


def test_entropy_values():
    assert entropy_bits([[0, 0, 10, 0, 0]])[0] == 0.0
    assert entropy_bits([[4, 4, 4, 4, 4]])[0] == pytest.approx(np.log2(5), abs=1e-12)
    assert entropy_bits([[4, 4, 4, 4, 4]])[0] == pytest.approx(2.3219, abs=1e-4)


def test_entropy_baselines_rank():
    hist = np.array([[0, 0, 9, 0, 0], [2, 2, 2, 2, 2], [1, 1, 5, 1, 1]])
    pool = CandidatePool([0, 1, 2], np.eye(3), 1.0, histograms=hist, n_users=10)
    assert baseline_select(pool, 3, "Ent").items == [1, 2, 0]
    # with the unrated bucket the rarely-rated item 0 (one unrated) gains entropy
    assert baseline_select(pool, 3, "Ent0").items[0] == 1


def test_popular_and_variance_baselines(rng):
    pool = random_pool(rng, meta=True)
    pi = baseline_select(pool, 5, "PI").items
    assert pi[0] == int(pool.item_ids[np.argmax(pool.counts)])
    hv = baseline_select(pool, 5, "HV").items
    assert hv == [int(i) for i in pool.item_ids[np.argsort(-pool.pred_variance, kind="stable")[:5]]]


def test_hv_from_model(rng):
    class Model:
        U = rng.normal(size=(3, 40))

    pool = random_pool(rng, n=10, d=3)
    plan = baseline_select(pool, 3, "HV", model=Model())
    var = (Model.U.T @ pool.vectors).var(axis=0)
    assert plan.items == list(np.argsort(-var)[:3])


def test_missing_metadata_named(rng):
    pool = random_pool(rng)
    for method in ("PI", "Ent", "Ent0", "HV"):
        with pytest.raises(MissingMetadataError, match=method):
            baseline_select(pool, 3, method)


def test_random_selection_reproducible_and_uniform(rng):
    pool = random_pool(rng, n=20)
    assert select(pool, 5, "RS", seed=3).items == select(pool, 5, "RS", seed=3).items
    runs = 2000
    hits = np.zeros(20)
    for s in range(runs):
        hits[select(pool, 5, "RS", seed=s).items] += 1
    p = 5 / 20
    se = np.sqrt(p * (1 - p) / runs)
    assert np.all(np.abs(hits / runs - p) <= 3 * se)


def test_plan_csv_header(rng):
    buf = io.StringIO()
    select(random_pool(rng), 3, "FG2").write_csv(buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "step,item_id,f_value,evals_so_far,elapsed_ms"
    assert len(lines) == 4


def test_unknown_algorithm(rng):
    with pytest.raises(ValueError, match="unknown algorithm"):
        select(random_pool(rng), 3, "XG9")
    assert len(ALGORITHMS) == 13


def test_log_divergence_flags_difference(rng, caplog):
    pool = random_pool(rng)
    a = forward_greedy(pool, 3)
    assert not log_divergence(a, a)
    b = select(pool, 3, "RS", seed=1)
    b.algorithm = "AFG2"
    assert log_divergence(a, b) == (sorted(a.items) != sorted(b.items))


def test_pool_validation():
    with pytest.raises(ValueError):
        CandidatePool([0, 0], np.eye(2), 1.0)
    with pytest.raises(ValueError):
        CandidatePool([0, 1], np.eye(2), [1.0, -1.0])
    with pytest.raises(ValueError):
        CandidatePool([0, 1], np.eye(2), 1.0, counts=[3, 3], histograms=[[1, 1], [3, 0]])
    pool = CandidatePool([5, 2], np.array([[1.0, 2.0]]), [1.0, 3.0])
    assert list(pool.item_ids) == [2, 5] and list(pool.sigma) == [3.0, 1.0]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_selector_estimator_matches_functional(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(15, 4))
    est = InterviewSelector(algorithm="FG2", budget=5).fit(X)
    pool = CandidatePool(np.arange(15), X.T, 1.0)
    assert est.selected_ == forward_greedy(pool, 5).items
    np.testing.assert_array_equal(est.transform(X), X[est.support_])
