"""Interview-item selection algorithms.

Forward greedy (FG) grows the item set by the largest drop in the objective;
backward greedy (BG) starts from the whole candidate pool and repeatedly drops
the item whose removal hurts least.  The ``A`` prefix marks the lazy
(priority-queue) variants.  Suffix ``1`` uses one shared noise level for every
item, suffix ``2`` the per-item noise levels.  PI, RS, HV, Ent and Ent0 are the
usual heuristic baselines.
"""
import csv
import heapq
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import MissingMetadataError, NotPositiveDefiniteError
from .objective import ObjectiveState, init_state

logger = logging.getLogger(__name__)

FORWARD = ("FG1", "FG2", "AFG1", "AFG2")
BACKWARD = ("BG1", "BG2", "ABG1", "ABG2")
BASELINES = ("PI", "RS", "HV", "Ent", "Ent0")
ALGORITHMS = FORWARD + BACKWARD + BASELINES

DEFAULT_GAMMA = 1e-6
FALLBACK_GAMMA = 1e-6


@dataclass
class CandidatePool:
    """Items an interview may draw from.

    ``vectors`` holds one latent vector per column (d x n).  The optional
    metadata feeds the baselines: ``counts`` (number of warm ratings),
    ``histograms`` (n x K counts per rating value), ``pred_variance``
    (variance of predicted ratings over warm users) and ``n_users`` (number
    of warm users, needed by Ent0).  Items are kept sorted by id so that
    "first maximum" means "smallest id".
    """

    item_ids: np.ndarray
    vectors: np.ndarray
    sigma: np.ndarray = None
    counts: np.ndarray = None
    histograms: np.ndarray = None
    pred_variance: np.ndarray = None
    n_users: int = None

    def __post_init__(self):
        ids = np.asarray(self.item_ids, dtype=np.int64).reshape(-1)
        V = np.asarray(self.vectors, dtype=float)
        if V.ndim != 2 or V.shape[1] != ids.shape[0]:
            raise ValueError(f"vectors must be d x {ids.shape[0]}, got {V.shape}")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("item ids must be unique")
        sigma = np.ones(len(ids)) if self.sigma is None else self.sigma
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), ids.shape).copy()
        if np.any(~np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("sigma must be positive and finite")
        order = np.argsort(ids, kind="stable")
        self.item_ids = ids[order]
        self.vectors = V[:, order]
        self.sigma = sigma[order]
        if self.counts is not None:
            self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1)[order]
        if self.histograms is not None:
            self.histograms = np.asarray(self.histograms, dtype=np.int64)[order]
            if self.counts is None:
                self.counts = self.histograms.sum(axis=1)
            elif not np.array_equal(self.histograms.sum(axis=1), self.counts):
                raise ValueError("histogram counts must sum to the rating counts")
        if self.pred_variance is not None:
            self.pred_variance = np.asarray(self.pred_variance, dtype=float).reshape(-1)[order]

    def __len__(self):
        return len(self.item_ids)

    @property
    def dim(self):
        return self.vectors.shape[0]

    def shared_sigma(self):
        """Single noise level used by the "1" variants."""
        if np.all(self.sigma == self.sigma[0]):
            return float(self.sigma[0])
        return float(np.mean(self.sigma))


@dataclass
class PlanStep:
    step: int
    item_id: int
    f_value: float
    evals_so_far: int
    elapsed_ms: float
    increment: float = float("nan")
    gamma: float = float("nan")


@dataclass
class InterviewPlan:
    """Outcome of one selection run.

    ``items`` is the selected interview set.  ``steps`` records the run's
    trajectory: one row per added item for forward and baseline methods, one
    row per removed item for backward methods.
    """

    algorithm: str
    budget: int
    items: list
    steps: list = field(default_factory=list)
    total_evals: int = 0
    wall_time_ms: float = 0.0
    gamma: float = DEFAULT_GAMMA
    truncated: bool = False

    @property
    def f_values(self):
        return [s.f_value for s in self.steps]

    @property
    def final_f(self):
        return self.steps[-1].f_value if self.steps else float("nan")

    def write_csv(self, path_or_file):
        header = ["step", "item_id", "f_value", "evals_so_far", "elapsed_ms"]
        rows = [
            [s.step, s.item_id, repr(float(s.f_value)), s.evals_so_far, f"{s.elapsed_ms:.3f}"]
            for s in self.steps
        ]
        if hasattr(path_or_file, "write"):
            writer = csv.writer(path_or_file, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)
        else:
            with open(path_or_file, "w", newline="") as fh:
                self.write_csv(fh)


def _mode_sigma(pool, variance_mode):
    mode = str(variance_mode)
    if mode == "1":
        return np.full(len(pool), pool.shared_sigma())
    if mode == "2":
        return pool.sigma
    raise ValueError(f"variance_mode must be 1 or 2, got {variance_mode!r}")


def _effective_budget(pool, budget):
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if len(pool) == 0:
        raise ValueError("candidate pool is empty")
    return min(int(budget), len(pool)), budget > len(pool)


def _ms_since(t0):
    return (time.perf_counter() - t0) * 1e3


def forward_greedy(pool, budget, variance_mode=2, gamma=DEFAULT_GAMMA, seed=None, *, algorithm=None):
    """Add, one at a time, the item with the largest marginal gain."""
    b, truncated = _effective_budget(pool, budget)
    sigma = _mode_sigma(pool, variance_mode)
    t0 = time.perf_counter()
    state = init_state(gamma, pool.dim)
    remaining = np.arange(len(pool))
    steps = []
    for step in range(1, b + 1):
        gains = state.marginal_gains(pool.vectors[:, remaining], sigma[remaining])
        k = int(np.argmax(gains))
        idx = remaining[k]
        state.commit_add(pool.item_ids[idx], pool.vectors[:, idx], sigma[idx])
        remaining = np.delete(remaining, k)
        steps.append(PlanStep(step, int(pool.item_ids[idx]), state.current_f,
                              state.eval_counter, _ms_since(t0), float(gains[k]), gamma))
    return InterviewPlan(algorithm or f"FG{variance_mode}", budget, list(state.selected), steps,
                         state.eval_counter, _ms_since(t0), gamma, truncated)


def forward_greedy_lazy(pool, budget, variance_mode=2, gamma=DEFAULT_GAMMA, seed=None, *, algorithm=None):
    """Forward greedy with lazily refreshed gains kept in a max-priority queue.

    Queue entries are ``(-gain, pool_index, epoch)``; ``epoch`` is the number
    of commits when the gain was computed.  A popped stale entry is
    re-evaluated and accepted only if it still beats the best queued key.
    Because the objective is not supermodular the stale keys are not true
    upper bounds, so the result can differ from eager forward greedy.
    """
    b, truncated = _effective_budget(pool, budget)
    sigma = _mode_sigma(pool, variance_mode)
    t0 = time.perf_counter()
    state = init_state(gamma, pool.dim)
    gains = state.marginal_gains(pool.vectors, sigma)
    heap = [(-float(g), i, 0) for i, g in enumerate(gains)]
    heapq.heapify(heap)
    epoch = 0
    steps = []
    while len(state) < b:
        neg, idx, stamp = heapq.heappop(heap)
        if stamp != epoch:
            g = state.marginal_gains(pool.vectors[:, [idx]], sigma[[idx]])[0]
            neg = -float(g)
            if heap and (neg, idx) > heap[0][:2]:
                heapq.heappush(heap, (neg, idx, epoch))
                continue
        state.commit_add(pool.item_ids[idx], pool.vectors[:, idx], sigma[idx])
        epoch += 1
        steps.append(PlanStep(epoch, int(pool.item_ids[idx]), state.current_f,
                              state.eval_counter, _ms_since(t0), -neg, gamma))
    return InterviewPlan(algorithm or f"AFG{variance_mode}", budget, list(state.selected), steps,
                         state.eval_counter, _ms_since(t0), gamma, truncated)


def _backward_gamma(pool, variance_mode, gamma):
    if gamma is not None:
        return float(gamma)
    if str(variance_mode) == "1" and len(pool) >= pool.dim:
        if np.linalg.matrix_rank(pool.vectors) == pool.dim:
            return 0.0
    return DEFAULT_GAMMA


def _start_backward(pool, budget, variance_mode, gamma):
    b, truncated = _effective_budget(pool, budget)
    sigma = _mode_sigma(pool, variance_mode)
    gamma = _backward_gamma(pool, variance_mode, gamma)
    try:
        state = ObjectiveState.from_items(pool.item_ids, pool.vectors, sigma, gamma)
    except np.linalg.LinAlgError:
        if gamma > 0:
            raise
        state = ObjectiveState.from_items(pool.item_ids, pool.vectors, sigma, FALLBACK_GAMMA)
    return b, truncated, state


def _fall_back(state):
    """All removals are singular under gamma = 0: continue with a small ridge."""
    if state.gamma > 0:
        raise NotPositiveDefiniteError("no item can be removed without making the Gram matrix singular")
    logger.info("backward greedy: switching gamma 0 -> %g with %d items left", FALLBACK_GAMMA, len(state))
    state.set_gamma(FALLBACK_GAMMA)


def _selected_sorted(state):
    return sorted(state.selected)


def backward_greedy(pool, budget, variance_mode=2, gamma=None, *, algorithm=None):
    """Drop, one at a time, the item whose removal increases f the least.

    ``gamma=None`` picks 0 for the shared-noise variant when the pool spans
    R^d (the unregularised objective) and 1e-6 otherwise.  Under gamma = 0
    removals that would make the Gram matrix singular are skipped; once no
    removal is possible the search continues with gamma = 1e-6.
    """
    t0 = time.perf_counter()
    b, truncated, state = _start_backward(pool, budget, variance_mode, gamma)
    steps = []
    while len(state) > b:
        ids = _selected_sorted(state)
        costs = state.removal_costs(ids)
        k = int(np.argmin(costs))
        if not np.isfinite(costs[k]):
            _fall_back(state)
            continue
        state.commit_remove(ids[k])
        steps.append(PlanStep(len(steps) + 1, ids[k], state.current_f, state.eval_counter,
                              _ms_since(t0), float(costs[k]), state.gamma))
    return InterviewPlan(algorithm or f"BG{variance_mode}", budget, _selected_sorted(state), steps,
                         state.eval_counter, _ms_since(t0), state.gamma, truncated)


def backward_greedy_lazy(pool, budget, variance_mode=2, gamma=None, *, algorithm=None):
    """Backward greedy with a min-priority queue of stale removal costs."""
    t0 = time.perf_counter()
    b, truncated, state = _start_backward(pool, budget, variance_mode, gamma)
    ids = _selected_sorted(state)
    costs = state.removal_costs(ids) if len(ids) > b else []
    heap = [(float(c), i, 0) for i, c in zip(ids, costs)]
    heapq.heapify(heap)
    epoch = 0
    steps = []
    while len(state) > b:
        cost, item, stamp = heapq.heappop(heap)
        if stamp != epoch:
            cost = state.removal_cost(item)
            if heap and (cost, item) > heap[0][:2]:
                heapq.heappush(heap, (cost, item, epoch))
                continue
        if not math.isfinite(cost):
            _fall_back(state)
            epoch += 1
            heapq.heappush(heap, (cost, item, -1))
            continue
        state.commit_remove(item)
        epoch += 1
        steps.append(PlanStep(len(steps) + 1, item, state.current_f, state.eval_counter,
                              _ms_since(t0), cost, state.gamma))
    return InterviewPlan(algorithm or f"ABG{variance_mode}", budget, _selected_sorted(state), steps,
                         state.eval_counter, _ms_since(t0), state.gamma, truncated)


def entropy_bits(histograms):
    """Shannon entropy (base 2) of each row of a count histogram."""
    h = np.atleast_2d(np.asarray(histograms, dtype=float))
    totals = h.sum(axis=1, keepdims=True)
    p = np.divide(h, totals, out=np.zeros_like(h), where=totals > 0)
    logs = np.log2(p, out=np.zeros_like(p), where=p > 0)
    return -(p * logs).sum(axis=1)


def _require(pool, attr, method):
    if getattr(pool, attr) is None:
        raise MissingMetadataError(f"{method} needs pool.{attr}")
    return getattr(pool, attr)


def _rank_desc(scores, ids):
    # descending score, ties by smallest id
    return np.lexsort((ids, -np.asarray(scores, dtype=float)))


def baseline_select(pool, budget, method, model=None, seed=None, gamma=DEFAULT_GAMMA):
    """Heuristic baselines.

    PI  most-rated items;  RS  uniform sample without replacement;
    HV  largest variance of predicted ratings over warm users;
    Ent largest entropy of the observed rating histogram;
    Ent0 entropy of the histogram extended by an "unrated" bucket counting
    the warm users who did not rate the item.

    ``model`` is an optional fitted factor model used to derive HV
    variances when the pool does not carry them.
    """
    b, truncated = _effective_budget(pool, budget)
    t0 = time.perf_counter()
    if method == "PI":
        order = _rank_desc(_require(pool, "counts", method), pool.item_ids)
    elif method == "RS":
        rng = np.random.default_rng(seed)
        order = rng.choice(len(pool), size=b, replace=False)
    elif method == "HV":
        var = pool.pred_variance
        if var is None and model is not None:
            var = prediction_variance(model.U, pool.vectors)
        if var is None:
            raise MissingMetadataError("HV needs pool.pred_variance or a model")
        order = _rank_desc(var, pool.item_ids)
    elif method == "Ent":
        order = _rank_desc(entropy_bits(_require(pool, "histograms", method)), pool.item_ids)
    elif method == "Ent0":
        hist = _require(pool, "histograms", method)
        n_users = _require(pool, "n_users", method)
        unrated = n_users - hist.sum(axis=1)
        if np.any(unrated < 0):
            raise ValueError("n_users is smaller than an item's rating count")
        order = _rank_desc(entropy_bits(np.column_stack([unrated, hist])), pool.item_ids)
    else:
        raise ValueError(f"unknown baseline {method!r}")
    order = np.asarray(order)[:b]
    state = init_state(gamma, pool.dim)
    steps = []
    for step, idx in enumerate(order, start=1):
        state.commit_add(pool.item_ids[idx], pool.vectors[:, idx], pool.sigma[idx])
        steps.append(PlanStep(step, int(pool.item_ids[idx]), state.current_f, 0, _ms_since(t0),
                              gamma=gamma))
    return InterviewPlan(method, budget, list(state.selected), steps, 0, _ms_since(t0), gamma, truncated)


def prediction_variance(user_factors, item_vectors):
    """Population variance over users of U_i^T V_j, for every item column."""
    preds = np.asarray(user_factors, dtype=float).T @ np.asarray(item_vectors, dtype=float)
    return preds.var(axis=0)


def select(pool, budget, algorithm, gamma=DEFAULT_GAMMA, seed=None, model=None):
    """Run any of the thirteen algorithms by name."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}; choose from {', '.join(ALGORITHMS)}")
    if algorithm in BASELINES:
        return baseline_select(pool, budget, algorithm, model=model, seed=seed, gamma=gamma)
    mode = algorithm[-1]
    if algorithm in ("FG1", "FG2"):
        return forward_greedy(pool, budget, mode, gamma, seed, algorithm=algorithm)
    if algorithm in ("AFG1", "AFG2"):
        return forward_greedy_lazy(pool, budget, mode, gamma, seed, algorithm=algorithm)
    bg_gamma = None if mode == "1" else gamma
    if algorithm in ("BG1", "BG2"):
        return backward_greedy(pool, budget, mode, bg_gamma, algorithm=algorithm)
    return backward_greedy_lazy(pool, budget, mode, bg_gamma, algorithm=algorithm)


def log_divergence(plain, accelerated):
    """Log when a lazy variant picked a different item set than its eager twin."""
    if sorted(plain.items) != sorted(accelerated.items):
        rel = (accelerated.final_f - plain.final_f) / abs(plain.final_f)
        logger.warning("%s diverged from %s (relative f difference %.3e)",
                       accelerated.algorithm, plain.algorithm, rel)
        return True
    return False


class InterviewSelector(BaseEstimator):
    """scikit-learn style wrapper around :func:`select`.

    ``fit`` takes item latent vectors as rows (n_items x d), i.e. the
    transpose of the latent matrix V; ``transform`` returns the rows of the
    selected items.

    Examples
    --------
    >>> import numpy as np
    >>> X = np.eye(3)
    >>> InterviewSelector(algorithm="FG2", budget=2).fit(X).selected_
    [0, 1]
    """

    def __init__(self, algorithm="FG2", budget=10, gamma=DEFAULT_GAMMA, seed=None):
        self.algorithm = algorithm
        self.budget = budget
        self.gamma = gamma
        self.seed = seed

    def fit(self, X, y=None, *, sigma=None, item_ids=None, counts=None, histograms=None,
            pred_variance=None, n_users=None):
        X = check_array(X, ensure_min_features=1)
        ids = np.arange(X.shape[0]) if item_ids is None else np.asarray(item_ids)
        pool = CandidatePool(ids, X.T, sigma, counts, histograms, pred_variance, n_users)
        self.plan_ = select(pool, self.budget, self.algorithm, self.gamma, self.seed)
        self.selected_ = [int(i) for i in self.plan_.items]
        position = {int(i): k for k, i in enumerate(ids)}
        self.support_ = np.array([position[i] for i in self.selected_], dtype=np.int64)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "support_")
        X = check_array(X)
        return X[self.support_]

    def fit_transform(self, X, y=None, **fit_params):
        return self.fit(X, y, **fit_params).transform(X)
