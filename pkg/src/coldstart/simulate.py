"""Cold-start interview simulation.

A trained factor model is split into warm users (used for training and the
noise model) and cold users.  Each cold user gets a candidate pool and a
disjoint test set; a selection algorithm picks the interview from the pool
only, the user's ratings on the interview are revealed, a ridge estimate of
the profile is formed and scored against the test set and the reference
profile.
"""
import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve

from . import pmf
from .dataio import split_warm_cold
from .linalg import cholesky_factor
from .pmf import ColdUserProfile
from .selection import (
    ALGORITHMS,
    BACKWARD,
    BASELINES,
    DEFAULT_GAMMA,
    CandidatePool,
    prediction_variance,
    select,
)

log = logging.getLogger(__name__)

SETTINGS = ("ideal", "real")
SIGMA_GRID = tuple(0.25 * k for k in range(1, 9))
RESULT_HEADER = ["dataset", "setting", "algorithm", "budget", "n_users", "mean_rmse", "std_rmse",
                 "mean_profile_err", "std_profile_err", "mean_runtime_ms", "mean_evals"]


def ridge_estimate(v_b, c_b, ratings, gamma):
    """Closed-form ``(gamma I + V C^-2 V^T)^-1 V C^-2 r`` via a Cholesky solve.

    ``c_b`` holds per-item noise standard deviations (scalar allowed).
    """
    v_b = np.asarray(v_b, dtype=float)
    if v_b.ndim != 2 or v_b.shape[1] < 1:
        raise ValueError("need at least one item")
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    ratings = np.asarray(ratings, dtype=float).reshape(-1)
    w = 1.0 / np.broadcast_to(np.asarray(c_b, dtype=float), ratings.shape) ** 2
    A = gamma * np.eye(v_b.shape[0]) + (v_b * w) @ v_b.T
    u = cho_solve((cholesky_factor(A), True), v_b @ (w * ratings))
    return ColdUserProfile(u, "ridge")


@dataclass
class ColdUserTrial:
    """One cold user's candidate pool and test set.

    Ratings on candidate items are only handed out through :meth:`reveal`,
    which records every request in ``access_log`` and refuses test items.
    """

    user: int
    true_profile: ColdUserProfile
    candidate_items: np.ndarray
    test_items: np.ndarray
    setting: str
    seed: int
    candidate_ratings: np.ndarray
    test_ratings: np.ndarray
    access_log: list = field(default_factory=list)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        self.candidate_items = np.asarray(self.candidate_items, dtype=np.int64)
        self.test_items = np.asarray(self.test_items, dtype=np.int64)
        self.candidate_ratings = np.asarray(self.candidate_ratings, dtype=float)
        self.test_ratings = np.asarray(self.test_ratings, dtype=float)
        if np.intersect1d(self.candidate_items, self.test_items).size:
            raise ValueError("candidate pool and test set overlap")
        if len(self.candidate_items) != len(self.candidate_ratings) or len(self.test_items) != len(self.test_ratings):
            raise ValueError("items and ratings must align")
        self._ratings = dict(zip(self.candidate_items.tolist(), self.candidate_ratings.tolist()))

    def reveal(self, items):
        items = [int(i) for i in items]
        self.access_log.extend(items)
        missing = [i for i in items if i not in self._ratings]
        if missing:
            raise PermissionError(f"items {missing} are not in the candidate pool")
        return np.array([self._ratings[i] for i in items])


@dataclass
class TrialResult:
    algorithm: str
    budget: int
    prediction_rmse: float
    profile_error: float
    runtime_ms: float
    evals: int
    truncated: bool = False
    items: list = field(default_factory=list)

    def __post_init__(self):
        for name in ("prediction_rmse", "profile_error"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {value}")


@dataclass
class PoolMetadata:
    """Warm-data statistics the baselines rank by, indexed by item."""

    counts: np.ndarray
    histograms: np.ndarray
    pred_variance: np.ndarray
    n_users: int

    @classmethod
    def from_warm(cls, model, warm):
        counts = warm.item_counts()
        r = np.rint(warm.ratings).astype(np.int64)
        lo = int(np.rint(warm.scale[0])) if warm.scale is not None else (int(r.min()) if len(r) else 0)
        hi = int(np.rint(warm.scale[1])) if warm.scale is not None else (int(r.max()) if len(r) else 0)
        r = np.clip(r, lo, hi) - lo
        hist = np.zeros((warm.n_items, hi - lo + 1), dtype=np.int64)
        np.add.at(hist, (warm.items, r), 1)
        users = warm.rated_users()
        var = prediction_variance(model.U[:, users], model.V)
        return cls(counts, hist, var, len(users))


def make_trial(user, model, dataset, warm_items, setting, seed, true_profile=None,
               candidate_fraction=0.5, fold_reg=0.1):
    """Split a cold user's items into pool and test set.

    Ideal setting: pool and test set come from ``warm_items`` and ratings
    are ``V_j^T u`` exactly.  Real setting: both come from the items the user
    rated, with the user's own ratings.  The reference profile is
    ``true_profile`` if given, else the fold-in over all of the user's
    ratings.
    """
    rng = np.random.default_rng(seed)
    items, ratings = dataset.user_ratings(user)
    if true_profile is None:
        true_profile = pmf.fold_in_user(model, list(zip(items.tolist(), ratings.tolist())),
                                        reg=fold_reg, seed=seed)
    u = true_profile.u
    if setting == "ideal":
        universe = np.asarray(warm_items, dtype=np.int64)
        values = model.V[:, universe].T @ u
    else:
        universe, values = items, ratings
    perm = rng.permutation(len(universe))
    n_cand = int(round(candidate_fraction * len(universe)))
    cand, test = np.sort(perm[:n_cand]), np.sort(perm[n_cand:])
    return ColdUserTrial(int(user), true_profile, universe[cand], universe[test], setting, seed,
                         values[cand], values[test])


def candidate_pool(trial, model, sigma, meta=None):
    """CandidatePool over the trial's candidate items only."""
    items = trial.candidate_items
    sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (model.n_items,))
    kwargs = {}
    if meta is not None:
        kwargs = dict(counts=meta.counts[items], histograms=meta.histograms[items],
                      pred_variance=meta.pred_variance[items], n_users=meta.n_users)
    return CandidatePool(items, model.V[:, items], sigma[items], **kwargs)


def uses_shared_sigma(algorithm):
    return algorithm not in BASELINES and algorithm.endswith("1")


def score_selection(trial, model, items, est_sigma, gamma, scale=None):
    """(prediction RMSE on the test set, profile error) of the ridge estimate from ``items``."""
    items = np.asarray(items, dtype=np.int64)
    r = trial.reveal(items)
    est_sigma = np.broadcast_to(np.asarray(est_sigma, dtype=float), (model.n_items,))
    u_hat = ridge_estimate(model.V[:, items], est_sigma[items], r, gamma).u
    pred = model.V[:, trial.test_items].T @ u_hat
    if scale is not None and trial.setting == "real":
        pred = np.clip(pred, *scale)
    if len(trial.test_items):
        rmse = float(np.sqrt(np.mean((trial.test_ratings - pred) ** 2)))
    else:
        rmse = 0.0
    diff = u_hat - trial.true_profile.u
    return rmse, float(diff @ diff)


def run_trial(trial, model, noise, algorithm, b, gamma=0.01, shared_sigma=1.0, meta=None,
              select_gamma=DEFAULT_GAMMA, scale=None, seed=None):
    """Select an interview of size ``b`` for one trial and score it.

    Variants ending in ``1`` select and estimate with ``shared_sigma`` for
    every item; all others use the per-item noise levels of ``noise``.
    """
    sigma = shared_sigma if uses_shared_sigma(algorithm) else noise.sigma
    pool = candidate_pool(trial, model, sigma, meta)
    plan = select(pool, b, algorithm, select_gamma, seed=seed, model=model)
    if plan.truncated:
        log.warning("user %d: budget %d exceeds pool of %d items", trial.user, b, len(pool))
    rmse, err = score_selection(trial, model, plan.items, sigma, gamma, scale)
    return TrialResult(algorithm, b, rmse, err, plan.wall_time_ms, plan.total_evals, plan.truncated,
                       list(plan.items))


def _prefix_results(trial, model, sigma, plan, pool, budgets, gamma, scale):
    """Score every budget from one greedy run (forward plans grow, backward plans shrink)."""
    out = {}
    n = len(pool)
    for b in budgets:
        truncated = b > n
        b_eff = min(b, n)
        if plan.algorithm in BACKWARD:
            k = n - b_eff
            removed = {s.item_id for s in plan.steps[:k]}
            items = [int(i) for i in pool.item_ids if int(i) not in removed]
            step = plan.steps[k - 1] if k else None
        else:
            items = plan.items[:b_eff]
            step = plan.steps[b_eff - 1]
        runtime = step.elapsed_ms if step else 0.0
        evals = step.evals_so_far if step else 0
        rmse, err = score_selection(trial, model, items, sigma, gamma, scale)
        out[b] = TrialResult(plan.algorithm, b, rmse, err, runtime, evals, truncated, items)
    return out


def fit_shared_sigma(model, dataset, users, gamma=0.01, grid=SIGMA_GRID, seed=0, scale=None):
    """Grid search for the single noise level that best predicts held-out ratings.

    Each validation user's ratings are split in half; the profile is
    estimated from one half with ``C = sigma I`` and scored on the other.
    """
    rng = np.random.default_rng(seed)
    splits = []
    for user in users:
        items, ratings = dataset.user_ratings(int(user))
        if len(items) < 2:
            continue
        perm = rng.permutation(len(items))
        h = len(items) // 2
        splits.append((items[perm[:h]], ratings[perm[:h]], items[perm[h:]], ratings[perm[h:]]))
    if not splits:
        return 1.0
    best = None
    for s in grid:
        sq, count = 0.0, 0
        for fit_items, fit_r, val_items, val_r in splits:
            u = ridge_estimate(model.V[:, fit_items], s, fit_r, gamma).u
            pred = model.V[:, val_items].T @ u
            if scale is not None:
                pred = np.clip(pred, *scale)
            sq += float(np.sum((pred - val_r) ** 2))
            count += len(val_r)
        score = math.sqrt(sq / count)
        if best is None or score < best[0] - 1e-12:
            best = (score, s)
    return float(best[1])


@dataclass
class ExperimentConfig:
    """Everything a simulation run needs; every field has a default."""

    dataset: dict = field(default_factory=lambda: {"synthetic": {"m": 300, "n": 400, "d": 10,
                                                                 "noise_sigma": 0.5, "density": 0.3}})
    hyper: dict = field(default_factory=lambda: {"n_factors": 10, "lr": 0.005, "n_epochs": 60})
    setting: str = "ideal"
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    budgets: list = field(default_factory=lambda: [2, 4, 6, 8, 10])
    seed: int = 0
    threads: int = 1
    out: str = "runs/default"
    warm_fraction: float = 0.7
    holdout_fraction: float = 0.2
    candidate_fraction: float = 0.5
    max_cold_users: int = 30
    gamma_est: float = 0.01
    select_gamma: float = DEFAULT_GAMMA
    sigma_grid: list = field(default_factory=lambda: list(SIGMA_GRID))
    validation_users: int = 50
    fold_reg: float = 0.1
    min_user_ratings: int = 2
    timing: bool = True

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ValueError(f"setting must be one of {SETTINGS}")
        bad = [a for a in self.algorithms if a not in ALGORITHMS]
        if bad:
            raise ValueError(f"unknown algorithms {bad}")
        self.budgets = [int(b) for b in self.budgets]
        if any(b < 1 for b in self.budgets):
            raise ValueError("budgets must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self):
        return asdict(self)


@dataclass
class ExperimentResult:
    dataset: str
    setting: str
    rows: list
    trials: dict
    shared_sigma: float
    mean_pool_size: float
    timing: bool = True

    def write_csv(self, fh):
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_HEADER)
        for row in self.rows:
            writer.writerow([_fmt(row[k]) for k in RESULT_HEADER])

    def to_csv(self):
        buf = io.StringIO()
        self.write_csv(buf)
        return buf.getvalue()

    def plot_table(self, metric):
        """Rows of ``budget, <algorithm>...`` for one metric column."""
        algos = list(dict.fromkeys(r["algorithm"] for r in self.rows))
        budgets = sorted({r["budget"] for r in self.rows})
        lookup = {(r["algorithm"], r["budget"]): r[metric] for r in self.rows}
        table = [["budget"] + algos]
        for b in budgets:
            table.append([b] + [lookup.get((a, b), float("nan")) for a in algos])
        return table

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
            self.write_csv(fh)
        for metric, name in (("mean_profile_err", "plot_profile_err.csv"),
                             ("mean_rmse", "plot_rmse.csv"),
                             ("mean_runtime_ms", "plot_runtime_ms.csv")):
            with open(out / name, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                for row in self.plot_table(metric):
                    writer.writerow([_fmt(x) for x in row])
        return out / "results.csv"


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.10g}"
    return str(x)


def _aggregate(dataset_name, setting, algorithms, budgets, per_user, timing):
    rows = []
    for a in algorithms:
        for b in budgets:
            res = [r[(a, b)] for r in per_user if (a, b) in r]
            if not res:
                continue
            rm = np.array([t.prediction_rmse for t in res])
            pe = np.array([t.profile_error for t in res])
            rt = np.array([t.runtime_ms if timing else 0.0 for t in res])
            ev = np.array([t.evals for t in res], dtype=float)
            rows.append({
                "dataset": dataset_name, "setting": setting, "algorithm": a, "budget": b,
                "n_users": len(res), "mean_rmse": float(rm.mean()), "std_rmse": float(rm.std()),
                "mean_profile_err": float(pe.mean()), "std_profile_err": float(pe.std()),
                "mean_runtime_ms": float(rt.mean()), "mean_evals": float(ev.mean()),
            })
    return rows


def user_seed(seed, user):
    return int(np.random.SeedSequence([int(seed), int(user)]).generate_state(1)[0])


def _run_user(user, ctx):
    cfg = ctx["config"]
    model, noise = ctx["model"], ctx["noise"]
    s = user_seed(cfg.seed, user)
    true = None
    if ctx["true_user_factors"] is not None:
        true = ColdUserProfile(ctx["true_user_factors"][:, user], "ground-truth")
    trial = make_trial(user, model, ctx["dataset"], ctx["warm_items"], cfg.setting, s, true,
                       cfg.candidate_fraction, cfg.fold_reg)
    out = {}
    budgets = sorted(set(cfg.budgets))
    for a in cfg.algorithms:
        sigma = ctx["shared_sigma"] if uses_shared_sigma(a) else noise.sigma
        if a in BASELINES:
            for b in budgets:
                out[(a, b)] = run_trial(trial, model, noise, a, b, cfg.gamma_est, ctx["shared_sigma"],
                                        ctx["meta"], cfg.select_gamma, ctx["scale"], seed=s + b)
            continue
        pool = candidate_pool(trial, model, sigma, ctx["meta"])
        target = min(budgets) if a in BACKWARD else max(budgets)
        plan = select(pool, target, a, cfg.select_gamma, seed=s, model=model)
        for b, res in _prefix_results(trial, model, sigma, plan, pool, budgets, cfg.gamma_est,
                                      ctx["scale"]).items():
            out[(a, b)] = res
    return trial, out


def run_experiment(dataset, config=None, model=None, noise=None, true_user_factors=None):
    """Full cold-start simulation over every (cold user, algorithm, budget).

    ``dataset`` holds all users.  A model is trained on the warm users unless
    given; the per-item noise is estimated on the warm ratings unless given.
    ``true_user_factors`` (d x m) replaces the fold-in reference profiles,
    for synthetic data with known ground truth.
    """
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config or {})
    warm, cold = split_warm_cold(dataset, cfg.warm_fraction, cfg.seed)
    if model is None:
        model = pmf.train(warm, cfg.hyper, seed=cfg.seed)
    if noise is None:
        noise = pmf.estimate_noise(model, warm)
    counts = np.bincount(dataset.users, minlength=dataset.n_users)
    cold = np.array([u for u in cold if counts[u] >= cfg.min_user_ratings], dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    if cfg.max_cold_users is not None and len(cold) > cfg.max_cold_users:
        cold = np.sort(rng.choice(cold, size=cfg.max_cold_users, replace=False))
    warm_users = warm.rated_users()
    val_users = rng.choice(warm_users, size=min(cfg.validation_users, len(warm_users)), replace=False) \
        if len(warm_users) else warm_users
    needs_shared = any(uses_shared_sigma(a) for a in cfg.algorithms)
    shared = fit_shared_sigma(model, warm, val_users, cfg.gamma_est, cfg.sigma_grid, cfg.seed,
                              dataset.scale) if needs_shared else 1.0
    ctx = {
        "config": cfg, "model": model, "noise": noise, "dataset": dataset,
        "warm_items": warm.rated_items(), "meta": PoolMetadata.from_warm(model, warm),
        "shared_sigma": shared, "scale": dataset.scale, "true_user_factors": true_user_factors,
    }
    if cfg.threads > 1 and len(cold) > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            done = list(ex.map(lambda u: _run_user(u, ctx), cold))
    else:
        done = [_run_user(u, ctx) for u in cold]
    trials = {t.user: (t, out) for t, out in done}
    per_user = [trials[u][1] for u in sorted(trials)]
    pool_sizes = [len(trials[u][0].candidate_items) for u in sorted(trials)]
    rows = _aggregate(dataset.name, cfg.setting, cfg.algorithms, sorted(set(cfg.budgets)), per_user, cfg.timing)
    log.info("simulated %d cold users, %d result rows", len(trials), len(rows))
    return ExperimentResult(dataset.name, cfg.setting, rows, trials, shared,
                            float(np.mean(pool_sizes)) if pool_sizes else 0.0, cfg.timing)


def synthetic_pool_study(n_trials=200, n=200, d=10, budgets=(4, 6, 8, 10), algorithms=("FG2", "RS", "PI"),
                         gamma=1.0, sigma_range=(0.25, 2.0), seed=0):
    """Paired synthetic trials with a Gaussian prior on the user profile.

    Per trial: item vectors ``V ~ N(0, I/d)``, noise levels uniform on
    ``sigma_range``, popularity counts drawn independently, ``u ~ N(0, I)``
    and one noisy rating per item.  Selection and estimation both use
    ``gamma`` (the prior precision), so f is the exact posterior
    expected error.  Returns ``{(algorithm, budget): array of profile errors}``.
    """
    errors = {(a, b): [] for a in algorithms for b in budgets}
    for t in range(n_trials):
        rng = np.random.default_rng([seed, t])
        V = rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, n))
        sigma = rng.uniform(*sigma_range, size=n)
        counts = rng.zipf(1.5, size=n) % 1000
        u = rng.standard_normal(d)
        r = V.T @ u + sigma * rng.standard_normal(n)
        pool = CandidatePool(np.arange(n), V, sigma, counts=counts)
        for a in algorithms:
            for b in budgets:
                plan = select(pool, b, a, gamma, seed=t)
                items = np.asarray(plan.items)
                u_hat = ridge_estimate(V[:, items], sigma[items], r[items], gamma).u
                errors[(a, b)].append(float(np.sum((u_hat - u) ** 2)))
    return {k: np.array(v) for k, v in errors.items()}


def dataset_pool_size(dataset, warm_fraction=0.7, seed=0, candidate_fraction=0.5):
    """Ideal-setting candidate-pool size: half of the items with warm ratings."""
    warm, _ = split_warm_cold(dataset, warm_fraction, seed)
    return int(round(candidate_fraction * len(warm.rated_items())))


@dataclass
class AuditRecord:
    instance: int
    n: int
    d: int
    budget: int
    optimum: float
    values: dict

    def gap(self, algorithm):
        """Relative excess of ``algorithm`` over the exhaustive optimum."""
        return (self.values[algorithm] - self.optimum) / self.optimum


def exhaustive_optimum(pool, budget, gamma=DEFAULT_GAMMA):
    """Smallest f over every ``budget``-subset of the pool (per-item noise)."""
    from itertools import combinations

    from .linalg import objective_f

    return min(objective_f(pool.vectors[:, list(c)], pool.sigma[list(c)], gamma)
               for c in combinations(range(len(pool)), budget))


def optimality_audit(n_instances=200, seed=0, algorithms=("FG2", "AFG2", "BG2", "ABG2"),
                     max_n=10, max_b=4, max_d=4, gamma=DEFAULT_GAMMA):
    """Greedy versus exhaustive search on small random pools.

    No bound is asserted: the problem admits no constant-factor guarantee,
    so the audit only records the gaps.
    """
    from .linalg import objective_f

    records = []
    for t in range(n_instances):
        rng = np.random.default_rng([seed, t])
        d = int(rng.integers(1, max_d + 1))
        n = int(rng.integers(max(2, d), max_n + 1))
        b = int(rng.integers(1, min(max_b, n - 1) + 1))
        pool = CandidatePool(np.arange(n), rng.normal(size=(d, n)), rng.uniform(0.5, 2.0, n))
        values = {}
        for a in algorithms:
            items = select(pool, b, a, gamma).items
            values[a] = objective_f(pool.vectors[:, items], pool.sigma[items], gamma)
        records.append(AuditRecord(t, n, d, b, exhaustive_optimum(pool, b, gamma), values))
    return records


__all__ = [
    "AuditRecord", "ColdUserTrial", "ExperimentConfig", "ExperimentResult", "PoolMetadata", "TrialResult",
    "candidate_pool", "dataset_pool_size", "exhaustive_optimum", "fit_shared_sigma", "make_trial",
    "optimality_audit", "ridge_estimate", "run_experiment", "run_trial", "score_selection",
    "synthetic_pool_study",
]
