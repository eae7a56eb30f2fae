"""Probabilistic matrix factorisation: training, noise estimation and fold-in.

Ratings are modelled as ``R_ij ~ N(U_i^T V_j, sigma^2)`` with zero-mean
Gaussian priors on the factor columns, so MAP estimation is regularised
least squares.  Training runs stochastic gradient descent with a step size
that decays linearly to zero over the epochs.
"""
import json
import logging
from dataclasses import dataclass, field

import numba
import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DivergenceError

log = logging.getLogger(__name__)

DEFAULT_HYPER = {
    "n_factors": 20,
    "reg": 0.1,
    "lr": 0.002,
    "n_epochs": 100,
    "momentum": 0.0,
    "init_std": 0.1,
}
LOSS_FLUCTUATION = 0.01
NOISE_FLOOR = 1e-3


@dataclass
class FactorModel:
    """User factors ``U`` (d x m) and item factors ``V`` (d x n)."""

    U: np.ndarray
    V: np.ndarray
    hyper: dict = field(default_factory=dict)
    seed: int = None
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        self.U = np.ascontiguousarray(self.U, dtype=float)
        self.V = np.ascontiguousarray(self.V, dtype=float)
        if self.U.ndim != 2 or self.V.ndim != 2 or self.U.shape[0] != self.V.shape[0]:
            raise ValueError("U and V must be 2-D with the same number of rows")
        if self.U.shape[0] < 1:
            raise ValueError("latent dimension must be >= 1")
        if not (np.all(np.isfinite(self.U)) and np.all(np.isfinite(self.V))):
            raise ValueError("factor matrices must be finite")

    @property
    def d(self):
        return self.U.shape[0]

    @property
    def n_users(self):
        return self.U.shape[1]

    @property
    def n_items(self):
        return self.V.shape[1]

    def predict_pairs(self, users, items, scale=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise IndexError("item index out of range")
        pred = np.einsum("fk,fk->k", self.U[:, users], self.V[:, items])
        return pred if scale is None else np.clip(pred, *scale)

    def to_json(self):
        return json.dumps({
            "format": "coldstart-factor-model",
            "version": 1,
            "d": self.d,
            "n_users": self.n_users,
            "n_items": self.n_items,
            "hyper": self.hyper,
            "seed": self.seed,
            "loss_history": [float(x) for x in self.loss_history],
            "U": self.U.ravel().tolist(),
            "V": self.V.ravel().tolist(),
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc.get("format") != "coldstart-factor-model":
            raise ValueError("not a factor-model checkpoint")
        d = doc["d"]
        U = np.array(doc["U"], dtype=float).reshape(d, doc["n_users"])
        V = np.array(doc["V"], dtype=float).reshape(d, doc["n_items"])
        return cls(U, V, doc["hyper"], doc["seed"], doc["loss_history"])

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(fh.read())


@dataclass
class NoiseModel:
    sigma: np.ndarray
    floor: float = NOISE_FLOOR

    def __post_init__(self):
        self.sigma = np.asarray(self.sigma, dtype=float)
        if not self.floor > 0 or np.any(self.sigma < self.floor):
            raise ValueError("every sigma must be >= floor > 0")


@dataclass
class ColdUserProfile:
    u: np.ndarray
    provenance: str = "fold-in"

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).reshape(-1)
        if not np.all(np.isfinite(self.u)):
            raise ValueError("profile has non-finite entries")


@numba.njit(cache=True)
def _sgd_epoch(users, items, ratings, order, U, V, dU, dV, lr, reg, momentum):
    d = U.shape[0]
    for t in range(order.shape[0]):
        k = order[t]
        i = users[k]
        j = items[k]
        pred = 0.0
        for f in range(d):
            pred += U[f, i] * V[f, j]
        e = ratings[k] - pred
        for f in range(d):
            uf = U[f, i]
            vf = V[f, j]
            dU[f, i] = momentum * dU[f, i] + lr * (e * vf - reg * uf)
            dV[f, j] = momentum * dV[f, j] + lr * (e * uf - reg * vf)
            U[f, i] = uf + dU[f, i]
            V[f, j] = vf + dV[f, j]


def training_loss(U, V, users, items, ratings, reg):
    """Regularised squared error: sum of residual^2 plus reg * (||U||^2 + ||V||^2)."""
    resid = ratings - np.einsum("fk,fk->k", U[:, users], V[:, items])
    return float(resid @ resid + reg * (np.sum(U * U) + np.sum(V * V)))


def loss_fluctuation(history):
    """Largest relative increase between consecutive epochs (0 if monotone)."""
    h = np.asarray(history, dtype=float)
    if len(h) < 2:
        return 0.0
    return float(max(0.0, np.max((h[1:] - h[:-1]) / h[:-1])))


def _sgd(users, items, ratings, n_users, n_items, n_factors, reg, lr, n_epochs,
         momentum, init_std, seed):
    if n_factors < 1:
        raise ValueError("n_factors must be >= 1")
    if reg < 0:
        raise ValueError("reg must be nonnegative")
    if len(ratings) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, init_std, size=(n_factors, n_users))
    V = rng.normal(0.0, init_std, size=(n_factors, n_items))
    dU, dV = np.zeros_like(U), np.zeros_like(V)
    history = [training_loss(U, V, users, items, ratings, reg)]
    for epoch in range(n_epochs):
        step = lr * (1.0 - epoch / n_epochs)
        _sgd_epoch(users, items, ratings, rng.permutation(len(ratings)), U, V, dU, dV,
                   step, reg, momentum)
        loss = training_loss(U, V, users, items, ratings, reg)
        if not np.isfinite(loss):
            raise DivergenceError(f"training loss became non-finite at epoch {epoch}")
        history.append(loss)
    if loss_fluctuation(history) > LOSS_FLUCTUATION:
        log.warning("training loss rose by %.2f%% between epochs", 100 * loss_fluctuation(history))
    return U, V, history


def train(dataset, hyper=None, seed=0):
    """Fit a FactorModel on every triple of ``dataset``.

    ``hyper`` overrides entries of DEFAULT_HYPER.
    """
    h = dict(DEFAULT_HYPER)
    h.update(hyper or {})
    unknown = set(h) - set(DEFAULT_HYPER)
    if unknown:
        raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
    U, V, history = _sgd(dataset.users, dataset.items, dataset.ratings, dataset.n_users,
                         dataset.n_items, seed=seed, **h)
    return FactorModel(U, V, h, seed, history)


def predict(model, user, item, scale=None):
    """U_user^T V_item, clamped to ``scale`` if given."""
    if not 0 <= user < model.n_users:
        raise IndexError(f"user {user} out of range")
    if not 0 <= item < model.n_items:
        raise IndexError(f"item {item} out of range")
    value = float(model.U[:, user] @ model.V[:, item])
    return value if scale is None else float(np.clip(value, *scale))


def rmse(model, dataset, scale=None):
    pred = model.predict_pairs(dataset.users, dataset.items, scale)
    return float(np.sqrt(np.mean((pred - dataset.ratings) ** 2)))


def estimate_noise(model, dataset, floor=NOISE_FLOOR):
    """Per-item residual RMS of ``model`` on ``dataset`` (unclamped predictions).

    Items without ratings get the mean sigma of the rated ones.
    """
    resid = dataset.ratings - model.predict_pairs(dataset.users, dataset.items)
    counts = np.bincount(dataset.items, minlength=model.n_items)
    sq = np.bincount(dataset.items, weights=resid * resid, minlength=model.n_items)
    sigma = np.empty(model.n_items)
    rated = counts > 0
    sigma[rated] = np.sqrt(sq[rated] / counts[rated])
    sigma = np.maximum(sigma, floor)
    sigma[~rated] = float(np.mean(sigma[rated])) if rated.any() else 1.0
    return NoiseModel(np.maximum(sigma, floor), floor)


def fold_in_user(model, ratings, reg=0.1, seed=0, tol=1e-8, max_iter=100_000):
    """Profile of a new user from ``[(item, rating), ...]`` with V held fixed.

    Minimises ``sum_j (r_j - u^T V_j)^2 + reg ||u||^2`` by Nesterov-accelerated
    gradient descent from a random start, stopping when the gradient norm
    drops below ``tol``.

    >>> m = FactorModel(np.zeros((1, 1)), np.array([[2.0]]))
    >>> round(float(fold_in_user(m, [(0, 3.0)], reg=1.0).u[0]), 6)
    1.2
    """
    ratings = list(ratings)
    if not ratings:
        raise ValueError("fold-in needs at least one rating")
    items = np.array([j for j, _ in ratings], dtype=np.int64)
    r = np.array([x for _, x in ratings], dtype=float)
    Vb = model.V[:, items]
    H = 2.0 * (Vb @ Vb.T + reg * np.eye(model.d))
    g0 = 2.0 * Vb @ r
    eigs = np.linalg.eigvalsh(H)
    L, mu = float(eigs[-1]), float(max(eigs[0], 0.0))
    if L <= 0:
        raise DivergenceError("fold-in objective has no curvature")
    rng = np.random.default_rng(seed)
    u = rng.normal(0.0, 0.1, size=model.d)
    y, prev = u.copy(), u.copy()
    if mu > 0:
        beta = (np.sqrt(L) - np.sqrt(mu)) / (np.sqrt(L) + np.sqrt(mu))
    t = 1.0
    for _ in range(max_iter):
        grad = H @ y - g0
        u = y - grad / L
        if not np.all(np.isfinite(u)):
            raise DivergenceError("fold-in diverged")
        if np.linalg.norm(H @ u - g0) < tol:
            break
        if mu == 0:
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            beta = (t - 1) / t_next
            t = t_next
        y = u + beta * (u - prev)
        prev = u
    else:
        log.warning("fold-in stopped at the iteration cap with gradient norm %.2e",
                    np.linalg.norm(H @ u - g0))
    return ColdUserProfile(u, "fold-in")


def fold_in_objective(model, ratings, u, reg=0.1):
    items = np.array([j for j, _ in ratings], dtype=np.int64)
    r = np.array([x for _, x in ratings], dtype=float)
    resid = r - model.V[:, items].T @ np.asarray(u, dtype=float)
    return float(resid @ resid + reg * np.dot(u, u))


class PMF(RegressorMixin, BaseEstimator):
    """Matrix-factorisation regressor over (user, item) index pairs.

    ``X`` is an integer array of shape (n_ratings, 2) holding user and item
    indices and ``y`` the ratings.

    >>> X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]])
    >>> est = PMF(n_factors=1, lr=0.05, n_epochs=200, reg=0.0, random_state=0)
    >>> est.fit(X, np.array([1.0, 2.0, 2.0, 4.0])).predict([[1, 1]]).round(2)
    array([4.])
    """

    def __init__(self, n_factors=20, reg=0.1, lr=0.002, n_epochs=100, momentum=0.0,
                 init_std=0.1, rating_scale=None, n_users=None, n_items=None, random_state=None):
        self.n_factors = n_factors
        self.reg = reg
        self.lr = lr
        self.n_epochs = n_epochs
        self.momentum = momentum
        self.init_std = init_std
        self.rating_scale = rating_scale
        self.n_users = n_users
        self.n_items = n_items
        self.random_state = random_state

    def _pairs(self, X):
        X = np.asarray(X)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValueError("X must have shape (n_samples, 2) of (user, item) indices")
        if not np.issubdtype(X.dtype, np.integer):
            if not np.all(X == np.round(X)):
                raise ValueError("X must hold integer indices")
        X = X.astype(np.int64)
        if X.size and X.min() < 0:
            raise ValueError("indices must be nonnegative")
        return np.ascontiguousarray(X[:, 0]), np.ascontiguousarray(X[:, 1])

    def fit(self, X, y):
        users, items = self._pairs(X)
        y = np.ascontiguousarray(y, dtype=float).reshape(-1)
        if len(y) != len(users):
            raise ValueError("X and y have inconsistent lengths")
        m = self.n_users if self.n_users is not None else int(users.max()) + 1
        n = self.n_items if self.n_items is not None else int(items.max()) + 1
        seed = self.random_state if self.random_state is not None else 0
        U, V, history = _sgd(users, items, y, m, n, self.n_factors, self.reg, self.lr,
                             self.n_epochs, self.momentum, self.init_std, seed)
        hyper = {k: getattr(self, k) for k in DEFAULT_HYPER}
        self.model_ = FactorModel(U, V, hyper, seed, history)
        self.loss_history_ = history
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        users, items = self._pairs(X)
        return self.model_.predict_pairs(users, items, self.rating_scale)

    def score(self, X, y, sample_weight=None):
        """Negative RMSE (higher is better)."""
        y = np.asarray(y, dtype=float)
        return -float(np.sqrt(np.mean((self.predict(X) - y) ** 2)))
