"""Incremental evaluation of the interview objective during greedy search."""
import numpy as np

from .exceptions import NotPositiveDefiniteError
from .linalg import (
    GramInverse,
    gram_matrix,
    rank_one_update,
    sherman_morrison_terms,
    spd_inverse,
    trace_of_inverse,
)

REFRESH_EVERY = 64
# downdates with 1 - w q below this amplify round-off; rebuild instead
REBUILD_TOL = 1e-6


def _weight(sigma):
    sigma = float(sigma)
    if not np.isfinite(sigma) or sigma <= 0:
        raise ValueError("sigma must be positive and finite")
    return 1.0 / sigma**2


class ObjectiveState:
    """Selected item set B together with the maintained Gram inverse.

    The Gram matrix is ``gamma * I + sum_{j in B} sigma_j^{-2} v_j v_j^T``;
    ``current_f`` is the trace of its inverse.  Adds and removals are applied
    with Sherman-Morrison updates, and the inverse is rebuilt from scratch
    every ``REFRESH_EVERY`` commits to bound round-off drift.

    ``eval_counter`` counts marginal-gain (or removal-cost) evaluations.
    """

    def __init__(self, gamma, d):
        if not gamma > 0:
            raise ValueError("gamma must be > 0 so that the empty-set Gram matrix is invertible")
        if d < 1:
            raise ValueError("latent dimension must be >= 1")
        self.gamma = float(gamma)
        self.d = int(d)
        self.selected = []
        self._vectors = {}
        self._weights = {}
        self.gram_inverse = GramInverse.identity(self.d, self.gamma)
        self.current_f = self.gram_inverse.trace()
        self.eval_counter = 0
        self._commits = 0

    @classmethod
    def from_items(cls, item_ids, vectors, sigma, gamma):
        """State holding every column of ``vectors`` at once (gamma may be 0)."""
        vectors = np.asarray(vectors, dtype=float)
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), (vectors.shape[1],))
        state = cls.__new__(cls)
        state.gamma = float(gamma)
        if state.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        state.d = vectors.shape[0]
        state.selected = [int(i) for i in item_ids]
        if len(set(state.selected)) != len(state.selected):
            raise ValueError("duplicate item ids")
        state._vectors = {i: vectors[:, k].copy() for k, i in enumerate(state.selected)}
        state._weights = {i: _weight(s) for i, s in zip(state.selected, sigma)}
        state.eval_counter = 0
        state._commits = 0
        state.refresh()
        return state

    def __contains__(self, item_id):
        return item_id in self._weights

    def __len__(self):
        return len(self.selected)

    def copy(self):
        other = self.__class__.__new__(self.__class__)
        other.__dict__.update(self.__dict__)
        other.selected = list(self.selected)
        other._vectors = dict(self._vectors)
        other._weights = dict(self._weights)
        return other

    def gram(self):
        """Explicitly assembled Gram matrix of the current selection."""
        if not self.selected:
            return self.gamma * np.eye(self.d)
        V = np.column_stack([self._vectors[i] for i in self.selected])
        w = np.array([self._weights[i] for i in self.selected])
        return gram_matrix(V, 1.0 / np.sqrt(w), self.gamma)

    def refresh(self):
        """Rebuild the inverse from the stored item vectors."""
        self.gram_inverse = GramInverse(spd_inverse(self.gram()), self.gamma)
        self.current_f = self.gram_inverse.trace()

    def from_scratch_f(self):
        return trace_of_inverse(self.gram())

    def set_gamma(self, gamma):
        self.gamma = float(gamma)
        self.refresh()

    # -- evaluations -------------------------------------------------------

    def marginal_gains(self, vectors, sigma):
        """f(B) - f(B + {v}) for every column v of ``vectors`` (state untouched)."""
        vectors = np.asarray(vectors, dtype=float).reshape(self.d, -1)
        w = 1.0 / np.broadcast_to(np.asarray(sigma, dtype=float), (vectors.shape[1],)) ** 2
        s, q = sherman_morrison_terms(self.gram_inverse.inverse, vectors)
        self.eval_counter += vectors.shape[1]
        return w * s / (1.0 + w * q)

    def marginal_gain(self, v, sigma):
        return float(self.marginal_gains(np.asarray(v, dtype=float).reshape(-1, 1), [sigma])[0])

    def removal_costs(self, item_ids):
        """f(B - {j}) - f(B) for each selected ``j``; ``inf`` if removal is singular.

        Near-degenerate removals (``1 - w q`` tiny) are evaluated from the
        rebuilt Gram matrix, since the rank-one formula loses all precision
        there.
        """
        item_ids = list(item_ids)
        if not item_ids:
            return np.zeros(0)
        for i in item_ids:
            if i not in self._weights:
                raise KeyError(f"item {i} is not in the selection")
        V = np.column_stack([self._vectors[i] for i in item_ids])
        w = np.array([self._weights[i] for i in item_ids])
        s, q = sherman_morrison_terms(self.gram_inverse.inverse, V)
        self.eval_counter += len(item_ids)
        denom = 1.0 - w * q
        costs = np.full(len(item_ids), np.inf)
        ok = denom > REBUILD_TOL
        costs[ok] = w[ok] * s[ok] / denom[ok]
        for k in np.flatnonzero(~ok):
            costs[k] = self._direct_removal_cost(item_ids[k])
        return costs

    def _direct_removal_cost(self, item_id):
        rest = [i for i in self.selected if i != item_id]
        if not rest:
            return np.inf if self.gamma <= 0 else self.d / self.gamma - self.current_f
        V = np.column_stack([self._vectors[i] for i in rest])
        w = np.array([self._weights[i] for i in rest])
        try:
            return trace_of_inverse(gram_matrix(V, 1.0 / np.sqrt(w), self.gamma)) - self.current_f
        except np.linalg.LinAlgError:
            return np.inf

    def removal_cost(self, item_id):
        return float(self.removal_costs([item_id])[0])

    # -- commits -----------------------------------------------------------

    def _after_commit(self):
        self._commits += 1
        if self._commits % REFRESH_EVERY == 0:
            self.refresh()
        else:
            self.current_f = self.gram_inverse.trace()

    def commit_add(self, item_id, v, sigma):
        item_id = int(item_id)
        if item_id in self._weights:
            raise ValueError(f"item {item_id} is already selected")
        v = np.asarray(v, dtype=float).reshape(-1).copy()
        w = _weight(sigma)
        self.gram_inverse = rank_one_update(self.gram_inverse, v, w)
        self.selected.append(item_id)
        self._vectors[item_id] = v
        self._weights[item_id] = w
        self._after_commit()
        return self

    def commit_remove(self, item_id):
        item_id = int(item_id)
        if item_id not in self._weights:
            raise KeyError(f"item {item_id} is not in the selection")
        v = self._vectors[item_id]
        w = self._weights[item_id]
        if len(self.selected) == 1 and self.gamma <= 0:
            raise NotPositiveDefiniteError("removing the last item leaves a singular Gram matrix")
        _, q = sherman_morrison_terms(self.gram_inverse.inverse, v)
        rebuild = 1.0 - w * q < REBUILD_TOL
        if not rebuild:
            self.gram_inverse = rank_one_update(self.gram_inverse, v, -w)
        pos = self.selected.index(item_id)
        del self.selected[pos]
        del self._vectors[item_id]
        del self._weights[item_id]
        if rebuild:
            try:
                self.refresh()
            except np.linalg.LinAlgError:
                self.selected.insert(pos, item_id)
                self._vectors[item_id] = v
                self._weights[item_id] = w
                raise NotPositiveDefiniteError(f"removing item {item_id} leaves a singular Gram matrix") from None
        self._after_commit()
        return self


def init_state(gamma, d):
    """Empty selection: inverse (1/gamma) I and f = d / gamma."""
    return ObjectiveState(gamma, d)
