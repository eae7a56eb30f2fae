"""Exact-cover gadgets and counterexamples for the interview objective.

An X3C instance (universe of size k = 3q, a collection of 3-element sets) is
turned into item vectors: one binary "set vector" per set and k "dummy"
vectors ``eta * e_j``.  With budget q + k and unit noise, a selection holding
every dummy reaches the objective value

    theta = q / (3 + eta^2) + (k - q) / eta^2

exactly when its set vectors form an exact cover, and the best selection
that covers 3q - 1 elements reaches

    alpha = theta + 2 / ((2 + eta^2) (4 + eta^2) (3 + eta^2)).

The functions below build these instances, evaluate selections, and run the
exhaustive checks used as ground truth by the test-suite and the
``verify-theory`` command.
"""
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import SingularMatrixError
from .linalg import objective_f, symmetric_eigenvalues

EXHAUSTIVE_CAP = 10_000


@dataclass(frozen=True)
class X3CInstance:
    """Universe ``{0, ..., 3q-1}`` and a list of 3-element subsets (0-based)."""

    q: int
    sets: tuple

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")
        k = 3 * self.q
        clean = []
        for s in self.sets:
            s = tuple(sorted(int(x) for x in s))
            if len(s) != 3 or len(set(s)) != 3:
                raise ValueError(f"set {s} must have exactly three distinct elements")
            if s[0] < 0 or s[-1] >= k:
                raise ValueError(f"set {s} has elements outside 0..{k - 1}")
            clean.append(s)
        object.__setattr__(self, "sets", tuple(clean))

    @property
    def k(self):
        return 3 * self.q

    def is_exact_cover(self, chosen):
        elements = [x for j in chosen for x in self.sets[j]]
        return len(chosen) == self.q and sorted(elements) == list(range(self.k))

    def cover_size(self, chosen):
        return len({x for j in chosen for x in self.sets[j]})

    def best_cover_size(self):
        return max(self.cover_size(c) for c in itertools.combinations(range(len(self.sets)), self.q))

    def to_json(self, eta_sq=None):
        doc = {"universe_size": self.k, "sets": [list(s) for s in self.sets]}
        if eta_sq is not None:
            doc["eta_sq"] = eta_sq
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        if doc["universe_size"] % 3:
            raise ValueError("universe size must be a multiple of 3")
        return cls(doc["universe_size"] // 3, tuple(tuple(s) for s in doc["sets"]))


def tight_eta_sq(k):
    """Smallest integer eta^2 satisfying eta^2 >= (sqrt(5k^2 + 4) - k + 4) / 2."""
    return float(math.ceil(0.5 * (math.sqrt(5 * k * k + 4) - k + 4)))


def theta_value(q, eta_sq):
    return q / (3.0 + eta_sq) + (3 * q - q) / eta_sq


def alpha_value(q, eta_sq):
    return theta_value(q, eta_sq) + 2.0 / ((2.0 + eta_sq) * (4.0 + eta_sq) * (3.0 + eta_sq))


@dataclass
class GadgetMatrix:
    """Item vectors of the reduction: ``W = [set_vectors | dummy_vectors]``."""

    instance: X3CInstance
    eta_sq: float
    set_vectors: np.ndarray
    dummy_vectors: np.ndarray
    theta: float
    alpha: float
    budget: int = field(init=False)

    def __post_init__(self):
        self.budget = self.instance.q + self.instance.k

    @property
    def k(self):
        return self.instance.k

    @property
    def q(self):
        return self.instance.q

    @property
    def n_sets(self):
        return self.set_vectors.shape[1]

    @property
    def W(self):
        return np.hstack([self.set_vectors, self.dummy_vectors])

    @property
    def dummy_columns(self):
        """Column indices of the dummies within ``W``."""
        return list(range(self.n_sets, self.n_sets + self.k))

    def selection(self, chosen_sets):
        """Column indices in ``W`` of the given set vectors plus all dummies."""
        return list(chosen_sets) + self.dummy_columns


def build_gadget(inst, eta_sq=None):
    """Turn an X3C instance into the gadget item matrix.

    ``eta_sq`` is the squared dummy scale; by default the smallest integer
    meeting the tight bound for k = 3q.
    """
    k = inst.k
    if eta_sq is None:
        eta_sq = tight_eta_sq(k)
    eta_sq = float(eta_sq)
    if eta_sq < 0.5 * (math.sqrt(5 * k * k + 4) - k + 4) - 1e-12:
        raise ValueError(f"eta^2 = {eta_sq} is below the bound for k = {k}")
    A = np.zeros((k, len(inst.sets)))
    for j, s in enumerate(inst.sets):
        A[list(s), j] = 1.0
    D = math.sqrt(eta_sq) * np.eye(k)
    return GadgetMatrix(inst, eta_sq, A, D, theta_value(inst.q, eta_sq), alpha_value(inst.q, eta_sq))


def selection_value(g, columns):
    """f of a column selection of W with unit noise and no ridge; inf if singular."""
    try:
        return objective_f(g.W[:, list(columns)], 1.0, 0.0)
    except SingularMatrixError:
        return math.inf


def verify_cover_value(g, chosen, tol=1e-8):
    """Objective value of ``chosen`` set vectors plus all dummies, and the exact-cover flag.

    Raises AssertionError if the value equals theta for a non-cover or
    differs from theta for an exact cover.
    """
    chosen = list(chosen)
    if len(chosen) != g.q:
        raise ValueError(f"expected {g.q} set indices, got {len(chosen)}")
    if any(not 0 <= j < g.n_sets for j in chosen):
        raise ValueError("set index out of range")
    f = objective_f(g.W[:, g.selection(chosen)], 1.0, 0.0)
    exact = g.instance.is_exact_cover(chosen)
    if exact and abs(f - g.theta) > tol:
        raise AssertionError(f"exact cover {chosen} has f = {f!r}, expected theta = {g.theta!r}")
    if not exact and f <= g.theta + tol:
        raise AssertionError(f"non-cover {chosen} reaches f = {f!r} <= theta = {g.theta!r}")
    return f, exact


def gadget_trace(g, columns):
    """tr(B B^T) for a selection of q + k columns that contains every dummy."""
    columns = list(columns)
    if len(columns) != g.budget or not set(g.dummy_columns) <= set(columns):
        raise ValueError("selection must have q + k columns including all dummies")
    B = g.W[:, columns]
    return float(np.trace(B @ B.T))


def selection_eigenvalues(g, chosen):
    B = g.W[:, g.selection(chosen)]
    return symmetric_eigenvalues(B @ B.T)


def exhaustive_cover_search(g):
    """Evaluate every q-subset of set vectors (with all dummies).

    Returns ``(best_f, best_subset, values)`` where ``values`` maps each
    subset to its f value.
    """
    subsets = list(itertools.combinations(range(g.n_sets), g.q))
    if len(subsets) > EXHAUSTIVE_CAP:
        raise ValueError(f"{len(subsets)} subsets exceeds the exhaustive cap of {EXHAUSTIVE_CAP}")
    values = {c: selection_value(g, g.selection(c)) for c in subsets}
    best = min(values, key=lambda c: (values[c], c))
    return values[best], best, values


def exhaustive_selection_search(g, budget=None):
    """Minimum f over every ``budget``-subset of all n + k columns of W."""
    budget = g.budget if budget is None else budget
    n_cols = g.W.shape[1]
    if math.comb(n_cols, budget) > EXHAUSTIVE_CAP:
        raise ValueError("too many subsets for exhaustive search")
    best = (math.inf, None)
    for cols in itertools.combinations(range(n_cols), budget):
        f = selection_value(g, cols)
        if f < best[0]:
            best = (f, cols)
    return best


def dummy_replacement_check(g):
    """For every q + k selection missing a dummy, find an all-dummy selection with smaller f.

    Returns the number of selections checked; raises AssertionError on a
    counterexample.
    """
    best_all_dummy, _, values = exhaustive_cover_search(g)
    checked = 0
    n_cols = g.W.shape[1]
    if math.comb(n_cols, g.budget) > EXHAUSTIVE_CAP:
        raise ValueError("too many subsets for exhaustive search")
    dummies = set(g.dummy_columns)
    for cols in itertools.combinations(range(n_cols), g.budget):
        if dummies <= set(cols):
            continue
        f = selection_value(g, cols)
        if not best_all_dummy < f:
            raise AssertionError(f"selection {cols} without every dummy has f = {f} <= {best_all_dummy}")
        checked += 1
    return checked


def overlap_instance():
    """q = 3 instance whose best selection overlaps two sets in one element.

    The chosen sets are {x1,x2,x3}, {x3,x4,x5} and {x6,x8,x9}; x7 stays
    uncovered.
    """
    return X3CInstance(3, ((0, 1, 2), (2, 3, 4), (5, 7, 8)))


def overlap_component_eigenvalues(inst, chosen):
    """Eigenvalues of the part of B'B'^T spanned by overlapping sets and uncovered elements.

    ``B'`` holds only the chosen set vectors.  For two sets sharing one
    element this is the six-node component {4, 2, 0, 0, 0, 0}.
    """
    counts = np.zeros(inst.k, dtype=int)
    for j in chosen:
        counts[list(inst.sets[j])] += 1
    overlapping = [j for j in chosen if np.any(counts[list(inst.sets[j])] > 1)]
    nodes = sorted({x for j in overlapping for x in inst.sets[j]} | set(np.flatnonzero(counts == 0)))
    Bp = np.zeros((inst.k, len(chosen)))
    for c, j in enumerate(chosen):
        Bp[list(inst.sets[j]), c] = 1.0
    G = Bp @ Bp.T
    return symmetric_eigenvalues(G[np.ix_(nodes, nodes)])


@dataclass(frozen=True)
class CounterexampleFixture:
    M1: np.ndarray
    M2: np.ndarray
    x: np.ndarray
    expected: dict

    def values(self):
        f = lambda M: objective_f(M, 1.0, 0.0)  # noqa: E731
        return {
            "f(M1)": f(self.M1),
            "f(M1+x)": f(np.column_stack([self.M1, self.x])),
            "f(M2)": f(self.M2),
            "f(M2+x)": f(np.column_stack([self.M2, self.x])),
        }

    def m1_within_m2(self):
        cols2 = {tuple(c) for c in self.M2.T}
        return all(tuple(c) in cols2 for c in self.M1.T)

    def supermodularity_violated(self):
        """True when f(M1+x) - f(M1) > f(M2+x) - f(M2) with M1 inside M2."""
        v = self.values()
        return self.m1_within_m2() and (v["f(M1+x)"] - v["f(M1)"]) > (v["f(M2+x)"] - v["f(M2)"])


def counterexample_fixture():
    """Binary matrices showing that the objective is not supermodular."""
    M1 = np.array([
        [1, 1, 0, 0, 0],
        [0, 0, 1, 0, 0],
        [1, 0, 0, 1, 0],
        [0, 0, 1, 1, 1],
        [0, 0, 1, 0, 1],
    ], dtype=float)
    M2 = np.array([
        [0, 0, 1, 0, 1, 1],
        [1, 0, 0, 0, 0, 1],
        [0, 1, 0, 0, 1, 1],
        [1, 1, 0, 1, 0, 0],
        [1, 0, 0, 1, 0, 1],
    ], dtype=float)
    x = np.array([0, 1, 0, 0, 0], dtype=float)
    expected = {"f(M1)": 12.0, "f(M1+x)": 10.333, "f(M2)": 6.6250, "f(M2+x)": 4.4783}
    return CounterexampleFixture(M1, M2, x, expected)


def find_submodularity_violation(rng, d=5, trials=2000):
    """Random search over binary matrices for A inside B with
    f(B+x) - f(B) > f(A+x) - f(A).

    Returns ``(A, B, x, lhs, rhs)`` for the first violation found, or None.
    """
    for _ in range(trials):
        nb = int(rng.integers(d, d + 3))
        B = rng.integers(0, 2, size=(d, nb)).astype(float)
        x = rng.integers(0, 2, size=d).astype(float)
        na = int(rng.integers(d, nb + 1))
        A = B[:, :na]
        try:
            fa, fax = objective_f(A), objective_f(np.column_stack([A, x]))
            fb, fbx = objective_f(B), objective_f(np.column_stack([B, x]))
        except SingularMatrixError:
            continue
        if (fbx - fb) > (fax - fa) + 1e-9:
            return A, B, x, fbx - fb, fax - fa
    return None


@dataclass
class Check:
    name: str
    expected: float
    computed: float
    passed: bool


def _close(name, expected, computed, tol):
    return Check(name, expected, computed, abs(expected - computed) <= tol)


def theory_checks(fixture=None, eta_sq=12.0):
    """All numeric consequences of the constructions, as a list of Checks."""
    fixture = counterexample_fixture() if fixture is None else fixture
    checks = []

    values = fixture.values()
    for key, exp in fixture.expected.items():
        checks.append(_close(f"counterexample {key}", exp, values[key], 1e-3))
    d1 = values["f(M1+x)"] - values["f(M1)"]
    d2 = values["f(M2+x)"] - values["f(M2)"]
    checks.append(_close("counterexample gain f(M1+x)-f(M1)", -1.6667, d1, 1e-3))
    checks.append(_close("counterexample gain f(M2+x)-f(M2)", -2.1467, d2, 1e-3))
    violated = fixture.supermodularity_violated()
    checks.append(Check("supermodularity violated", 1.0, float(violated), violated))

    for q in (1, 2, 3):
        inst = cover_instance(q)
        g = build_gadget(inst, eta_sq)
        cover = list(range(q))
        f_cover, exact = verify_cover_value(g, cover)
        checks.append(_close(f"q={q} exact cover f = theta", g.theta, f_cover, 1e-8))
        checks.append(_close(f"q={q} tr(BB^T) = k + k eta^2", g.k + g.k * eta_sq,
                             gadget_trace(g, g.selection(cover)), 1e-9))
        eig = selection_eigenvalues(g, cover)
        want = np.array([eta_sq + 3] * q + [eta_sq] * (g.k - q))
        err = float(np.max(np.abs(eig - want)))
        checks.append(Check(f"q={q} spectrum q x (eta^2+3), (k-q) x eta^2", 0.0, err, err <= 1e-7))
        best, best_subset, all_values = exhaustive_cover_search(g)
        non_cover_min = min((v for c, v in all_values.items() if not inst.is_exact_cover(c)),
                            default=math.inf)
        checks.append(_close(f"q={q} exhaustive minimum = theta", g.theta, best, 1e-8))
        checks.append(Check(f"q={q} every non-cover above theta", g.theta, non_cover_min,
                            non_cover_min > g.theta + 1e-12))

    inst = overlap_instance()
    g = build_gadget(inst, eta_sq)
    f_ex, exact = verify_cover_value(g, [0, 1, 2])
    checks.append(_close("overlap selection f = alpha", g.alpha, f_ex, 1e-8))
    eig = overlap_component_eigenvalues(inst, [0, 1, 2])
    err = float(np.max(np.abs(eig - np.array([4, 2, 0, 0, 0, 0.0]))))
    checks.append(Check("overlap component eigenvalues {4,2,0,0,0,0}", 0.0, err, err <= 1e-7))
    return checks


def cover_instance(q):
    """Instance on 3q elements whose first q sets form the unique exact cover.

    Two extra sets are added that straddle cover blocks, so non-cover
    selections exist for every q.
    """
    k = 3 * q
    sets = [(3 * i, 3 * i + 1, 3 * i + 2) for i in range(q)]
    if q == 1:
        return X3CInstance(1, tuple(sets))
    sets.append((2, 3, 4))
    sets.append((0, 4, k - 1))
    return X3CInstance(q, tuple(sets))
