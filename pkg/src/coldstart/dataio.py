"""Rating files, dataset containers, user-level splits and synthetic data."""
import csv
import logging
import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import DatasetParseError

log = logging.getLogger(__name__)

FORMATS = ("udata", "dat", "csv")


@dataclass(frozen=True)
class DatasetDescriptor:
    """Where a ratings file lives and what it should contain.

    ``format`` is one of ``udata`` (tab separated ``user item rating ts``),
    ``dat`` (``user::item::rating::ts``) or ``csv`` (header
    ``user,item,rating``).  Expected counts are optional and only produce a
    warning when they disagree with the parsed file.
    """

    name: str
    path: str
    format: str = "udata"
    scale: tuple = (1.0, 5.0)
    expected_ratings: int = None
    expected_users: int = None
    expected_items: int = None

    def __post_init__(self):
        if self.format not in FORMATS:
            raise ValueError(f"unknown format {self.format!r}; expected one of {FORMATS}")
        if self.scale is not None:
            lo, hi = (float(x) for x in self.scale)
            if not lo < hi:
                raise ValueError("scale must be (low, high) with low < high")
            object.__setattr__(self, "scale", (lo, hi))

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        if doc.get("scale") is not None:
            doc["scale"] = tuple(doc["scale"])
        return cls(**doc)


def ml100k(path):
    return DatasetDescriptor("ml-100k", str(path), "udata", (1.0, 5.0), 100_000, 943, 1682)


def ml1m(path):
    return DatasetDescriptor("ml-1m", str(path), "dat", (1.0, 5.0), 1_000_209, 6040, 3706)


@dataclass
class RatingsDataset:
    """Sparse ratings over dense 0-based user and item indices.

    ``user_ids[u]`` and ``item_ids[i]`` give the original identifiers of
    index ``u`` and ``i``.  Datasets derived by splitting keep the full index
    ranges of their parent so that factor matrices stay aligned.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    n_users: int
    n_items: int
    user_ids: np.ndarray = None
    item_ids: np.ndarray = None
    scale: tuple = None
    name: str = "dataset"
    _by_user: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.users = np.ascontiguousarray(self.users, dtype=np.int64).reshape(-1)
        self.items = np.ascontiguousarray(self.items, dtype=np.int64).reshape(-1)
        self.ratings = np.ascontiguousarray(self.ratings, dtype=np.float64).reshape(-1)
        self.n_users, self.n_items = int(self.n_users), int(self.n_items)
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")
        if self.user_ids is None:
            self.user_ids = np.arange(self.n_users)
        if self.item_ids is None:
            self.item_ids = np.arange(self.n_items)
        self.user_ids = np.asarray(self.user_ids)
        self.item_ids = np.asarray(self.item_ids)
        if len(self.user_ids) != self.n_users or len(self.item_ids) != self.n_items:
            raise ValueError("id maps must have one entry per index")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.n_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.n_items:
                raise ValueError("item index out of range")
            if not np.all(np.isfinite(self.ratings)):
                raise ValueError("ratings must be finite")
            keys = self.users * self.n_items + self.items
            if len(np.unique(keys)) != len(keys):
                raise ValueError("duplicate (user, item) rating")
            if self.scale is not None:
                lo, hi = self.scale
                if self.ratings.min() < lo or self.ratings.max() > hi:
                    raise ValueError(f"ratings fall outside the declared scale {self.scale}")

    def __len__(self):
        return len(self.ratings)

    @property
    def n_ratings(self):
        return len(self.ratings)

    def user_ratings(self, u):
        """(item indices, ratings) of user ``u``, items in increasing order."""
        if self._by_user is None:
            order = np.lexsort((self.items, self.users))
            bounds = np.searchsorted(self.users[order], np.arange(self.n_users + 1))
            self._by_user = (order, bounds)
        order, bounds = self._by_user
        idx = order[bounds[u]:bounds[u + 1]]
        return self.items[idx], self.ratings[idx]

    def rated_users(self):
        return np.unique(self.users)

    def rated_items(self):
        return np.unique(self.items)

    def item_counts(self):
        return np.bincount(self.items, minlength=self.n_items)

    def subset(self, mask):
        """Dataset with only the triples where ``mask`` is true; index ranges are kept."""
        mask = np.asarray(mask, dtype=bool)
        return RatingsDataset(self.users[mask], self.items[mask], self.ratings[mask],
                              self.n_users, self.n_items, self.user_ids, self.item_ids,
                              self.scale, self.name)

    def restrict_users(self, users):
        return self.subset(np.isin(self.users, np.asarray(users)))

    def canonical(self):
        """Triples sorted by (user, item), for comparisons."""
        order = np.lexsort((self.items, self.users))
        return self.users[order], self.items[order], self.ratings[order]

    def same_as(self, other):
        a, b = self.canonical(), other.canonical()
        return (self.n_users == other.n_users and self.n_items == other.n_items
                and all(np.array_equal(x, y) for x, y in zip(a, b))
                and np.array_equal(self.user_ids, other.user_ids)
                and np.array_equal(self.item_ids, other.item_ids))


def _split_line(line, fmt):
    if fmt == "udata":
        parts = line.split("\t")
        if len(parts) < 3:
            parts = line.split()
    elif fmt == "dat":
        parts = line.split("::")
    else:
        parts = next(csv.reader([line]))
    return parts


def _parse_id(token):
    token = token.strip()
    try:
        return int(token)
    except ValueError:
        if not token:
            raise
        return token


def load_dataset(desc):
    """Parse a ratings file into a RatingsDataset.

    Ids are re-indexed densely in increasing order of the original id.
    Malformed lines raise DatasetParseError carrying the 1-based line number.
    """
    if isinstance(desc, (str, os.PathLike)):
        desc = DatasetDescriptor(Path(desc).stem, str(desc), _guess_format(desc), None)
    path = Path(desc.path)
    if not path.is_file():
        raise DatasetParseError("file not found", path=str(path))
    raw_u, raw_i, raw_r = [], [], []
    seen = set()
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if desc.format == "csv" and not raw_u and lineno == 1:
                header = [h.strip().lower() for h in _split_line(line, "csv")]
                if header[:3] != ["user", "item", "rating"]:
                    raise DatasetParseError("CSV header must start with user,item,rating",
                                            path=str(path), lineno=lineno)
                continue
            parts = _split_line(line, desc.format)
            if len(parts) < 3:
                raise DatasetParseError(f"expected at least 3 fields, found {len(parts)}",
                                        path=str(path), lineno=lineno)
            try:
                u, i = _parse_id(parts[0]), _parse_id(parts[1])
                r = float(parts[2])
            except ValueError:
                raise DatasetParseError(f"cannot parse {line!r}", path=str(path), lineno=lineno) from None
            if not math.isfinite(r):
                raise DatasetParseError("non-finite rating", path=str(path), lineno=lineno)
            if desc.scale is not None and not desc.scale[0] <= r <= desc.scale[1]:
                raise DatasetParseError(f"rating {r} outside scale {desc.scale}",
                                        path=str(path), lineno=lineno)
            if (u, i) in seen:
                raise DatasetParseError(f"duplicate rating for user {u}, item {i}",
                                        path=str(path), lineno=lineno)
            seen.add((u, i))
            raw_u.append(u)
            raw_i.append(i)
            raw_r.append(r)
    if not raw_r:
        warnings.warn(f"{path} contains no ratings", RuntimeWarning, stacklevel=2)
    user_ids = np.array(sorted(set(raw_u), key=_sort_key))
    item_ids = np.array(sorted(set(raw_i), key=_sort_key))
    u_index = {v: k for k, v in enumerate(user_ids.tolist())}
    i_index = {v: k for k, v in enumerate(item_ids.tolist())}
    ds = RatingsDataset(
        np.fromiter((u_index[u] for u in raw_u), dtype=np.int64, count=len(raw_u)),
        np.fromiter((i_index[i] for i in raw_i), dtype=np.int64, count=len(raw_i)),
        np.array(raw_r, dtype=float),
        len(user_ids), len(item_ids), user_ids, item_ids, desc.scale, desc.name,
    )
    _check_counts(desc, ds)
    log.info("loaded %s: %d ratings, %d users, %d items", desc.name, ds.n_ratings, ds.n_users, ds.n_items)
    return ds


def _sort_key(x):
    return (0, x, "") if isinstance(x, int) else (1, 0, str(x))


def _guess_format(path):
    suffix = Path(path).suffix.lower()
    return {".dat": "dat", ".csv": "csv"}.get(suffix, "udata")


def _check_counts(desc, ds):
    for label, want, got in (("ratings", desc.expected_ratings, ds.n_ratings),
                             ("users", desc.expected_users, ds.n_users),
                             ("items", desc.expected_items, ds.n_items)):
        if want is not None and want != got:
            warnings.warn(f"{desc.name}: expected {want} {label}, parsed {got}", RuntimeWarning, stacklevel=3)


def save_dataset(ds, path, fmt="udata"):
    """Write ``ds`` with its original ids; timestamps are written as 0."""
    if fmt not in FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    u, i, r = ds.canonical()
    uid, iid = ds.user_ids[u], ds.item_ids[i]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            fh.write("user,item,rating\n")
        sep = {"udata": "\t", "dat": "::", "csv": ","}[fmt]
        tail = "" if fmt == "csv" else f"{sep}0"
        for a, b, c in zip(uid.tolist(), iid.tolist(), r.tolist()):
            fh.write(f"{a}{sep}{b}{sep}{c!r}{tail}\n")


def split_warm_cold(dataset, warm_fraction=0.7, seed=0):
    """Partition users at random; ``floor(warm_fraction * n_users)`` become warm.

    Returns the warm-only dataset (same index ranges) and the sorted array
    of cold user indices.
    """
    if not 0 < warm_fraction < 1:
        raise ValueError("warm_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(dataset.n_users)
    n_warm = int(math.floor(warm_fraction * dataset.n_users + 1e-9))
    warm = np.sort(perm[:n_warm])
    cold = np.sort(perm[n_warm:])
    return dataset.restrict_users(warm), cold


def synth_generate(m, n, d, noise_sigma=0.0, seed=0, density=1.0, factor_std=1.0):
    """Synthetic ratings ``R = U^T V + noise`` with Gaussian factors.

    ``noise_sigma`` is a scalar or a length-``n`` vector of per-item noise
    levels.  ``density`` < 1 keeps each (user, item) pair independently with
    that probability.  Returns ``(dataset, model)`` where ``model`` holds the
    generating factors.
    """
    from .pmf import FactorModel

    if min(m, n, d) < 1:
        raise ValueError("m, n and d must be positive")
    if not 0 < density <= 1:
        raise ValueError("density must be in (0, 1]")
    rng = np.random.default_rng(seed)
    U = rng.normal(0.0, factor_std, size=(d, m))
    V = rng.normal(0.0, factor_std, size=(d, n))
    sigma = np.broadcast_to(np.asarray(noise_sigma, dtype=float), (n,))
    if np.any(sigma < 0):
        raise ValueError("noise_sigma must be nonnegative")
    R = U.T @ V + rng.standard_normal((m, n)) * sigma
    keep = np.ones((m, n), dtype=bool) if density == 1 else rng.random((m, n)) < density
    users, items = np.nonzero(keep)
    ds = RatingsDataset(users, items, R[users, items], m, n, name="synthetic")
    model = FactorModel(U, V, hyper={"source": "synth_generate", "noise_sigma": sigma.tolist()}, seed=seed)
    return ds, model


def holdout_split(dataset, test_fraction=0.2, seed=0):
    """Random rating-level split into (train, test) datasets."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * dataset.n_ratings))
    test = np.zeros(dataset.n_ratings, dtype=bool)
    test[rng.permutation(dataset.n_ratings)[:n_test]] = True
    return dataset.subset(~test), dataset.subset(test)
