"""User-item rating graph, ingestion, and the caches the rest of the lab reads."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.stats import rankdata


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class RatingScale:
    r_max: int = 5
    implicit: bool = False  # counts to be binned into 1..r_max


@dataclass(frozen=True)
class DatasetStats:
    users: int
    items: int
    interactions: int

    @property
    def sparsity(self) -> float:
        return 1.0 - self.interactions / (self.users * self.items)

    def table(self, name: str = "dataset") -> str:
        head = f"{'Dataset':<14}{'Users':>10}{'Items':>10}{'Interactions':>14}{'Sparsity':>10}"
        row = (f"{name:<14}{self.users:>10,}{self.items:>10,}{self.interactions:>14,}"
               f"{100 * self.sparsity:>9.2f}%")
        return head + "\n" + row


class RatingGraph:
    """Immutable bipartite user-item graph with rating-weighted edges.

    Edges are stored as parallel arrays sorted by (user, item).  All derived
    caches (degrees, means, CSR views) are computed once in the constructor;
    "mutations" return new graphs.
    """

    def __init__(self, users, items, ratings, n_users: int, n_items: int, r_max: int = 5,
                 user_tokens=None, item_tokens=None):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        ratings = np.asarray(ratings, dtype=np.float64)
        if not (users.shape == items.shape == ratings.shape):
            raise ValueError("edge arrays must have equal length")
        if users.size and (users.min() < 0 or users.max() >= n_users
                           or items.min() < 0 or items.max() >= n_items):
            raise ValueError("edge endpoint out of range")
        if ratings.size and (ratings.min() < 1 or ratings.max() > r_max):
            raise ValueError(f"ratings must lie in [1, {r_max}]")
        order = np.lexsort((items, users))
        users, items, ratings = users[order], items[order], ratings[order]
        key = users * n_items + items
        if key.size > 1 and np.any(key[1:] == key[:-1]):
            raise ValueError("duplicate (user, item) pair")

        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.r_max = int(r_max)
        self.user_tokens = list(user_tokens) if user_tokens is not None else [str(u) for u in range(n_users)]
        self.item_tokens = list(item_tokens) if item_tokens is not None else [str(i) for i in range(n_items)]
        self.users, self.items, self.ratings = users, items, ratings

        self.user_count = np.bincount(users, minlength=n_users)
        self.item_count = np.bincount(items, minlength=n_items)
        u_sum = np.bincount(users, weights=ratings, minlength=n_users)
        i_sum = np.bincount(items, weights=ratings, minlength=n_items)
        with np.errstate(invalid="ignore", divide="ignore"):
            self.user_mean = np.where(self.user_count > 0, u_sum / np.maximum(self.user_count, 1), 0.0)
            self.item_mean = np.where(self.item_count > 0, i_sum / np.maximum(self.item_count, 1), 0.0)
        self.r_avg = float(ratings.mean()) if ratings.size else 0.0

        self.R = sp.csr_matrix((ratings, (users, items)), shape=(n_users, n_items))
        self.Rt = self.R.T.tocsr()
        for arr in (self.users, self.items, self.ratings, self.user_count, self.item_count,
                    self.user_mean, self.item_mean):
            arr.setflags(write=False)

    # -- accessors -------------------------------------------------------------

    @property
    def n_edges(self) -> int:
        return int(self.ratings.size)

    def user_profile(self, u: int):
        """(item ids, ratings) rated by user ``u``, ascending by item id."""
        lo, hi = self.R.indptr[u], self.R.indptr[u + 1]
        return self.R.indices[lo:hi], self.R.data[lo:hi]

    def item_raters(self, i: int):
        lo, hi = self.Rt.indptr[i], self.Rt.indptr[i + 1]
        return self.Rt.indices[lo:hi], self.Rt.data[lo:hi]

    def stats(self) -> DatasetStats:
        return DatasetStats(self.n_users, self.n_items, self.n_edges)

    def item_id(self, token) -> int:
        try:
            return self.item_tokens.index(str(token))
        except ValueError:
            raise KeyError(f"unknown item {token!r}") from None

    def edge_key(self):
        return (self.users.tobytes(), self.items.tobytes(), self.ratings.tobytes())

    def __eq__(self, other):
        if not isinstance(other, RatingGraph):
            return NotImplemented
        return (self.n_users == other.n_users and self.n_items == other.n_items
                and self.r_max == other.r_max and self.edge_key() == other.edge_key()
                and self.user_tokens == other.user_tokens and self.item_tokens == other.item_tokens)

    __hash__ = None

    def __repr__(self):
        return (f"RatingGraph(users={self.n_users}, items={self.n_items}, "
                f"edges={self.n_edges}, r_max={self.r_max})")


# -- ingestion ----------------------------------------------------------------

_SPLIT = re.compile(r"[,\t ]+")


def quantile_bins(values, r_max: int) -> np.ndarray:
    """Map raw counts to 1..r_max with equal-mass buckets (ties share a bucket)."""
    values = np.asarray(values, dtype=np.float64)
    pct = rankdata(values, method="max") / values.size
    return np.clip(np.ceil(r_max * pct - 1e-9), 1, r_max)


def load_ratings(path, scale: RatingScale = RatingScale()) -> RatingGraph:
    path = Path(path)
    triples: dict[tuple[str, str], float] = {}
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = _SPLIT.split(line)
            if len(parts) < 3:
                raise IngestionError(f"{path} line {lineno}: expected user, item, value")
            try:
                value = float(parts[2])
            except ValueError:
                raise IngestionError(f"{path} line {lineno}: unparseable value {parts[2]!r}") from None
            if not math.isfinite(value):
                raise IngestionError(f"{path} line {lineno}: non-finite value")
            if not scale.implicit and not 1 <= value <= scale.r_max:
                raise IngestionError(f"{path} line {lineno}: rating {value} outside [1, {scale.r_max}]")
            u, i = parts[0], parts[1]
            user_ids.setdefault(u, len(user_ids))
            item_ids.setdefault(i, len(item_ids))
            triples.pop((u, i), None)  # keep last occurrence
            triples[(u, i)] = value
    if not triples:
        raise IngestionError(f"{path}: no ratings")
    keys = list(triples)
    values = np.array([triples[k] for k in keys])
    if scale.implicit:
        values = quantile_bins(values, scale.r_max)
    return RatingGraph(
        [user_ids[u] for u, _ in keys], [item_ids[i] for _, i in keys], values,
        len(user_ids), len(item_ids), scale.r_max,
        user_tokens=list(user_ids), item_tokens=list(item_ids),
    )


def save_ratings(graph: RatingGraph, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for u, i, r in zip(graph.users, graph.items, graph.ratings):
            fh.write(f"{graph.user_tokens[u]}\t{graph.item_tokens[i]}\t{r:g}\n")


# -- queries ------------------------------------------------------------------

def top_fraction(counts: np.ndarray, fraction: float) -> np.ndarray:
    """Ids of the ceil(fraction * n) largest counts, ties by ascending id."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    n = counts.size
    k = min(n, math.ceil(fraction * n - 1e-9))
    order = np.lexsort((np.arange(n), -counts))
    return order[:k]


def popular_items(graph: RatingGraph, fraction: float) -> np.ndarray:
    return top_fraction(graph.item_count, fraction)


def two_hop_items(graph: RatingGraph, target: int) -> np.ndarray:
    if not 0 <= target < graph.n_items:
        raise KeyError(f"unknown item {target}")
    raters, _ = graph.item_raters(target)
    if raters.size == 0:
        return np.empty(0, dtype=np.int64)
    co = np.unique(graph.R[raters].indices)
    return co[co != target].astype(np.int64)


# -- injection ----------------------------------------------------------------

def inject_profile(graph: RatingGraph, profile, b_item: int | None = None) -> RatingGraph:
    return inject_profiles(graph, [profile], b_item)


def inject_profiles(graph: RatingGraph, profiles, b_item: int | None = None) -> RatingGraph:
    """New graph with one extra user per profile (items/ratings taken from
    ``profile.items`` and ``profile.ratings``)."""
    users, items, ratings = [graph.users], [graph.items], [graph.ratings]
    tokens = list(graph.user_tokens)
    for k, prof in enumerate(profiles):
        its = np.asarray(prof.items, dtype=np.int64)
        rs = np.asarray(prof.ratings, dtype=np.float64)
        if its.size == 0:
            raise ValueError("empty profile")
        if its.min() < 0 or its.max() >= graph.n_items:
            raise KeyError("profile references an unknown item")
        if b_item is not None and its.size > b_item:
            raise ValueError(f"profile has {its.size} items, budget is {b_item}")
        uid = graph.n_users + k
        users.append(np.full(its.size, uid))
        items.append(its)
        ratings.append(rs)
        tokens.append(f"fake-{k}")
    return RatingGraph(np.concatenate(users), np.concatenate(items), np.concatenate(ratings),
                       graph.n_users + len(profiles), graph.n_items, graph.r_max,
                       user_tokens=tokens, item_tokens=graph.item_tokens)


# -- synthetic data -----------------------------------------------------------

def synthetic_ratings(n_users: int = 2928, n_items: int = 1835, n_interactions: int = 20473,
                      n_groups: int = 20, r_max: int = 5, seed: int = 0) -> RatingGraph:
    """Sparse, long-tailed, Amazon-like rating data with latent item groups.

    Defaults match the size of the Automotive benchmark (2,928 users, 1,835
    items, 20,473 ratings); ratings skew towards the top of the scale.
    """
    rng = np.random.default_rng(seed)
    item_group = rng.integers(0, n_groups, n_items)
    pop = rng.pareto(1.2, n_items) + 1.0
    quality = rng.normal(0.0, 0.6, n_items)
    user_group = rng.integers(0, n_groups, n_users)
    leniency = rng.normal(0.0, 0.5, n_users)

    act = rng.lognormal(0.0, 0.9, n_users)
    sizes = np.maximum(1, np.round(act / act.sum() * n_interactions)).astype(int)
    sizes = np.minimum(sizes, n_items // 4)
    excess = sizes.sum() - n_interactions
    while excess != 0:
        idx = rng.integers(0, n_users)
        if excess > 0 and sizes[idx] > 1:
            sizes[idx] -= 1
            excess -= 1
        elif excess < 0 and sizes[idx] < n_items // 4:
            sizes[idx] += 1
            excess += 1

    global_p = pop / pop.sum()
    by_group = [np.flatnonzero(item_group == g) for g in range(n_groups)]
    users, items = [], []
    for u in range(n_users):
        g = by_group[user_group[u]]
        w = 0.6 * global_p
        w[g] += 0.4 * pop[g] / pop[g].sum()
        chosen = rng.choice(n_items, size=sizes[u], replace=False, p=w / w.sum())
        users.append(np.full(sizes[u], u))
        items.append(chosen)
    users = np.concatenate(users)
    items = np.concatenate(items)

    # every item gets at least one rating: move a random edge of a heavy user
    missing = np.setdiff1d(np.arange(n_items), items)
    counts = np.bincount(users, minlength=n_users)
    for it in missing:
        heavy = np.flatnonzero(counts[users] > 2)
        e = heavy[rng.integers(0, heavy.size)]
        if np.any((users == users[e]) & (items == it)):
            continue
        counts[users[e]] -= 1
        users[e] = rng.integers(0, n_users)
        counts[users[e]] += 1
        items[e] = it
    key = users * n_items + items
    _, first = np.unique(key, return_index=True)
    users, items = users[first], items[first]

    affinity = np.where(user_group[users] == item_group[items], 0.5, 0.0)
    latent = quality[items] + leniency[users] + affinity + rng.normal(0.0, 0.8, users.size)
    # thresholds give roughly 6/5/9/20/60 percent for ratings 1..5
    cuts = np.quantile(latent, [0.06, 0.11, 0.20, 0.40])
    ratings = 1 + np.searchsorted(cuts, latent)
    ratings = np.clip(ratings, 1, r_max).astype(np.float64)
    return RatingGraph(users, items, ratings, n_users, n_items, r_max)
