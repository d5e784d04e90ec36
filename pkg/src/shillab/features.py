"""The ten rating-graph features and their min-max normalisation.

The formulas are written from the user side.  The item side reuses them with
the roles swapped: an item's "profile" is its rater list, counterpart means
are user means, and the popular set is the most active users.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphdata import RatingGraph, top_fraction

FEATURE_NAMES = ("rdma", "length_var", "fmv", "fac", "mean_var",
                 "fmtd", "fsti", "fspii", "fsmaxri", "fsari")
N_FEATURES = len(FEATURE_NAMES)
FILLER_SAMPLE = 50
POPULAR_FRACTION = 0.05


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class NormParams:
    lo: np.ndarray
    hi: np.ndarray


@dataclass
class _Side:
    """Everything the feature formulas need from one side of the graph."""
    indptr: np.ndarray
    nbrs: np.ndarray
    vals: np.ndarray
    sizes: np.ndarray          # |N_j| for every node on this side
    other_count: np.ndarray    # M_i for nodes on the other side
    other_mean: np.ndarray     # mean rating of nodes on the other side
    own_mean: np.ndarray
    popular: np.ndarray        # boolean mask over the other side
    n_other: int
    r_max: float
    r_avg: float


def _user_side(graph: RatingGraph) -> _Side:
    R = graph.R
    return _Side(R.indptr, R.indices, R.data, graph.user_count, graph.item_count,
                 graph.item_mean, graph.user_mean,
                 _mask(top_fraction(graph.item_count, POPULAR_FRACTION), graph.n_items),
                 graph.n_items, float(graph.r_max), graph.r_avg)


def _item_side(graph: RatingGraph) -> _Side:
    Rt = graph.Rt
    return _Side(Rt.indptr, Rt.indices, Rt.data, graph.item_count, graph.user_count,
                 graph.user_mean, graph.item_mean,
                 _mask(top_fraction(graph.user_count, POPULAR_FRACTION), graph.n_users),
                 graph.n_users, float(graph.r_max), graph.r_avg)


def _mask(ids, n):
    m = np.zeros(n, dtype=bool)
    m[ids] = True
    return m


def filler_sample(profile: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Positions (into the profile) of the hypothesised filler partition."""
    if profile.size <= FILLER_SAMPLE:
        return np.arange(profile.size)
    return np.sort(rng.choice(profile.size, size=FILLER_SAMPLE, replace=False))


def _node_features(side: _Side, node: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = side.indptr[node], side.indptr[node + 1]
    nbrs, r = side.nbrs[lo:hi], side.vals[lo:hi]
    n = nbrs.size
    if n == 0:
        raise FeatureError(f"node {node} has an empty profile")
    mean_i = side.other_mean[nbrs]
    dev = r - mean_i

    rdma = float(np.sum(np.abs(dev) / side.other_count[nbrs]) / n)

    diff = side.sizes - n
    denom = float(np.sum(diff * diff))
    length_var = (n - side.sizes.mean()) / denom if denom > 0 else 0.0

    h = filler_sample(nbrs, rng)
    hd = dev[h]
    fmv = float(np.mean(hd * hd))
    fac_den = math.sqrt(float(np.sum(hd * hd)))
    fac = float(np.sum(hd)) / fac_den if fac_den > 0 else 0.0

    is_max = r == side.r_max
    filler = r[~is_max]
    if filler.size:
        mean_var = float(np.mean((filler - side.own_mean[node]) ** 2))
    else:
        mean_var = 0.0
    fmtd = abs(side.r_max - float(filler.mean())) if filler.size and is_max.any() else 0.0

    fsti = n / side.n_other
    fspii = float(np.count_nonzero(side.popular[nbrs])) / n
    fsmaxri = float(np.count_nonzero(is_max)) / n
    avg_lo, avg_hi = math.floor(side.r_avg), math.ceil(side.r_avg)
    fsari = float(np.count_nonzero((r == avg_lo) | (r == avg_hi))) / n
    return np.array([rdma, length_var, fmv, fac, mean_var, fmtd, fsti, fspii, fsmaxri, fsari])


def compute_user_features(graph: RatingGraph, user: int, rng: np.random.Generator) -> np.ndarray:
    return _node_features(_user_side(graph), user, rng)


def compute_item_features(graph: RatingGraph, item: int, rng: np.random.Generator) -> np.ndarray:
    return _node_features(_item_side(graph), item, rng)


def compute_all(graph: RatingGraph, rng: np.random.Generator):
    """Raw feature matrices (users, items); nodes without ratings get zeros.

    Users are processed in id order, then items, so filler sampling consumes
    the generator deterministically.
    """
    out = []
    for side, n in ((_user_side(graph), graph.n_users), (_item_side(graph), graph.n_items)):
        X = np.zeros((n, N_FEATURES))
        for v in range(n):
            if side.sizes[v] > 0:
                X[v] = _node_features(side, v, rng)
        out.append(X)
    return out[0], out[1]


def normalize(raw: np.ndarray, params: NormParams | None = None):
    """Per-column min-max scaling to [0, 1]; constant columns map to 0."""
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    if raw.size == 0:
        raise FeatureError("cannot normalise an empty matrix")
    fitted = params is None
    if fitted:
        params = NormParams(raw.min(axis=0), raw.max(axis=0))
    span = params.hi - params.lo
    safe = np.where(span > 0, span, 1.0)
    X = np.where(span > 0, (raw - params.lo) / safe, 0.0)
    if not fitted:
        X = np.clip(X, 0.0, 1.0)
    return X, params


def export_csv(path, X: np.ndarray, ids=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["id"] if ids is not None else []) + list(FEATURE_NAMES))
        for k, row in enumerate(X):
            prefix = [ids[k]] if ids is not None else []
            w.writerow(prefix + [repr(float(v)) for v in row])
