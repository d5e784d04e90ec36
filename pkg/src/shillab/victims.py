"""Black-box victims: item-based CF and implicit-feedback weighted MF."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graphdata import RatingGraph


@dataclass
class ItemCFModel:
    sim: np.ndarray          # (items, items), symmetric, unit diagonal
    n_sim: int
    neighbours: sp.csr_matrix = None  # row i keeps sim(i, j) for the n_sim most similar j

    def scores(self, graph: RatingGraph, users=None) -> np.ndarray:
        """Predicted ratings; items with no usable neighbour score -inf."""
        R = graph.R if users is None else graph.R[users]
        B = (R > 0).astype(float)
        K = self.neighbours
        num = np.asarray((R @ K.T).todense())
        den = np.asarray((B @ abs(K).T).todense())
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(den > 0, num / np.where(den > 0, den, 1.0), -np.inf)
        return out


def adjusted_cosine(graph: RatingGraph) -> np.ndarray:
    """Cosine between item columns after subtracting each user's mean rating."""
    R = graph.R.tocoo()
    centred = sp.csr_matrix((R.data - graph.user_mean[R.row], (R.row, R.col)), shape=R.shape)
    dots = np.asarray((centred.T @ centred).todense())
    norms = np.sqrt(np.diag(dots))
    safe = np.where(norms > 0, norms, 1.0)
    sim = dots / safe[:, None] / safe[None, :]
    sim[norms == 0, :] = 0.0
    sim[:, norms == 0] = 0.0
    sim = np.clip((sim + sim.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(sim, 1.0)
    return sim


def train_itemcf(graph: RatingGraph, n_sim: int = 20) -> ItemCFModel:
    if graph.n_edges == 0:
        raise ValueError("empty graph")
    sim = adjusted_cosine(graph)
    m = sim.shape[0]
    off = sim.copy()
    np.fill_diagonal(off, 0.0)
    k = min(n_sim, m - 1)
    rows, cols, vals = [], [], []
    if k > 0:
        # rank by similarity, ties by ascending item id; zero similarities carry no weight
        order = np.argsort(-off, axis=1, kind="stable")[:, :k]
        rr = np.repeat(np.arange(m), k)
        cc = order.ravel()
        vv = off[rr, cc]
        keep = (vv != 0) & (rr != cc)
        rows, cols, vals = rr[keep], cc[keep], vv[keep]
    K = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    return ItemCFModel(sim, n_sim, K)


@dataclass
class WMFModel:
    X: np.ndarray
    Y: np.ndarray
    alpha: float
    reg: float
    history: list = field(default_factory=list)

    def scores(self, graph: RatingGraph, users=None) -> np.ndarray:
        X = self.X if users is None else self.X[users]
        return X @ self.Y.T

    @property
    def rank(self) -> int:
        return self.X.shape[1]


def _wmf_half(C: sp.csr_matrix, F: np.ndarray, reg: float) -> np.ndarray:
    """Hu-Koren-Volinsky update: (F^T F + F^T (C_u - I) F + reg I)^{-1} F^T C_u p_u."""
    k = F.shape[1]
    FtF = F.T @ F
    Cm1 = C.copy()
    Cm1.data = Cm1.data - 1.0
    outer = np.einsum("ij,ik->ijk", F, F).reshape(F.shape[0], k * k)
    A = np.asarray(Cm1 @ outer).reshape(-1, k, k) + FtF + reg * np.eye(k)
    b = np.asarray(C @ F)
    return np.linalg.solve(A, b[..., None])[..., 0]


def wmf_loss(model: WMFModel, C: sp.csr_matrix) -> float:
    X, Y = model.X, model.Y
    full = float(np.sum((X.T @ X) * (Y.T @ Y)))  # sum over all pairs of (x.y)^2
    coo = C.tocoo()
    pred = np.einsum("ij,ij->i", X[coo.row], Y[coo.col])
    observed = np.sum(coo.data * (1.0 - pred) ** 2) - np.sum(pred ** 2)
    return float(full + observed + model.reg * (np.sum(X * X) + np.sum(Y * Y)))


def train_wmf(graph: RatingGraph, rank: int = 32, alpha: float = 40.0, reg: float = 0.1,
              sweeps: int = 15, rng: np.random.Generator | None = None) -> WMFModel:
    """Implicit ALS with confidence 1 + alpha * r on rated pairs, preference 1 iff rated."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > min(graph.n_users, graph.n_items):
        raise ValueError(f"rank {rank} exceeds min(|U|, |I|)")
    rng = rng if rng is not None else np.random.default_rng(0)
    C = graph.R.copy()
    C.data = 1.0 + alpha * C.data
    Ct = C.T.tocsr()
    model = WMFModel(rng.normal(0, 0.01, (graph.n_users, rank)),
                     rng.normal(0, 0.01, (graph.n_items, rank)), alpha, reg)
    for _ in range(sweeps):
        model.X = _wmf_half(C, model.Y, reg)
        model.Y = _wmf_half(Ct, model.X, reg)
        model.history.append(wmf_loss(model, C))
    return model


def recommend_topk(model, graph: RatingGraph, user: int, k: int) -> list[int]:
    return [int(i) for i in recommend_all(model, graph, k, users=[user])[0] if i >= 0]


def recommend_all(model, graph: RatingGraph, k: int, users=None, chunk: int = 1024) -> np.ndarray:
    """Top-k unrated items per user, ties by ascending item id; -1 pads short lists."""
    if k <= 0:
        raise ValueError("k must be positive")
    users = np.arange(graph.n_users) if users is None else np.asarray(users)
    out = np.full((users.size, k), -1, dtype=np.int64)
    for lo in range(0, users.size, chunk):
        us = users[lo:lo + chunk]
        S = model.scores(graph, us).astype(np.float64)
        rated = graph.R[us]
        S[rated.nonzero()] = np.nan
        for row, s in enumerate(S):
            valid = ~np.isnan(s)
            ids = np.flatnonzero(valid)
            order = ids[np.lexsort((ids, -s[ids]))][:k]
            out[lo + row, :order.size] = order
    return out
