"""Influence of real users on the promotion objective, and a network that learns it.

The surrogate recommender is ridge-regularised explicit MF,

    L_RS = sum_{(u,i)} (r_ui - u_u . v_i)^2 + reg * (|U|^2 + |V|^2),

trained by ALS.  Its Hessian-vector product is written out analytically, so
influence needs only one conjugate-gradient solve per target item.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .features import N_FEATURES
from .graphdata import RatingGraph

log = logging.getLogger(__name__)


@dataclass
class SurrogateMF:
    U: np.ndarray
    V: np.ndarray
    reg: float
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    history: list = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    @property
    def rmse(self) -> float:
        e = self.residuals()
        return float(np.sqrt(np.mean(e * e))) if e.size else 0.0

    def residuals(self, U=None, V=None) -> np.ndarray:
        U = self.U if U is None else U
        V = self.V if V is None else V
        return self.ratings - np.einsum("ij,ij->i", U[self.users], V[self.items])

    def loss(self, U=None, V=None) -> float:
        U = self.U if U is None else U
        V = self.V if V is None else V
        e = self.residuals(U, V)
        return float(e @ e + self.reg * (np.sum(U * U) + np.sum(V * V)))

    def theta(self) -> np.ndarray:
        return np.concatenate([self.U.ravel(), self.V.ravel()])

    def split(self, vec: np.ndarray):
        nu = self.U.size
        return vec[:nu].reshape(self.U.shape), vec[nu:].reshape(self.V.shape)


def _ridge_rows(ind: sp.csr_matrix, vals: sp.csr_matrix, F: np.ndarray, reg: float) -> np.ndarray:
    """Solve (F_N^T F_N + reg I) x = F_N^T r for every row of a CSR pattern."""
    k = F.shape[1]
    outer = np.einsum("ij,ik->ijk", F, F).reshape(F.shape[0], k * k)
    A = np.asarray(ind @ outer).reshape(-1, k, k) + reg * np.eye(k)
    b = np.asarray(vals @ F)
    return np.linalg.solve(A, b[..., None])[..., 0]


def train_surrogate(graph: RatingGraph, rank: int = 16, reg: float = 1.0, epochs: int = 50,
                    rng: np.random.Generator | None = None, tol: float = 1e-7) -> SurrogateMF:
    """ALS sweeps (users, then items) until relative loss change < tol.

    Every sweep ends with the item half, so each item factor is exactly the
    ridge solution given the user factors; the attack's fold-in relies on it.
    """
    if rank < 1:
        raise ValueError("rank must be >= 1")
    if rank > min(graph.n_users, graph.n_items):
        raise ValueError(f"rank {rank} exceeds min(|U|, |I|)")
    rng = rng if rng is not None else np.random.default_rng(0)
    model = SurrogateMF(rng.normal(0, 0.1, (graph.n_users, rank)),
                        rng.normal(0, 0.1, (graph.n_items, rank)),
                        float(reg), graph.users, graph.items, graph.ratings)
    R, Rt = graph.R, graph.Rt
    B, Bt = (R > 0).astype(float), (Rt > 0).astype(float)
    prev = model.loss()
    for _ in range(epochs):
        model.U = _ridge_rows(B, R, model.V, model.reg)
        model.V = _ridge_rows(Bt, Rt, model.U, model.reg)
        cur = model.loss()
        model.history.append(cur)
        if abs(prev - cur) <= tol * max(1.0, abs(prev)):
            break
        prev = cur
    log.info("surrogate rank=%d reg=%g sweeps=%d rmse=%.4f", rank, reg, len(model.history), model.rmse)
    return model


# -- Hessian-vector products and CG -------------------------------------------

def _scatter(index, vals, n):
    return np.stack([np.bincount(index, weights=col, minlength=n) for col in vals.T], axis=1)


def hvp(model: SurrogateMF, vec: np.ndarray) -> np.ndarray:
    """Exact Hessian of L_RS times ``vec`` (flattened [U, V])."""
    dU, dV = model.split(vec)
    U, V, us, it = model.U, model.V, model.users, model.items
    e = model.residuals()
    s = np.einsum("ij,ij->i", dU[us], V[it]) + np.einsum("ij,ij->i", U[us], dV[it])
    hU = _scatter(us, s[:, None] * V[it] - e[:, None] * dV[it], U.shape[0])
    hV = _scatter(it, s[:, None] * U[us] - e[:, None] * dU[us], V.shape[0])
    return 2.0 * np.concatenate([hU.ravel(), hV.ravel()]) + 2.0 * model.reg * vec


def conjugate_gradient(apply, v: np.ndarray, damping: float, tol: float = 1e-6, maxiter: int = 100):
    """Solve (H + damping I) x = v.  Returns (x, iterations, residual norm)."""
    if damping <= 0:
        raise ValueError("damping must be positive")
    if not np.all(np.isfinite(v)):
        raise nc.NumericError("non-finite right-hand side")
    x = np.zeros_like(v)
    r = v.copy()
    p = r.copy()
    rs = float(r @ r)
    target = tol * float(np.sqrt(v @ v))
    it = 0
    while np.sqrt(rs) > target and it < maxiter:
        Ap = apply(p) + damping * p
        alpha = rs / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    return x, it, float(np.sqrt(rs))


def hvp_solve(model: SurrogateMF, v: np.ndarray, damping: float = 0.01) -> np.ndarray:
    x, it, res = conjugate_gradient(lambda p: hvp(model, p), v, damping)
    norm = float(np.sqrt(v @ v))
    ok = res <= 1e-6 * norm or it >= 100
    log.info("cg iterations=%d residual=%.3g (|v|=%.3g)", it, res, norm)
    assert ok, "CG exited early without meeting its residual bound"
    return x


# -- influence ---------------------------------------------------------------

def promotion_loss(U: np.ndarray, V: np.ndarray, target: int) -> float:
    """-sum_u log softmax_t(U V^T)_u."""
    S = U @ V.T
    m = S.max(axis=1, keepdims=True)
    lse = np.log(np.exp(S - m).sum(axis=1)) + m[:, 0]
    return float(np.sum(lse - S[:, target]))


def promotion_grad(model: SurrogateMF, target: int, n_real: int | None = None) -> np.ndarray:
    n_real = model.U.shape[0] if n_real is None else n_real
    U, V = model.U[:n_real], model.V
    S = U @ V.T
    P = np.exp(S - S.max(axis=1, keepdims=True))
    P /= P.sum(axis=1, keepdims=True)
    P[:, target] -= 1.0
    gU = np.zeros_like(model.U)
    gU[:n_real] = P @ V
    gV = P.T @ U
    return np.concatenate([gU.ravel(), gV.ravel()])


def edge_influence(model: SurrogateMF, target: int, damping: float = 0.01) -> np.ndarray:
    """Per-rating influence terms, aligned with ``model.users`` / ``model.items``.

    A user's score is the sum of the terms of their ratings, so the score is
    additive over any split of a profile.
    """
    s = hvp_solve(model, promotion_grad(model, target), damping)
    sU, sV = model.split(s)
    us, it = model.users, model.items
    e = model.residuals()
    return -2.0 * e * (np.einsum("ij,ij->i", sU[us], model.V[it])
                       + np.einsum("ij,ij->i", model.U[us], sV[it]))


def influence_scores(model: SurrogateMF, graph: RatingGraph, target: int,
                     damping: float = 0.01) -> np.ndarray:
    """Helpfulness of every user's ratings to the promotion of ``target``.

    score(z) = grad L_adv^T (H + damping I)^{-1} grad L_RS(z), i.e. minus the
    derivative of the promotion loss w.r.t. upweighting z: positive scores
    mean z's ratings pull the model towards ranking ``target`` higher.
    """
    per_edge = edge_influence(model, target, damping)
    return np.bincount(model.users, weights=per_edge, minlength=graph.n_users)


def influence_score(model: SurrogateMF, graph: RatingGraph, user: int, target: int,
                    damping: float = 0.01) -> float:
    if graph.user_count[user] == 0:
        raise ValueError(f"user {user} has an empty profile")
    return float(influence_scores(model, graph, target, damping)[user])


def standardize(raw: np.ndarray):
    mu = float(np.mean(raw))
    sd = float(np.std(raw))
    sd = sd if sd > 1e-12 * max(1.0, abs(mu)) else 1.0  # constant up to rounding
    return (raw - mu) / sd, mu, sd


def write_influence_cache(path, user_ids, raw, std) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "raw_score", "standardized_score"])
        for u, a, b in zip(user_ids, raw, std):
            w.writerow([u, repr(float(a)), repr(float(b))])


def read_influence_cache(path):
    ids, raw, std = [], [], []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["user_id"])
            raw.append(float(row["raw_score"]))
            std.append(float(row["standardized_score"]))
    return ids, np.array(raw), np.array(std)


# -- influence predictor ------------------------------------------------------

@dataclass
class InfluencePredictor:
    W1: nc.Tensor
    W2: nc.Tensor
    W3: nc.Tensor
    score_mean: float = 0.0
    score_std: float = 1.0
    history: list = field(default_factory=list)
    slope: float = 0.1

    def leaves(self):
        return [self.W1, self.W2, self.W3]


def init_ip(rng: np.random.Generator, hidden: int = 64, zero: bool = False) -> InfluencePredictor:
    def w(a, b):
        return nc.param(np.zeros((a, b)) if zero else rng.normal(0, np.sqrt(2.0 / (a + b)), (a, b)))
    return InfluencePredictor(w(N_FEATURES, hidden), w(hidden, hidden), w(hidden, 1))


def predict_influence(ip: InfluencePredictor, x) -> nc.Tensor:
    """IP(x) for a (n, 10) tensor; returns shape (n,)."""
    x = x if isinstance(x, nc.Tensor) else nc.const(np.atleast_2d(x))
    h = nc.leaky_relu(x @ ip.W1, ip.slope)
    h = nc.leaky_relu(h @ ip.W2, ip.slope)
    out = h @ ip.W3
    return nc.reshape(out, (out.shape[0],))


def _mse(ip, X, y):
    return float(np.mean((predict_influence(ip, X).value - y) ** 2))


def train_ip(features: np.ndarray, scores: np.ndarray, rng: np.random.Generator, epochs: int = 60,
             hidden: int = 64, lr: float = 1e-3, batch_size: int = 64) -> InfluencePredictor:
    """MSE fit of standardised influence scores; history holds full-data MSE per epoch."""
    X = np.asarray(features, dtype=np.float64)
    raw = np.asarray(scores, dtype=np.float64)
    if X.shape[0] != raw.shape[0]:
        raise ValueError("features and scores are not aligned")
    if X.shape[0] < 10:
        raise ValueError("need at least 10 users to fit the influence predictor")
    y, mu, sd = standardize(raw)
    ip = init_ip(rng, hidden)
    ip.score_mean, ip.score_std = mu, sd
    leaves = ip.leaves()
    opt = nc.AdamState()
    n = X.shape[0]
    steps_per_epoch = int(np.ceil(n / batch_size))
    total = epochs * steps_per_epoch
    step = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            b = order[lo:lo + batch_size]
            pred = predict_influence(ip, X[b])
            loss = nc.mean(nc.square(nc.sub(pred, nc.const(y[b]))))
            grads = nc.clip_global_norm(nc.grad(loss, leaves), 1.0)
            nc.adam_step(leaves, grads, opt, lr, min(1.0, step / max(1, total - 1)))
            step += 1
        ip.history.append(_mse(ip, X, y))
    return ip
