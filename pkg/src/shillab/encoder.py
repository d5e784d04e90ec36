"""Feature embedding, multi-relation graph convolution, and masked reconstruction.

Row-vector convention throughout: a feature matrix is (nodes, 10) and a
weight maps ``X @ W``.  No layer carries a bias.

The bipartite graph has two relations, user->item and item->user.  A user
receives messages over item->user edges only and an item over user->item
edges only, so each node type aggregates with its own relation weight.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import numcore as nc
from .features import N_FEATURES
from .graphdata import RatingGraph

SLOPE = 0.1
PARAM_NAMES = ("embed1", "embed2", "rel_item_user", "rel_user_item", "hidden", "rec1", "rec2")


class MaskError(ValueError):
    pass


@dataclass
class EncoderState:
    params: dict
    hidden_size: int = 250
    slope: float = SLOPE
    dropout: float = 0.5

    def leaves(self):
        return [self.params[k] for k in PARAM_NAMES]

    def arrays(self):
        return {k: self.params[k].value.copy() for k in PARAM_NAMES}


def init_encoder(rng: np.random.Generator, hidden_size: int = 250, dropout: float = 0.5,
                 zero: bool = False) -> EncoderState:
    d = hidden_size
    shapes = {"embed1": (N_FEATURES, d), "embed2": (d, d), "rel_item_user": (d, d),
              "rel_user_item": (d, d), "hidden": (d, d), "rec1": (d, d), "rec2": (d, N_FEATURES)}
    params = {}
    for name in PARAM_NAMES:
        fan_in, fan_out = shapes[name]
        if zero:
            w = np.zeros(shapes[name])
        else:
            w = rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), shapes[name])
        params[name] = nc.param(w)
    return EncoderState(params, hidden_size, SLOPE, dropout)


@dataclass(frozen=True)
class Adjacency:
    """Symmetric-normalised user x item adjacency: 1/sqrt(|N(u)| |N(i)|)."""
    A: sp.csr_matrix
    At: sp.csr_matrix
    user_deg: np.ndarray
    item_deg: np.ndarray

    @classmethod
    def from_graph(cls, graph: RatingGraph) -> "Adjacency":
        du = graph.user_count.astype(float)
        di = graph.item_count.astype(float)
        w = 1.0 / np.sqrt(du[graph.users] * di[graph.items])
        A = sp.csr_matrix((w, (graph.users, graph.items)), shape=(graph.n_users, graph.n_items))
        return cls(A, A.T.tocsr(), du, di)


def embed(state: EncoderState, X) -> nc.Tensor:
    X = X if isinstance(X, nc.Tensor) else nc.const(np.atleast_2d(X))
    p = state.params
    return nc.leaky_relu(X @ p["embed1"], state.slope) @ p["embed2"]


def _dropout(P: nc.Tensor, rate: float, rng) -> nc.Tensor:
    if rng is None or rate <= 0:
        return P
    keep = (rng.random(P.shape) >= rate) / (1.0 - rate)
    return nc.mul(P, keep)


def _hidden(state: EncoderState, q: nc.Tensor) -> nc.Tensor:
    s = state.slope
    return nc.leaky_relu(nc.leaky_relu(q, s) @ state.params["hidden"], s)


def gcn_layer(state: EncoderState, adj: Adjacency, P_user: nc.Tensor, P_item: nc.Tensor,
              rng: np.random.Generator | None = None):
    """Full-graph layer.  ``rng`` switches on training-mode dropout."""
    P_user = _dropout(P_user, state.dropout, rng)
    P_item = _dropout(P_item, state.dropout, rng)
    q_user = nc.spmatmul(adj.A, P_item) @ state.params["rel_item_user"]
    q_item = nc.spmatmul(adj.At, P_user) @ state.params["rel_user_item"]
    return _hidden(state, q_user), _hidden(state, q_item)


def reconstruct(state: EncoderState, H: nc.Tensor) -> nc.Tensor:
    p = state.params
    return nc.leaky_relu(H @ p["rec1"], state.slope) @ p["rec2"]


def forward_all(state: EncoderState, adj: Adjacency, X_user, X_item, rng=None):
    """Reconstructed features for every node: (Xhat_user, Xhat_item)."""
    H_u, H_i = gcn_layer(state, adj, embed(state, X_user), embed(state, X_item), rng)
    return reconstruct(state, H_u), reconstruct(state, H_i)


def forward_rows(state: EncoderState, adj: Adjacency, X_user_in, X_item_in,
                 users, items, rng=None):
    """Reconstructions for the listed users and items only.

    Only the one-hop neighbourhood of the requested rows is embedded, which
    keeps a 32-node batch cheap on a full-size graph.
    """
    out = []
    for rows, A, X_other, W in ((users, adj.A, X_item_in, "rel_item_user"),
                                (items, adj.At, X_user_in, "rel_user_item")):
        rows = np.asarray(rows, dtype=np.int64)
        if rows.size == 0:
            out.append(None)
            continue
        sub = A[rows]
        cols = np.unique(sub.indices)
        if cols.size == 0:
            q = nc.const(np.zeros((rows.size, state.hidden_size)))
        else:
            block = sub[:, cols]
            P = _dropout(embed(state, X_other[cols]), state.dropout, rng)
            q = nc.spmatmul(block, P) @ state.params[W]
        out.append(reconstruct(state, _hidden(state, q)))
    return out[0], out[1]


# -- masking and loss -----------------------------------------------------------

@dataclass(frozen=True)
class MaskPlan:
    users: np.ndarray
    items: np.ndarray
    fraction: float

    def apply(self, X_user: np.ndarray, X_item: np.ndarray):
        Xu, Xi = X_user.copy(), X_item.copy()
        Xu[self.users] = 0.0
        Xi[self.items] = 0.0
        return Xu, Xi


def make_mask(n_users: int, n_items: int, fraction: float, rng: np.random.Generator) -> MaskPlan:
    if not 0 < fraction < 1:
        raise MaskError("mask fraction must lie in (0, 1)")
    total = n_users + n_items
    k = int(round(fraction * total))
    if k == 0:
        raise MaskError(f"fraction {fraction} masks no node out of {total}")
    chosen = rng.choice(total, size=k, replace=False)
    users = np.sort(chosen[chosen < n_users])
    items = np.sort(chosen[chosen >= n_users] - n_users)
    return MaskPlan(users, items, fraction)


def recon_loss(true_user, pred_user, true_item, pred_item) -> nc.Tensor:
    """Mean squared L2 over masked users plus the same over masked items.

    Either side may be ``None`` (empty); both empty is an error.
    """
    terms = []
    for true, pred in ((true_user, pred_user), (true_item, pred_item)):
        if pred is None or pred.shape[0] == 0:
            continue
        resid = nc.sub(pred, nc.const(true))
        terms.append(nc.mul(nc.sum(nc.square(resid)), 1.0 / pred.shape[0]))
    if not terms:
        raise MaskError("both masked sets are empty")
    return terms[0] if len(terms) == 1 else nc.add(terms[0], terms[1])


def mask_batches(plan: MaskPlan, n_users: int, batch_size: int, rng: np.random.Generator):
    """Shuffle the masked nodes and cut them into (users, items) batches."""
    nodes = np.concatenate([plan.users, plan.items + n_users])
    nodes = nodes[rng.permutation(nodes.size)]
    for lo in range(0, nodes.size, batch_size):
        b = nodes[lo:lo + batch_size]
        yield np.sort(b[b < n_users]), np.sort(b[b >= n_users] - n_users)


# -- fake node ------------------------------------------------------------------

def generate_fake_features(state: EncoderState, adj: Adjacency, X_item: np.ndarray,
                           target: int, seed_edge: bool = True) -> nc.Tensor:
    """Reconstruction for a zero-feature fake user wired to the target.

    The provisional seed edge (fake -> target) is the fake node's only
    neighbour; without it the aggregation is empty and the output no longer
    depends on the graph.
    """
    if not 0 <= target < adj.item_deg.size:
        raise KeyError(f"unknown item {target}")
    if seed_edge:
        p_t = embed(state, X_item[target:target + 1])
        norm = 1.0 / np.sqrt(1.0 * (adj.item_deg[target] + 1.0))
        q = nc.mul(p_t @ state.params["rel_item_user"], norm)
    else:
        q = nc.const(np.zeros((1, state.hidden_size)))
    return reconstruct(state, _hidden(state, q))


# -- stand-alone reconstruction training ----------------------------------------

def train_encoder(state: EncoderState, graph: RatingGraph, X_user: np.ndarray, X_item: np.ndarray,
                  rng: np.random.Generator, epochs: int = 64, batch_size: int = 32,
                  lr: float = 5e-4, max_norm: float = 1.0, mask_fraction: float = 0.1):
    """Reconstruction-only training; returns the mean batch loss per epoch."""
    adj = Adjacency.from_graph(graph)
    leaves = state.leaves()
    opt = nc.AdamState()
    history = []
    n_batches = max(1, int(np.ceil(round(mask_fraction * (graph.n_users + graph.n_items)) / batch_size)))
    total = epochs * n_batches
    step = 0
    for _ in range(epochs):
        plan = make_mask(graph.n_users, graph.n_items, mask_fraction, rng)
        Xu_in, Xi_in = plan.apply(X_user, X_item)
        losses = []
        for bu, bi in mask_batches(plan, graph.n_users, batch_size, rng):
            pu, pi = forward_rows(state, adj, Xu_in, Xi_in, bu, bi, rng)
            loss = recon_loss(X_user[bu], pu, X_item[bi], pi)
            grads = nc.clip_global_norm(nc.grad(loss, leaves), max_norm)
            nc.adam_step(leaves, grads, opt, lr, min(1.0, step / max(1, total - 1)))
            step += 1
            losses.append(float(loss.value))
        history.append(float(np.mean(losses)))
    return history
