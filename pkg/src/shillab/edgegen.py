"""Candidate items, edge probabilities, and the Gumbel-Top-K relaxation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .graphdata import RatingGraph, popular_items, two_hop_items

PROB_FLOOR = 1e-8
MASKED_LOGIT = -1e9


class CandidateError(ValueError):
    pass


@dataclass(frozen=True)
class CandidateSet:
    items: np.ndarray   # 2-hop neighbours, then sampled popular items, then the target
    target: int

    @property
    def m(self) -> int:
        return int(self.items.size)

    @property
    def target_pos(self) -> int:
        return self.m - 1


def build_candidates(graph: RatingGraph, target: int, s_fraction: float = 0.05,
                     popular_fraction: float = 0.10,
                     rng: np.random.Generator | None = None) -> CandidateSet:
    hop = two_hop_items(graph, target)
    s = math.ceil(s_fraction * graph.n_items - 1e-9) if s_fraction > 0 else 0
    extra = np.empty(0, dtype=np.int64)
    if s > 0:
        pool = popular_items(graph, popular_fraction)
        pool = pool[~np.isin(pool, hop) & (pool != target)]
        take = min(s, pool.size)
        if take:
            rng = rng if rng is not None else np.random.default_rng(0)
            extra = rng.choice(pool, size=take, replace=False).astype(np.int64)
    if hop.size + extra.size == 0:
        raise CandidateError(f"target {target} has no co-visited items and no popular sample")
    return CandidateSet(np.concatenate([hop, extra, [target]]).astype(np.int64), int(target))


def score_candidates(fake_x: nc.Tensor, item_x, W_edge: nc.Tensor) -> nc.Tensor:
    """o_j = (cos(W x_fake, W x_j) + 1) / 2, floored at 1e-8; shape (m,)."""
    item_x = item_x if isinstance(item_x, nc.Tensor) else nc.const(np.atleast_2d(item_x))
    q_fake = fake_x @ W_edge
    q_items = item_x @ W_edge
    cos = nc.cosine_similarity(q_items, q_fake)
    o = nc.mul(nc.add(cos, 1.0), 0.5)
    alive = (np.linalg.norm(q_items.value, axis=1) > 0) & (np.linalg.norm(q_fake.value) > 0)
    if not alive.all():
        o = nc.mul(o, alive.astype(float))  # degenerate projections sit at the floor
    return nc.clamp_min(o, PROB_FLOOR)


def gumbel_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    eps = rng.random(n)
    eps = np.clip(eps, np.finfo(float).tiny, 1.0 - 1e-16)
    return -np.log(-np.log(eps))


def gumbel_softmax(o, tau: float, alpha: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None, log_mask: np.ndarray | None = None) -> nc.Tensor:
    """softmax((log o + alpha * g) / tau) over the whole candidate vector.

    ``noise`` pins g (for gradient checks); ``log_mask`` adds constants to the
    log-probabilities (used to knock out already-selected entries).
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    o = o if isinstance(o, nc.Tensor) else nc.const(np.asarray(o, dtype=np.float64))
    n = o.shape[0]
    g = noise if noise is not None else (gumbel_noise(rng, n) if alpha != 0 else np.zeros(n))
    shift = alpha * g
    if log_mask is not None:
        shift = shift + log_mask
    logits = nc.mul(nc.add(nc.log(o), shift), 1.0 / tau)
    return nc.softmax(logits, axis=0)


@dataclass
class EdgeRelaxation:
    o: nc.Tensor
    G: nc.Tensor
    order: list
    tau: float
    alpha: float
    k: int


def gumbel_topk(o, k: int, tau: float, alpha: float, rng: np.random.Generator | None = None,
                noises: np.ndarray | None = None) -> EdgeRelaxation:
    """k rounds of Gumbel-Softmax; each round's argmax is masked out of later rounds."""
    o = o if isinstance(o, nc.Tensor) else nc.const(np.asarray(o, dtype=np.float64))
    m = o.shape[0]
    if k > m:
        raise ValueError(f"k={k} exceeds the candidate count {m}")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    log_mask = np.zeros(m)
    order = []
    total = None
    for r in range(k):
        noise = noises[r] if noises is not None else None
        y = gumbel_softmax(o, tau, alpha, rng, noise=noise, log_mask=log_mask.copy())
        pick = int(np.argmax(y.value))
        assert log_mask[pick] == 0.0, "index selected twice"
        order.append(pick)
        log_mask[pick] = MASKED_LOGIT
        total = y if total is None else nc.add(total, y)
    return EdgeRelaxation(o, total, order, tau, alpha, k)


def select_edges(relax: EdgeRelaxation, e: float = 0.85, b_item: int = 50) -> list[int]:
    """Test-time rule: entries >= e, highest first, at most b_item; else the top one."""
    G = relax.G.value if isinstance(relax.G, nc.Tensor) else np.asarray(relax.G)
    order = np.lexsort((np.arange(G.size), -G))
    passing = [int(i) for i in order if G[i] >= e][:b_item]
    return passing if passing else [int(order[0])]
