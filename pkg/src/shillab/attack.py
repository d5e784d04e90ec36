"""Single-user injection attack: joint training, profile emission, and heuristic baselines."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .edgegen import CandidateSet, build_candidates, gumbel_topk, score_candidates, select_edges
from .encoder import (Adjacency, forward_rows, generate_fake_features, init_encoder, make_mask,
                      mask_batches, recon_loss)
from .features import compute_all, normalize
from .graphdata import RatingGraph, popular_items, two_hop_items
from .influence import SurrogateMF, influence_scores, predict_influence, train_ip, train_surrogate

log = logging.getLogger(__name__)


class AttackDiverged(RuntimeError):
    pass


@dataclass
class AttackConfig:
    target: int
    b_user: int = 1
    b_item: int = 50
    epochs: int = 64
    batch_size: int = 32
    lr: float = 5e-4
    max_norm: float = 1.0
    mask_fraction: float = 0.10
    tau: float = 0.1
    alpha: float = 1.0
    emit_alpha: float = 0.0
    e: float = 0.85
    seed: int = 0
    random_features: bool = False
    random_edges: bool = False
    no_influence: bool = False
    hidden_size: int = 250
    dropout: float = 0.5
    edge_dim: int = 64
    s_fraction: float = 0.05
    popular_fraction: float = 0.10
    surrogate_rank: int = 16
    surrogate_reg: float = 1.0
    damping: float = 0.01
    ip_hidden: int = 64
    ip_epochs: int = 60

    def __post_init__(self):
        if self.b_user < 1 or self.b_item < 1:
            raise ValueError("budgets must be >= 1")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class FakeProfile:
    items: np.ndarray
    ratings: np.ndarray
    features: np.ndarray | None = None
    soft_edges: np.ndarray | None = None
    seed: int = 0

    def __len__(self):
        return int(self.items.size)


@dataclass
class AttackContext:
    """Target-independent material shared by every attack on one graph."""
    graph: RatingGraph
    X_user_raw: np.ndarray
    X_item_raw: np.ndarray
    X_user: np.ndarray
    X_item: np.ndarray
    user_norm: object
    item_norm: object
    surrogate: SurrogateMF
    adj: Adjacency
    seed: int


def prepare_context(graph: RatingGraph, seed: int = 0, surrogate_rank: int = 16,
                    surrogate_reg: float = 1.0) -> AttackContext:
    rng = np.random.default_rng([seed, 1])
    Xu_raw, Xi_raw = compute_all(graph, rng)
    Xu, pu = normalize(Xu_raw)
    Xi, pi = normalize(Xi_raw)
    sur = train_surrogate(graph, surrogate_rank, surrogate_reg, rng=np.random.default_rng([seed, 2]))
    return AttackContext(graph, Xu_raw, Xi_raw, Xu, Xi, pu, pi, sur, Adjacency.from_graph(graph), seed)


# -- losses ------------------------------------------------------------------

@dataclass
class FoldCache:
    """Constants for the differentiable fold-in of one fake user over ``S``."""
    S: np.ndarray
    V_S: np.ndarray
    r_S: np.ndarray
    A_inv: np.ndarray        # (m*k, k): stacked (U_N(j)^T U_N(j) + reg I)^{-1}
    U_real: np.ndarray
    outside_lse: np.ndarray  # per user log-sum-exp of clean scores on items outside S
    target_col: np.ndarray   # one-hot (m, 1) picking the target column
    reg: float


def fold_cache(surrogate: SurrogateMF, graph: RatingGraph, candidates, target: int,
               n_real: int | None = None) -> FoldCache:
    S = np.asarray(candidates.items if isinstance(candidates, CandidateSet) else candidates)
    if target not in set(S.tolist()):
        raise ValueError("target must be one of the candidates")
    n_real = graph.n_users if n_real is None else n_real
    U, V, reg = surrogate.U, surrogate.V, surrogate.reg
    k = U.shape[1]
    m = S.size
    r_S = np.where(S == target, float(graph.r_max), graph.item_mean[S])
    A = np.empty((m, k, k))
    for pos, j in enumerate(S):
        raters, _ = graph.item_raters(int(j))
        Uj = U[raters]
        A[pos] = Uj.T @ Uj + reg * np.eye(k)
    A_inv = np.linalg.inv(A).reshape(m * k, k)
    U_real = U[:n_real]
    outside = np.setdiff1d(np.arange(graph.n_items), S)
    if outside.size:
        clean = U_real @ V[outside].T
        mx = clean.max(axis=1)
        outside_lse = mx + np.log(np.exp(clean - mx[:, None]).sum(axis=1))
    else:
        outside_lse = np.full(n_real, -np.inf)
    onehot = (S == target).astype(float)[:, None]
    return FoldCache(S, V[S].copy(), r_S, A_inv, U_real, outside_lse, onehot, reg)


def adv_loss(cache: FoldCache, soft_edges) -> nc.Tensor:
    """Promotion loss after folding a softly-weighted fake user into the surrogate.

    The fake user's factor is the weighted ridge solution over the candidate
    items; each candidate's item factor then gets one ALS refresh with the fake
    rating added (Sherman-Morrison form, so only precomputed inverses appear).
    """
    D = soft_edges if isinstance(soft_edges, nc.Tensor) else nc.const(np.asarray(soft_edges, float))
    m, k = cache.V_S.shape
    D = nc.reshape(D, (m, 1))
    V_S = nc.const(cache.V_S)
    r_S = nc.const(cache.r_S[:, None])
    reg = cache.reg
    for attempt in range(2):
        Az = nc.add(nc.matmul(nc.const(cache.V_S.T), nc.mul(D, V_S)), nc.const(reg * np.eye(k)))
        if np.linalg.cond(Az.value) < 1e12:
            break
        if attempt == 1:
            raise np.linalg.LinAlgError("fold-in system is singular even after raising the ridge")
        reg *= 10.0
    bz = nc.matmul(nc.const(cache.V_S.T), nc.mul(D, r_S))
    u = nc.solve(Az, bz)                                            # (k, 1)
    W = nc.reshape(nc.matmul(nc.const(cache.A_inv), u), (m, k))      # w_j = A_j^{-1} u
    uv = nc.matmul(V_S, u)                                          # u . v_j
    uw = nc.matmul(W, u)                                            # u . w_j
    coef = nc.div(nc.mul(D, nc.sub(r_S, uv)), nc.add(nc.mul(D, uw), 1.0))
    V_new = nc.add(V_S, nc.mul(coef, W))
    scores = nc.matmul(nc.const(cache.U_real), nc.transpose(V_new))  # (n, m)
    lse = nc.logsumexp(scores, axis=1, offset=cache.outside_lse)
    target_scores = nc.matmul(scores, nc.const(cache.target_col))
    return nc.sub(nc.sum(lse), nc.sum(target_scores))


def total_loss(adv, recon, ip_of_fake=None):
    """adv + recon - IP; ``ip_of_fake=None`` drops the influence term."""
    out = nc.add(adv, recon)
    if ip_of_fake is not None:
        out = nc.sub(out, ip_of_fake)
    return out


# -- profile construction ------------------------------------------------------

def round_half_up(x):
    return np.floor(np.asarray(x, dtype=np.float64) + 0.5)


def assign_ratings(items, graph: RatingGraph, target: int) -> FakeProfile:
    items = np.asarray(items, dtype=np.int64)
    if items.size == 0:
        raise ValueError("no items selected")
    means = np.where(graph.item_count[items] > 0, graph.item_mean[items], graph.r_avg)
    ratings = np.clip(round_half_up(means), 1, graph.r_max)
    ratings[items == target] = graph.r_max
    return FakeProfile(items, ratings)


def _with_target(positions, cands: CandidateSet, b_item: int):
    items = [int(cands.items[p]) for p in positions]
    if cands.target not in items:
        items = items[:b_item - 1] + [cands.target]
    return np.array(items[:b_item], dtype=np.int64)


@dataclass
class AttackResult:
    profiles: list
    candidates: CandidateSet
    loss_history: list = field(default_factory=list)
    recon_history: list = field(default_factory=list)
    influence_raw: np.ndarray | None = None


def run_attack(graph: RatingGraph, config: AttackConfig, context: AttackContext | None = None,
               return_details: bool = False):
    """Train the generator for ``config.epochs`` and emit ``config.b_user`` profiles."""
    if not 0 <= config.target < graph.n_items:
        raise KeyError(f"unknown target item {config.target}")
    ctx = context or prepare_context(graph, config.seed, config.surrogate_rank, config.surrogate_reg)
    rng = np.random.default_rng([config.seed, 7, config.target])
    target = config.target
    cands = build_candidates(graph, target, config.s_fraction, config.popular_fraction, rng)
    k = min(config.b_item, cands.m)
    item_feats = nc.const(ctx.X_item[cands.items])

    ip = None
    infl = None
    if not config.no_influence and not config.random_features:
        infl = influence_scores(ctx.surrogate, graph, target, config.damping)
        rated = np.flatnonzero(graph.user_count > 0)
        ip = train_ip(ctx.X_user[rated], infl[rated], rng, epochs=config.ip_epochs,
                      hidden=config.ip_hidden)

    state = init_encoder(rng, config.hidden_size, config.dropout)
    W_edge = nc.param(rng.normal(0, np.sqrt(2.0 / (10 + config.edge_dim)), (10, config.edge_dim)))
    leaves = state.leaves() + [W_edge]
    random_x = rng.random((1, 10)) if config.random_features else None
    cache = fold_cache(ctx.surrogate, graph, cands, target)
    target_onehot = (cands.items == target).astype(float)

    def fake_x():
        if random_x is not None:
            return nc.const(random_x)
        return generate_fake_features(state, ctx.adj, ctx.X_item, target)

    opt = nc.AdamState()
    n_nodes = graph.n_users + graph.n_items
    per_epoch = max(1, math.ceil(round(config.mask_fraction * n_nodes) / config.batch_size))
    total_steps = config.epochs * per_epoch
    step = 0
    result = AttackResult([], cands, influence_raw=infl)
    for epoch in range(config.epochs):
        plan = make_mask(graph.n_users, graph.n_items, config.mask_fraction, rng)
        Xu_in, Xi_in = plan.apply(ctx.X_user, ctx.X_item)
        ep_loss, ep_recon = [], []
        for bu, bi in mask_batches(plan, graph.n_users, config.batch_size, rng):
            pu, pi = forward_rows(state, ctx.adj, Xu_in, Xi_in, bu, bi, rng)
            recon = recon_loss(ctx.X_user[bu], pu, ctx.X_item[bi], pi)
            x_fake = fake_x()
            if config.random_edges:
                adv = nc.const(0.0)
            else:
                o = score_candidates(x_fake, item_feats, W_edge)
                relax = gumbel_topk(o, k, config.tau, config.alpha, rng)
                D = nc.add(nc.mul(relax.G, 1.0 - target_onehot), target_onehot)
                adv = adv_loss(cache, D)
            ip_term = None
            if ip is not None:
                ip_term = nc.reshape(predict_influence(ip, x_fake), ())
            loss = total_loss(adv, recon, ip_term)
            value = float(loss.value)
            if not math.isfinite(value):
                raise AttackDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: adv={float(adv.value)} "
                    f"recon={float(recon.value)}")
            grads = nc.clip_global_norm(nc.grad(loss, leaves), config.max_norm)
            nc.adam_step(leaves, grads, opt, config.lr, min(1.0, step / max(1, total_steps - 1)))
            step += 1
            ep_loss.append(value)
            ep_recon.append(float(recon.value))
        result.loss_history.append(float(np.mean(ep_loss)))
        result.recon_history.append(float(np.mean(ep_recon)))
        log.debug("epoch %d loss=%.4f recon=%.5f", epoch, result.loss_history[-1], result.recon_history[-1])

    x_final = fake_x()
    o_final = score_candidates(x_final, item_feats, W_edge)
    for p in range(config.b_user):
        if config.random_edges:
            fillers = np.flatnonzero(cands.items != target)
            pick = rng.choice(fillers, size=min(k - 1, fillers.size), replace=False)
            items = _with_target(list(pick), cands, config.b_item)
            soft = None
        else:
            alpha = config.emit_alpha if p == 0 else config.alpha
            relax = gumbel_topk(o_final, k, config.tau, alpha, rng)
            items = _with_target(select_edges(relax, config.e, config.b_item), cands, config.b_item)
            soft = relax.G.value.copy()
        prof = assign_ratings(items, graph, target)
        prof.features = x_final.value.ravel().copy()
        prof.soft_edges = soft
        prof.seed = config.seed
        result.profiles.append(prof)
    return result if return_details else result.profiles


# -- heuristic baselines --------------------------------------------------------

def _normal_ratings(graph: RatingGraph, n: int, rng) -> np.ndarray:
    sd = float(np.std(graph.ratings))
    return np.clip(round_half_up(rng.normal(graph.r_avg, sd, n)), 1, graph.r_max)


def _fillers(graph: RatingGraph, exclude, n: int, rng) -> np.ndarray:
    pool = np.setdiff1d(np.arange(graph.n_items), np.asarray(list(exclude), dtype=np.int64))
    return rng.choice(pool, size=min(n, pool.size), replace=False).astype(np.int64)


def _profile(items, ratings, seed) -> FakeProfile:
    return FakeProfile(np.asarray(items, dtype=np.int64), np.asarray(ratings, dtype=np.float64), seed=seed)


def baseline_random(graph: RatingGraph, config: AttackConfig, rng) -> list[FakeProfile]:
    t = config.target
    out = []
    for _ in range(config.b_user):
        fill = _fillers(graph, {t}, config.b_item - 1, rng)
        out.append(_profile(np.r_[t, fill], np.r_[graph.r_max, _normal_ratings(graph, fill.size, rng)],
                            config.seed))
    return out


def _n_selected(config: AttackConfig) -> int:
    return max(1, math.ceil(0.1 * config.b_item))


def baseline_bandwagon(graph: RatingGraph, config: AttackConfig, rng) -> list[FakeProfile]:
    t = config.target
    pool = popular_items(graph, 0.10)
    pool = pool[pool != t]
    out = []
    for _ in range(config.b_user):
        sel = rng.choice(pool, size=min(_n_selected(config), pool.size, config.b_item - 1), replace=False)
        fill = _fillers(graph, {t, *sel.tolist()}, config.b_item - 1 - sel.size, rng)
        items = np.r_[t, sel, fill]
        ratings = np.r_[graph.r_max, np.full(sel.size, graph.r_max), _normal_ratings(graph, fill.size, rng)]
        out.append(_profile(items, ratings, config.seed))
    return out


def baseline_segment(graph: RatingGraph, config: AttackConfig, rng) -> list[FakeProfile]:
    t = config.target
    segment = two_hop_items(graph, t)
    out = []
    for _ in range(config.b_user):
        n_sel = min(_n_selected(config), segment.size, config.b_item - 1)
        sel = rng.choice(segment, size=n_sel, replace=False) if n_sel else np.empty(0, dtype=np.int64)
        fill = _fillers(graph, {t, *sel.tolist()}, config.b_item - 1 - sel.size, rng)
        items = np.r_[t, sel, fill]
        ratings = np.r_[graph.r_max, np.full(sel.size, graph.r_max), np.ones(fill.size)]
        out.append(_profile(items, ratings, config.seed))
    return out


BASELINES = {"random": baseline_random, "bandwagon": baseline_bandwagon, "segment": baseline_segment}


# -- export ----------------------------------------------------------------------

def export_profiles(path, profiles, graph: RatingGraph, config: AttackConfig) -> None:
    lines = [f"# config_hash={config.digest()} seed={config.seed} target={graph.item_tokens[config.target]}"]
    for prof in profiles:
        pairs = (f"{graph.item_tokens[i]}:{int(r) if float(r).is_integer() else r}"
                 for i, r in zip(prof.items, prof.ratings))
        lines.append(" ".join(pairs))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_profiles(path, graph: RatingGraph) -> list[FakeProfile]:
    index = {tok: k for k, tok in enumerate(graph.item_tokens)}
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        items, ratings = [], []
        for pair in line.split():
            tok, r = pair.rsplit(":", 1)
            items.append(index[tok])
            ratings.append(float(r))
        out.append(_profile(items, ratings, 0))
    return out
