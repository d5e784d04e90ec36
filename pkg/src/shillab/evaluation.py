"""Hit ratio, the PCA detection harness, and config-driven experiments."""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attack import BASELINES, AttackConfig, prepare_context, run_attack
from .features import compute_all, normalize
from .graphdata import RatingGraph, RatingScale, inject_profiles, load_ratings, synthetic_ratings
from .victims import recommend_all, train_itemcf, train_wmf

log = logging.getLogger(__name__)

SUI = "sui"
ABLATIONS = ("random_features", "random_edges", "no_influence")


class ConfigError(ValueError):
    pass


# -- metrics -----------------------------------------------------------------

def hit_ratio(recs: np.ndarray, target: int, k: int) -> float:
    """Fraction of rows (real users) whose top-k list contains ``target``."""
    recs = np.asarray(recs)
    if recs.ndim != 2 or recs.shape[1] != k:
        raise ValueError(f"recommendation lists have length {recs.shape[-1]}, expected k={k}")
    if recs.shape[0] == 0:
        raise ValueError("no users")
    return float(np.mean(np.any(recs == target, axis=1)))


@dataclass
class DetectorModel:
    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray   # (n_components, d), orthonormal rows
    threshold: float
    quantile: float

    def errors(self, X: np.ndarray) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        resid = Z - (Z @ self.components.T) @ self.components
        return np.sum(resid * resid, axis=1)

    def flag(self, X: np.ndarray) -> np.ndarray:
        return np.flatnonzero(self.errors(X) > self.threshold)


def fit_detector(X: np.ndarray, quantile: float = 0.95, n_components: int = 3) -> DetectorModel:
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < d:
        raise ValueError(f"{n} users is fewer than the {d} feature dimensions")
    if not 0 < quantile < 1:
        raise ValueError("quantile must lie in (0, 1)")
    mean = X.mean(axis=0)
    sd = X.std(axis=0)
    scale = np.where(sd > 0, sd, 1.0)
    Z = (X - mean) / scale
    _, _, Vt = np.linalg.svd(Z, full_matrices=False)
    comps = Vt[:min(n_components, d)]
    model = DetectorModel(mean, scale, comps, 0.0, quantile)
    model.threshold = float(np.quantile(model.errors(X), quantile))
    return model


def detect(X: np.ndarray, quantile: float = 0.95, n_components: int = 3) -> np.ndarray:
    """Indices of rows whose PCA reconstruction error exceeds the quantile threshold."""
    return fit_detector(X, quantile, n_components).flag(X)


def detection_metrics(flagged, true_fakes):
    flagged = {int(u) for u in flagged}
    fakes = {int(u) for u in true_fakes}
    if not fakes:
        raise ValueError("recall is undefined without fake users")
    tp = len(flagged & fakes)
    precision = tp / len(flagged) if flagged else 0.0
    recall = tp / len(fakes)
    return precision, recall


# -- configuration ---------------------------------------------------------------

DEFAULT_CONFIG = {
    "dataset": {
        "path": None,
        "implicit": False,
        "r_max": 5,
        "synthetic": {"n_users": 2928, "n_items": 1835, "n_interactions": 20473,
                      "n_groups": 20, "seed": 0},
    },
    "attack": {
        "b_item": 50, "b_user": 50, "epochs": 64, "batch_size": 32, "lr": 5e-4, "max_norm": 1.0,
        "mask_fraction": 0.10, "tau": 0.1, "alpha": 1.0, "emit_alpha": 0.0, "e": 0.85,
        "hidden_size": 250, "dropout": 0.5, "edge_dim": 64, "s_fraction": 0.05,
        "popular_fraction": 0.10, "surrogate_rank": 16, "surrogate_reg": 1.0, "damping": 0.01,
        "ip_hidden": 64, "ip_epochs": 60,
    },
    "victims": {
        "names": ["itemcf", "wmf"],
        "itemcf": {"n_sim": 20},
        "wmf": {"rank": 32, "alpha": 40.0, "reg": 0.1, "sweeps": 15},
    },
    "eval": {
        "k": 50,
        "targets": "random:5",
        "seeds": [0, 1, 2],
        "methods": [SUI, "random", "segment", "bandwagon"],
        "multi_user": True,
        "ablations": False,
        "detection": True,
        "detect_quantile": 0.95,
        "detect_components": 3,
    },
}


def _merge(base: dict, over: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown key '{where}{key}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}{key}' must be an object")
            out[key] = _merge(base[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def load_config(source=None) -> dict:
    """Defaults overlaid with a JSON file or dict; unknown keys are rejected."""
    if source is None:
        user = {}
    elif isinstance(source, dict):
        user = source
    else:
        user = json.loads(Path(source).read_text(encoding="utf-8"))
    cfg = _merge(DEFAULT_CONFIG, user, "")
    unknown = set(cfg["eval"]["methods"]) - {SUI, *BASELINES}
    if unknown:
        raise ConfigError(f"unknown methods {sorted(unknown)}")
    unknown = set(cfg["victims"]["names"]) - {"itemcf", "wmf"}
    if unknown:
        raise ConfigError(f"unknown victims {sorted(unknown)}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def load_dataset(cfg: dict) -> RatingGraph:
    ds = cfg["dataset"]
    if ds["path"]:
        return load_ratings(ds["path"], RatingScale(ds["r_max"], ds["implicit"]))
    return synthetic_ratings(r_max=ds["r_max"], **ds["synthetic"])


def resolve_targets(which, graph: RatingGraph, seed: int) -> list[int]:
    """``"random:N"`` draws N rated items from ``seed``; a list names item tokens."""
    if isinstance(which, str) and which.startswith("random:"):
        n = int(which.split(":", 1)[1])
        pool = np.flatnonzero(graph.item_count > 0)
        if n > pool.size:
            raise ConfigError(f"cannot draw {n} targets from {pool.size} items")
        return sorted(int(t) for t in np.random.default_rng([seed, 99]).choice(pool, n, replace=False))
    which = which if isinstance(which, list) else [which]
    return [graph.item_id(str(t)) for t in which]


def attack_config(cfg: dict, target: int, seed: int, b_user: int, **flags) -> AttackConfig:
    params = {k: v for k, v in cfg["attack"].items() if k != "b_user"}
    return AttackConfig(target=target, seed=seed, b_user=b_user, **params, **flags)


def train_victim(name: str, graph: RatingGraph, cfg: dict, seed: int):
    if name == "itemcf":
        return train_itemcf(graph, **cfg["victims"]["itemcf"])
    return train_wmf(graph, rng=np.random.default_rng([seed, 5]), **cfg["victims"]["wmf"])


# -- experiment ----------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: dict
    config_hash: str
    targets: list
    seeds: list
    cells: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    ratios: dict = field(default_factory=dict)
    detection: list = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def failed(self) -> bool:
        return any(c.get("error") for c in self.cells) or any(d.get("error") for d in self.detection)

    def body(self) -> dict:
        """Everything except timing; identical configs give identical bodies."""
        return {"config": self.config, "config_hash": self.config_hash, "targets": self.targets,
                "seeds": self.seeds, "cells": self.cells, "summary": self.summary,
                "ratios": self.ratios, "detection": self.detection}

    def to_json(self) -> str:
        return json.dumps(self.body(), sort_keys=True, indent=1)

    def table(self) -> str:
        """Rows per victim; ``single/multi`` mean HR@k per method, then the four ratios."""
        methods = list(self.config["eval"]["methods"])
        head = ["victim"] + methods + ["ratio1", "ratio2", "ratio3", "ratio4"]
        rows = [head]
        for victim in self.config["victims"]["names"]:
            row = [victim]
            for m in methods:
                s = self.summary.get(f"{victim}/{m}/single")
                mu = self.summary.get(f"{victim}/{m}/multi")
                row.append(f"{_fmt(s)}/{_fmt(mu)}")
            r = self.ratios.get(victim, {})
            row += [_fmt(r.get(f"ratio{i}")) for i in range(1, 5)]
            rows.append(row)
        extra = sorted(k for k in self.summary if k.split("/")[1] in ABLATIONS + ("clean",))
        widths = [max(len(str(r[c])) for r in rows) for c in range(len(head))]
        lines = ["  ".join(str(v).ljust(w) for v, w in zip(r, widths)) for r in rows]
        for key in extra:
            lines.append(f"{key}: {_fmt(self.summary[key])}")
        for d in self.detection_summary():
            lines.append(f"detect {d['method']}/{d['mode']}: precision={_fmt(d['precision'])} "
                         f"recall={_fmt(d['recall'])}")
        return "\n".join(lines) + "\n"

    def detection_summary(self) -> list:
        groups = {}
        for d in self.detection:
            if d.get("error"):
                continue
            groups.setdefault((d["method"], d["mode"]), []).append(d)
        return [{"method": m, "mode": mode,
                 "precision": float(np.mean([d["precision"] for d in ds])),
                 "recall": float(np.mean([d["recall"] for d in ds]))}
                for (m, mode), ds in sorted(groups.items())]

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        (out / "table.txt").write_text(self.table(), encoding="utf-8")
        (out / "timing.json").write_text(json.dumps({"wall_clock_s": self.wall_clock}) + "\n")
        cols = ["target", "seed", "victim", "method", "mode", "hr_before", "hr_after", "error"]
        with (out / "cells.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for c in self.cells:
                w.writerow([c.get(k, "") if c.get(k) is not None else "" for k in cols])


def _fmt(x) -> str:
    if x is None:
        return "-"
    if isinstance(x, str):
        return x
    return f"{x:.4f}"


def _ratio(a, b):
    if a is None or b is None:
        return None
    if b == 0:
        return "inf" if a > 0 else "nan"
    return a / b


def compute_ratios(summary: dict, victim: str, methods) -> dict:
    base = [m for m in methods if m != SUI]
    get = summary.get
    best_single = max((get(f"{victim}/{m}/single") for m in base if get(f"{victim}/{m}/single") is not None),
                      default=None)
    best_multi = max((get(f"{victim}/{m}/multi") for m in base if get(f"{victim}/{m}/multi") is not None),
                     default=None)
    s, mu = get(f"{victim}/{SUI}/single"), get(f"{victim}/{SUI}/multi")
    return {"ratio1": _ratio(s, best_multi), "ratio2": _ratio(s, best_single),
            "ratio3": _ratio(s, mu), "ratio4": _ratio(mu, best_multi)}


def generate_profiles(graph, cfg, ctx, method, target, seed, b_user, flags=None):
    """Profiles for one method; SUI trains once and its first profile is the single-user one."""
    if method == SUI:
        return run_attack(graph, attack_config(cfg, target, seed, b_user, **(flags or {})), ctx)
    fn = BASELINES[method]
    rng = np.random.default_rng([seed, target, sorted(BASELINES).index(method), b_user])
    return fn(graph, attack_config(cfg, target, seed, b_user), rng)


def _user_features(graph: RatingGraph, seed: int, params=None):
    Xu, _ = compute_all(graph, np.random.default_rng([seed, 1]))
    return normalize(Xu, params)


def run_experiment(cfg: dict, progress=None) -> ExperimentReport:
    """Every (target, seed, victim, method, mode) cell; failures become error cells."""
    start = time.perf_counter()
    say = progress or (lambda msg: log.info(msg))
    graph = load_dataset(cfg)
    ev = cfg["eval"]
    seeds = [int(s) for s in ev["seeds"]]
    targets = resolve_targets(ev["targets"], graph, seeds[0])
    k = ev["k"]
    b_multi = cfg["attack"]["b_user"]
    report = ExperimentReport(cfg, config_hash(cfg), [graph.item_tokens[t] for t in targets], seeds)
    real = np.arange(graph.n_users)
    victims = cfg["victims"]["names"]
    modes = ["single"] + (["multi"] if ev["multi_user"] and b_multi > 1 else [])

    for seed in seeds:
        ctx = prepare_context(graph, seed, cfg["attack"]["surrogate_rank"], cfg["attack"]["surrogate_reg"])
        clean_recs = {v: recommend_all(train_victim(v, graph, cfg, seed), graph, k, users=real)
                      for v in victims}
        clean_feats, norm = (_user_features(graph, seed) if ev["detection"] else (None, None))
        for t in targets:
            variants = [(m, None) for m in ev["methods"]]
            if ev["ablations"]:
                variants += [(a, {a: True}) for a in ABLATIONS]
            for method, flags in variants:
                say(f"seed={seed} target={graph.item_tokens[t]} method={method}")
                gen_method = SUI if flags else method
                n_emit = b_multi if "multi" in modes and not flags else 1
                try:
                    profiles = generate_profiles(graph, cfg, ctx, gen_method, t, seed, n_emit, flags)
                    if method != SUI and not flags and "multi" in modes:
                        single = generate_profiles(graph, cfg, ctx, method, t, seed, 1)
                    else:
                        single = profiles[:1]
                    err = None
                except Exception as exc:  # recorded per cell
                    err = f"{type(exc).__name__}: {exc}"
                    profiles = single = []
                by_mode = {"single": single, "multi": profiles}
                for mode in (modes if not flags else ["single"]):
                    poisoned = None
                    if err is None:
                        try:
                            poisoned = inject_profiles(graph, by_mode[mode], cfg["attack"]["b_item"])
                        except Exception as exc:
                            err = f"{type(exc).__name__}: {exc}"
                    for v in victims:
                        cell = {"target": graph.item_tokens[t], "seed": seed, "victim": v,
                                "method": method, "mode": mode,
                                "hr_before": hit_ratio(clean_recs[v], t, k), "hr_after": None,
                                "error": err}
                        if err is None:
                            try:
                                model = train_victim(v, poisoned, cfg, seed)
                                cell["hr_after"] = hit_ratio(recommend_all(model, poisoned, k, users=real), t, k)
                            except Exception as exc:
                                cell["error"] = f"{type(exc).__name__}: {exc}"
                        report.cells.append(cell)
                    if ev["detection"] and not flags and poisoned is not None:
                        report.detection.append(_detection_row(poisoned, graph, seed, norm, ev, t,
                                                               method, mode))
    _summarise(report, victims)
    report.wall_clock = time.perf_counter() - start
    return report


def _detection_row(poisoned, graph, seed, norm, ev, t, method, mode):
    row = {"target": graph.item_tokens[t], "seed": seed, "method": method, "mode": mode}
    try:
        X, _ = _user_features(poisoned, seed, norm)
        flagged = detect(X, ev["detect_quantile"], ev["detect_components"])
        fakes = np.arange(graph.n_users, poisoned.n_users)
        p, r = detection_metrics(flagged, fakes)
        # brute-force confusion matrix as an internal cross-check
        truth = np.zeros(poisoned.n_users, bool)
        truth[fakes] = True
        pred = np.zeros(poisoned.n_users, bool)
        pred[flagged] = True
        tp = int(np.sum(truth & pred))
        assert p == (tp / pred.sum() if pred.sum() else 0.0) and r == tp / truth.sum()
        row.update(precision=p, recall=r, flagged=int(pred.sum()), fakes=int(truth.sum()), error=None)
    except Exception as exc:
        row["error"] = f"{type(exc).__name__}: {exc}"
    return row


def _summarise(report: ExperimentReport, victims) -> None:
    groups, before = {}, {}
    for c in report.cells:
        before[(c["victim"], c["target"], c["seed"])] = c["hr_before"]
        if c["error"] is None:
            groups.setdefault(f"{c['victim']}/{c['method']}/{c['mode']}", []).append(c["hr_after"])
    for v in victims:
        groups[f"{v}/clean/before"] = [h for (vv, _, _), h in before.items() if vv == v]
    report.summary = {key: float(np.mean(vals)) for key, vals in sorted(groups.items()) if vals}
    methods = report.config["eval"]["methods"]
    report.ratios = {v: compute_ratios(report.summary, v, methods) for v in victims}


def export_embeddings(path, factors: np.ndarray, n_real: int, user_tokens) -> None:
    """CSV of user id, fake flag, factor vector (for external plotting)."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "fake"] + [f"f{j}" for j in range(factors.shape[1])])
        for u, row in enumerate(factors):
            w.writerow([user_tokens[u], int(u >= n_real)] + [repr(float(x)) for x in row])
