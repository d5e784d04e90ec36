"""Command-line entry point: ``shillab <command> [options]``."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation as ev
from .attack import export_profiles, prepare_context, run_attack
from .checkpoint import save_victim
from .features import compute_all, export_csv
from .graphdata import RatingScale, inject_profiles, load_ratings, save_ratings, synthetic_ratings


def _overrides(cfg, seed, target, budget_users, budget_items):
    if seed is not None:
        cfg["eval"]["seeds"] = [seed]
    if target is not None:
        cfg["eval"]["targets"] = target if target.startswith("random:") else [target]
    if budget_users is not None:
        cfg["attack"]["b_user"] = budget_users
    if budget_items is not None:
        cfg["attack"]["b_item"] = budget_items
    return cfg


def common(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                     help="JSON config with sections dataset/attack/victims/eval."),
        click.option("--seed", type=click.IntRange(min=0), help="Override eval.seeds with a single seed."),
        click.option("--target", help="Item token, or random:N."),
        click.option("--budget-users", type=click.IntRange(min=1), help="b_user for multi-user injection."),
        click.option("--budget-items", type=click.IntRange(min=1), help="b_item, items per fake profile."),
        click.option("--out", type=click.Path(file_okay=False), default="out", show_default=True),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _setup(config_path, seed, target, budget_users, budget_items):
    try:
        cfg = ev.load_config(config_path)
    except (ev.ConfigError, json.JSONDecodeError) as exc:
        raise click.UsageError(str(exc)) from exc
    return _overrides(cfg, seed, target, budget_users, budget_items)


@click.group()
@click.option("-v", "--verbose", count=True)
def main(verbose):
    """Single-user shilling attack lab."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
@click.option("--implicit", is_flag=True, help="Values are counts; bin them onto 1..r_max.")
@click.option("--r-max", default=5, show_default=True)
@click.option("--name", default=None)
@click.option("--out", type=click.Path(dir_okay=False), help="Also write the dense-ID rating file.")
def ingest(path, implicit, r_max, name, out):
    """Load a rating file and print its statistics."""
    g = load_ratings(path, RatingScale(r_max, implicit))
    click.echo(g.stats().table(name or Path(path).stem))
    if out:
        save_ratings(g, out)


@main.command()
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--seed", default=0, show_default=True)
def synth(out, seed):
    """Write the synthetic Automotive-sized dataset."""
    g = synthetic_ratings(seed=seed)
    save_ratings(g, out)
    click.echo(g.stats().table("synthetic"))


@main.command()
@common
@click.option("--items/--no-items", default=False, help="Export item features instead of users.")
def features(config_path, seed, target, budget_users, budget_items, out, items):
    """Dump the raw ten-feature matrix as CSV."""
    cfg = _setup(config_path, seed, target, budget_users, budget_items)
    g = ev.load_dataset(cfg)
    Xu, Xi = compute_all(g, np.random.default_rng([cfg["eval"]["seeds"][0], 1]))
    Path(out).mkdir(parents=True, exist_ok=True)
    dest = Path(out) / ("item_features.csv" if items else "user_features.csv")
    export_csv(dest, Xi if items else Xu, g.item_tokens if items else g.user_tokens)
    click.echo(str(dest))


@main.command()
@common
def attack(config_path, seed, target, budget_users, budget_items, out):
    """Train the generator and write fake profiles for each target."""
    cfg = _setup(config_path, seed, target, budget_users, budget_items)
    g = ev.load_dataset(cfg)
    s = cfg["eval"]["seeds"][0]
    ctx = prepare_context(g, s, cfg["attack"]["surrogate_rank"], cfg["attack"]["surrogate_reg"])
    Path(out).mkdir(parents=True, exist_ok=True)
    for t in ev.resolve_targets(cfg["eval"]["targets"], g, s):
        conf = ev.attack_config(cfg, t, s, cfg["attack"]["b_user"])
        profiles = run_attack(g, conf, ctx)
        dest = Path(out) / f"profiles_{g.item_tokens[t]}.txt"
        export_profiles(dest, profiles, g, conf)
        click.echo(f"{dest}  ({len(profiles)} profiles)")


def _run(cfg, out):
    report = ev.run_experiment(cfg, progress=lambda m: click.echo(m, err=True))
    report.write(out)
    click.echo(report.table(), nl=False)
    if report.failed:
        click.echo("some cells failed; see report.json", err=True)
        sys.exit(1)


@main.command()
@common
def evaluate(config_path, seed, target, budget_users, budget_items, out):
    """Full experiment: HR@k before/after for every method, victim, target and seed."""
    _run(_setup(config_path, seed, target, budget_users, budget_items), out)


@main.command()
@common
def ablate(config_path, seed, target, budget_users, budget_items, out):
    """Full SUI against its three ablations (single-user)."""
    cfg = _setup(config_path, seed, target, budget_users, budget_items)
    cfg["eval"].update(methods=[ev.SUI], ablations=True, multi_user=False, detection=False)
    _run(cfg, out)


@main.command()
@common
@click.option("--embeddings/--no-embeddings", default=True, help="Also dump WMF user factors.")
def detect(config_path, seed, target, budget_users, budget_items, out, embeddings):
    """Detection precision/recall of each method's multi-user injection."""
    cfg = _setup(config_path, seed, target, budget_users, budget_items)
    g = ev.load_dataset(cfg)
    s = cfg["eval"]["seeds"][0]
    e = cfg["eval"]
    ctx = prepare_context(g, s, cfg["attack"]["surrogate_rank"], cfg["attack"]["surrogate_reg"])
    _, norm = ev._user_features(g, s)
    Path(out).mkdir(parents=True, exist_ok=True)
    rows = []
    for t in ev.resolve_targets(e["targets"], g, s):
        for method in e["methods"]:
            profiles = ev.generate_profiles(g, cfg, ctx, method, t, s, cfg["attack"]["b_user"])
            poisoned = inject_profiles(g, profiles, cfg["attack"]["b_item"])
            row = ev._detection_row(poisoned, g, s, norm, e, t, method, "multi")
            rows.append(row)
            click.echo(f"{g.item_tokens[t]} {method}: precision={row.get('precision')} "
                       f"recall={row.get('recall')}")
            if embeddings:
                model = ev.train_victim("wmf", poisoned, cfg, s)
                ev.export_embeddings(Path(out) / f"embeddings_{g.item_tokens[t]}_{method}.csv",
                                     model.X, g.n_users, poisoned.user_tokens)
                save_victim(Path(out) / f"wmf_{g.item_tokens[t]}_{method}.ckpt", model)
    (Path(out) / "detection.json").write_text(json.dumps(rows, sort_keys=True, indent=1) + "\n")
    if any(r.get("error") for r in rows):
        sys.exit(1)


if __name__ == "__main__":
    main()
