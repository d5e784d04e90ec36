import json

from click.testing import CliRunner

from shillab.cli import main

TINY = {"dataset": {"synthetic": {"n_users": 150, "n_items": 100, "n_interactions": 1500, "seed": 2}},
        "attack": {"epochs": 1, "b_user": 2, "ip_epochs": 1, "hidden_size": 8, "edge_dim": 4},
        "victims": {"wmf": {"rank": 4, "sweeps": 2}},
        "eval": {"targets": "random:1", "seeds": [0]}}


def _cfg(tmp_path, cfg=TINY):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_ingest(g0_path):
    res = CliRunner().invoke(main, ["ingest", str(g0_path)])
    assert res.exit_code == 0 and "3" in res.output


def test_features_and_attack(tmp_path):
    r = CliRunner()
    cfg = _cfg(tmp_path)
    res = r.invoke(main, ["features", "--config", cfg, "--out", str(tmp_path / "f")])
    assert res.exit_code == 0, res.output
    assert (tmp_path / "f" / "user_features.csv").exists()
    res = r.invoke(main, ["attack", "--config", cfg, "--target", "5", "--budget-users", "3",
                          "--budget-items", "20", "--seed", "4", "--out", str(tmp_path / "a")])
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "a" / "profiles_5.txt").read_text().splitlines()
    assert lines[0].startswith("# config_hash=") and "seed=4" in lines[0] and len(lines) == 4
    assert all(len(line.split()) <= 20 for line in lines[1:])


def test_evaluate_twice_identical(tmp_path):
    r = CliRunner()
    cfg = _cfg(tmp_path)
    for d in ("r1", "r2"):
        res = r.invoke(main, ["evaluate", "--config", cfg, "--out", str(tmp_path / d)])
        assert res.exit_code == 0, res.output
    assert (tmp_path / "r1" / "report.json").read_bytes() == (tmp_path / "r2" / "report.json").read_bytes()


def test_ablate_and_detect(tmp_path):
    r = CliRunner()
    cfg = _cfg(tmp_path)
    res = r.invoke(main, ["ablate", "--config", cfg, "--out", str(tmp_path / "ab")])
    assert res.exit_code == 0, res.output
    assert "random_edges" in res.output
    res = r.invoke(main, ["detect", "--config", cfg, "--out", str(tmp_path / "d")])
    assert res.exit_code == 0, res.output
    rows = json.loads((tmp_path / "d" / "detection.json").read_text())
    assert len(rows) == 4
    assert (tmp_path / "d" / "embeddings_" f"{rows[0]['target']}_sui.csv").exists()


def test_unknown_config_key(tmp_path):
    res = CliRunner().invoke(main, ["evaluate", "--config", _cfg(tmp_path, {"bogus": {}})])
    assert res.exit_code != 0 and "bogus" in res.output


def test_failure_exit_code(tmp_path):
    bad = json.loads(json.dumps(TINY))
    bad["attack"]["b_item"] = 0
    res = CliRunner().invoke(main, ["evaluate", "--config", _cfg(tmp_path, bad), "--out", str(tmp_path / "x")])
    assert res.exit_code == 1
