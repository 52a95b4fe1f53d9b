import json
import os

import pytest
import yaml

from surfcnn import cli, shapes
from surfcnn.mesh import load_mesh, write_off
from surfcnn.verify import random_mesh

from test_training import TINY


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data, cache, out = root / "data", root / "cache", root / "run"
    assert cli.run(["synth", "classification", "--count", "6", "--seed", "1", "--out", str(data)]) == 0
    assert cli.run(["preprocess", "--data", str(data), "--cache-dir", str(cache)]) == 0
    net = root / "tiny.yaml"
    net.write_text(yaml.safe_dump(TINY))
    code = cli.run(["train", "--data", str(data), "--cache-dir", str(cache), "--network", str(net),
                    "--out-dir", str(out), "--epochs", "2", "--lr", "0.01"])
    assert code == 0
    return root


def test_train_outputs(run_dir):
    out = run_dir / "run"
    assert {"network.yaml", "checkpoint.sfck", "metrics.jsonl"} <= set(os.listdir(out))
    recs = [json.loads(line) for line in (out / "metrics.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1]


def test_preprocess_rerun_skips(run_dir, capsys):
    assert cli.run(["preprocess", "--data", str(run_dir / "data"), "--cache-dir", str(run_dir / "cache")]) == 0
    text = capsys.readouterr().out
    assert "0 computed" in text or text.count("cached") >= 6


def test_eval_prints_metrics(run_dir, capsys):
    code = cli.run(["eval", "--checkpoint", str(run_dir / "run" / "checkpoint.sfck"), "--data", str(run_dir / "data"),
                    "--cache-dir", str(run_dir / "cache")])
    assert code == 0
    m = json.loads(capsys.readouterr().out)
    assert m["meshes"] == 2 and 0 <= m["accuracy"] <= 1


def test_eval_hash_mismatch(run_dir, tmp_path, capsys):
    other = dict(TINY, layers=[dict(layer) for layer in TINY["layers"]])
    other["layers"][1]["out"] = 5
    p = tmp_path / "other.yaml"
    p.write_text(yaml.safe_dump(other))
    code = cli.run(["eval", "--checkpoint", str(run_dir / "run" / "checkpoint.sfck"), "--network", str(p),
                    "--data", str(run_dir / "data"), "--cache-dir", str(run_dir / "cache")])
    assert code == 1
    assert "hash mismatch" in capsys.readouterr().err


def test_infer_one_row_per_vertex(run_dir, tmp_path):
    mesh = run_dir / "data" / "cla_0000.off"
    code = cli.run(["infer", str(mesh), "--checkpoint", str(run_dir / "run" / "checkpoint.sfck"),
                    "--out", str(tmp_path / "pred"), "--classes", "sphere,torus,ellipsoid"])
    assert code == 0
    V = load_mesh(mesh).n_vertices
    rows = (tmp_path / "pred.tsv").read_text().splitlines()
    assert len(rows) == V + 1
    assert rows[0].split("\t")[:2] == ["vertex", "label"]
    assert load_mesh(tmp_path / "pred.obj").n_vertices == V


def test_train_missing_cache_fails(run_dir, tmp_path):
    code = cli.run(["train", "--data", str(run_dir / "data"), "--cache-dir", str(tmp_path / "none"),
                    "--network", "classify", "--out-dir", str(tmp_path / "r"), "--epochs", "1"])
    assert code == 1


def test_usage_errors_exit_1(tmp_path):
    assert cli.run(["train", "--bogus"]) == 1
    assert cli.run(["synth", "poetry", "--out", str(tmp_path)]) == 1
    assert cli.run(["no-such-command"]) == 1


def test_preprocess_bad_mesh_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.off"
    bad.write_text("OFF\n3 1 0\n0 0 0\n1 0 0\n2 0 0\n3 0 1 2\n")
    assert cli.run(["preprocess", str(bad), "--cache-dir", str(tmp_path / "c")]) == 1


def test_verify_poincare_hopf_on_torus_cache(tmp_path, capsys):
    p = tmp_path / "torus.off"
    write_off(p, shapes.torus())
    assert cli.run(["preprocess", str(p), "--cache-dir", str(tmp_path / "c")]) == 0
    capsys.readouterr()
    code = cli.run(["verify", "--suite", "poincare-hopf", "--cache", str(tmp_path / "c" / "torus.sfcv"), "--json"])
    assert code == 0
    checks = json.loads(capsys.readouterr().out)["checks"]
    idx = [c for c in checks if c["name"] == "cache/index_sum_minus_chi"]
    assert idx and idx[0]["value"] < 1e-9


def test_verify_gradcheck_small_mesh(tmp_path, capsys):
    p = tmp_path / "m.off"
    write_off(p, random_mesh(50, seed=2))
    assert cli.run(["verify", "--suite", "gradcheck", "--mesh", str(p), "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["passed"] and all(c["value"] < 1e-4 for c in out["checks"])


def test_verify_flat_grid(capsys):
    assert cli.run(["verify", "--suite", "flat-grid"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_failure_exits_2(monkeypatch, capsys):
    from surfcnn import verify as vf

    def failing(names, **kw):
        return [vf.Check("flat-grid", "forced", 1.0, 0.0, False)]

    monkeypatch.setattr(vf, "run_suites", failing)
    assert cli.run(["verify", "--suite", "flat-grid"]) == 2
