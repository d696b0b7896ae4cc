import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

import recency_table
from mergegrid.cli import build_parser, run
from mergegrid.merge import TrimConfig, subspace_merge, task_vector
from mergegrid.tensor_store import from_arrays, load, save

SYN = {"domain_name": "Toys", "n_users": 80, "n_items": 30, "events_per_phase": [800, 200, 200, 200], "drift_angle_per_phase": 1.0}


def call(capsys, *argv):
    code = run([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def toys(tmp_path, capsys):
    (tmp_path / "syn.json").write_text(json.dumps(SYN))
    assert call(capsys, "synth", "gen", "--config", tmp_path / "syn.json", "--out", tmp_path / "Toys.jsonl", "--seed", 5)[0] == 0
    prev = None
    for k, stage in enumerate(("pretrain", "p1", "p2")):
        args = ["synth", "train", "--log", tmp_path / "Toys.jsonl", "--stage", stage, "--out", tmp_path / f"t{k}.mgt", "--seed", k]
        if prev:
            args += ["--init", prev]
        assert call(capsys, *args)[0] == 0
        prev = tmp_path / f"t{k}.mgt"
    return tmp_path


def test_help_on_every_subcommand(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    for name in sub.choices:
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([name, "--help"])
        assert exc.value.code == 0
    assert "Checkpoint merging" in parser.format_help()


def test_usage_errors_exit_1(capsys):
    assert call(capsys, "merge")[0] == 1
    assert call(capsys, "bogus")[0] == 1


def test_missing_seed_is_usage_error(tmp_path, capsys):
    (tmp_path / "syn.json").write_text(json.dumps(SYN))
    code, _, err = call(capsys, "synth", "gen", "--config", tmp_path / "syn.json", "--out", tmp_path / "x.jsonl")
    assert code == 1 and "seed" in err


def test_missing_file_exit_2(tmp_path, capsys):
    code, _, err = call(capsys, "inspect", tmp_path / "nope.mgt")
    assert code == 2 and err


def test_corrupt_checkpoint_exit_2(tmp_path, capsys):
    (tmp_path / "bad.mgt").write_bytes(b"\x10\0\0\0\0\0\0\0{not json}      ")
    assert call(capsys, "inspect", tmp_path / "bad.mgt")[0] == 2


def test_inspect_and_norms(toys, capsys):
    code, out, _ = call(capsys, "inspect", toys / "t2.mgt")
    doc = json.loads(out)
    assert code == 0 and doc["metadata"]["phase"] == "t2" and doc["metadata"]["lineage"] == "Toys_t1"
    code, out, _ = call(capsys, "norms", toys / "t2.mgt", "--base", toys / "t1.mgt")
    rows = list(csv.reader(io.StringIO(out)))
    assert rows[0] == ["tensor", "name", "l1"]
    total = float(rows[-1][2])
    assert total == pytest.approx(sum(float(r[2]) for r in rows[1:-1]))


def test_grid_and_merge_recipe(toys, tmp_path, capsys):
    m = toys / "grid.json"
    save(load(toys / "t0.mgt").evolve(id="pre", lineage=None), toys / "pre.mgt")
    assert call(capsys, "grid", "init", "--manifest", m, "--base", toys / "pre.mgt")[0] == 0
    a = from_arrays("A_t1", {"w": np.ones(4)}, lineage="pre")
    b = from_arrays("B_t1", {"w": np.full(4, 3.0)}, lineage="pre")
    for ck, d in ((a, "A"), (b, "B")):
        save(ck, toys / f"{ck.id}.mgt")
        assert call(capsys, "grid", "register", "--manifest", m, "--domain", d, "--phase", "t1", "--path", toys / f"{ck.id}.mgt")[0] == 0
    code, _, err = call(capsys, "grid", "register", "--manifest", m, "--domain", "A", "--phase", "t1", "--path", toys / "A_t1.mgt")
    assert code == 2 and "force" in err
    code, out, _ = call(capsys, "grid", "ls", "--manifest", m)
    assert [e["id"] for e in json.loads(out)["entries"]] == ["A_t1", "B_t1"]
    code, _, _ = call(capsys, "grid", "resolve", "--manifest", m, "--kind", "neutral", "--member", "A:t1", "--member", "B:t1", "--out", toys / "n.mgt")
    assert code == 0 and load(toys / "n.mgt")["w"].data.tolist() == [2.0] * 4

    base = from_arrays("base", {"w": np.zeros(4)})
    save(base, toys / "base.mgt")
    recipe = {
        "method": "subspace",
        "inputs": ["A_t1", "B_t1"],
        "output_id": "merged",
        "trim": {"ties_keep_percent": 50, "ties_sign_election": True, "dare_drop_prob": 0.1},
        "checkpoints": {"base": "base.mgt", "A_t1": "A_t1.mgt", "B_t1": "B_t1.mgt"},
    }
    (toys / "r.json").write_text(json.dumps(recipe))
    code, _, err = call(capsys, "merge", "--recipe", toys / "r.json", "--out", toys / "m.mgt")
    assert code == 1 and "seed" in err
    code, out, _ = call(capsys, "merge", "--recipe", toys / "r.json", "--out", toys / "m.mgt", "--seed", 9, "--threads", 2)
    assert code == 0 and json.loads(out)["lineage"] == "A_t1,B_t1"
    cfg = TrimConfig(ties_keep_percent=50, ties_sign_election=True, dare_drop_prob=0.1, seed=9)
    want = subspace_merge(base, [task_vector(base, a), task_vector(base, b)], cfg)
    assert load(toys / "m.mgt")["w"].data.tobytes() == want["w"].data.tobytes()

    recipe["inputs"] = ["A_t1", "ghost"]
    (toys / "r2.json").write_text(json.dumps(recipe))
    code, _, err = call(capsys, "merge", "--recipe", toys / "r2.json", "--out", toys / "m2.mgt", "--seed", 1)
    assert code == 2 and "ghost" in err


def test_eval_sweep_report(toys, capsys):
    code, out, _ = call(capsys, "eval", "--ckpt", toys / "t2.mgt", "--log", toys / "Toys.jsonl", "--out", toys / "base.json")
    assert code == 0 and json.loads(out)["domain"] == "Toys"
    call(capsys, "eval", "--ckpt", toys / "t1.mgt", "--log", toys / "Toys.jsonl", "--out", toys / "old.json")
    code, out, _ = call(capsys, "report", "--merged", toys / "old.json", "--baseline", toys / "base.json", "--out", toys / "r.csv")
    assert code == 0 and "Toys" in json.loads(out)["change_pct"]
    assert (toys / "r.csv").read_text().startswith("domain,metric,merged,baseline,change_pct\n")
    code, out, _ = call(
        capsys, "temporal-sweep", "--t1", toys / "t1.mgt", "--t2", toys / "t2.mgt", "--log", toys / "Toys.jsonl",
        "--out", toys / "s.json", "--lambdas", "0:1:0.5",
    )
    doc = json.loads((toys / "s.json").read_text())
    assert code == 0 and doc["lambdas"] == [0.0, 0.5, 1.0] and set(doc["groups"]) == {"all", "active", "nonactive"}
    code, _, err = call(
        capsys, "temporal-sweep", "--t1", toys / "t1.mgt", "--t2", toys / "t2.mgt", "--log", toys / "Toys.jsonl",
        "--out", toys / "s.json", "--lambdas", "0,3",
    )
    assert code == 2 and "extrapolation" in err


def test_predict_lambda(tmp_path, capsys):
    lines = ["domain,avg_gap_days,lambda_star,p_active"] + [f"{d},{g},{l},{p}" for d, g, l, p in recency_table.ROWS]
    (tmp_path / "stats.csv").write_text("\n".join(lines) + "\n")
    code, out, _ = call(capsys, "predict-lambda", "--stats", tmp_path / "stats.csv")
    rows = {r["domain"]: r for r in csv.DictReader(io.StringIO(out))}
    assert code == 0
    for d, v in recency_table.FROZEN_LOO.items():
        assert abs(float(rows[d]["lambda_pred"]) - v) < 1e-9
        assert abs(float(rows[d]["lambda_blend"]) - recency_table.FROZEN_BLEND[d]) < 1e-9


def test_numeric_failure_exit_3(toys, capsys):
    (toys / "spec.json").write_text(json.dumps({"latent_dim": 8, "learning_rate": 1e6, "init_scale": 10.0, "epochs": {"pretrain": 5}}))
    with np.errstate(all="ignore"):
        code, _, err = call(
            capsys, "synth", "train", "--log", toys / "Toys.jsonl", "--stage", "pretrain", "--out", toys / "x.mgt",
            "--seed", 0, "--spec", toys / "spec.json",
        )
    assert code == 3 and "numeric" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mergegrid.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
