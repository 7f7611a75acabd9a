import csv
import json
import subprocess
import sys

import pytest

from cmgnav.cli import main
from cmgnav.env import NavGraph
from cmgnav.navigator import validate_dump_row

SMALL = ["--set", "train.word_dim=6", "--set", "train.enc_hidden=4", "--set", "train.model_dim=8",
         "--set", "train.dec_hidden=8", "--set", "train.action_dim=5", "--set", "train.disc_hidden=4",
         "--set", "train.disc_mlp=5"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    env, data = root / "env", root / "data"
    assert run("gen-env", "--out", env, "--count", 3, "--nodes", 15, "--kmax", 4, "--dim", 8, "--seed", 1) == 0
    assert run("gen-data", "--env", env, "--out", data, "--train", 12, "--val-seen", 4, "--val-unseen", 4,
               "--unseen-graphs", 1, "--seed", 1) == 0
    out = root / "runs" / "aal"
    assert run("train", "--env", env, "--data", data, "--out", out, "--regime", "aal", "--iters", 4,
               "--batch", 4, "--eval-every", 2, "--seed", 1, *SMALL) == 0
    return root, env, data, out


# -- generation -------------------------------------------------------------------------------

def test_gen_env_two_nodes_validates(tmp_path):
    assert run("gen-env", "--out", tmp_path, "--count", 1, "--nodes", 2) == 0
    (f,) = tmp_path.glob("env_*.json")
    g = NavGraph.load(f)
    g.validate()
    assert g.n_nodes == 2


def test_gen_env_direction_cap(tmp_path):
    assert run("gen-env", "--out", tmp_path, "--count", 2, "--nodes", 50, "--kmax", 6, "--seed", 3) == 0
    for f in tmp_path.glob("env_*.json"):
        g = NavGraph.load(f)
        assert max(g.n_directions(v) for v in range(g.n_nodes)) <= 7


def test_generation_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("gen-env", "--out", tmp_path / d / "env", "--count", 3, "--nodes", 12, "--kmax", 4,
                   "--seed", 5) == 0
        assert run("gen-data", "--env", tmp_path / d / "env", "--out", tmp_path / d / "data", "--train", 6,
                   "--val-seen", 2, "--val-unseen", 2, "--unseen-graphs", 1, "--seed", 5) == 0
    for f in (tmp_path / "a").rglob("*.json*"):
        assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def test_gen_data_needs_unseen_graphs(tmp_path):
    assert run("gen-env", "--out", tmp_path / "env", "--count", 1, "--nodes", 12, "--kmax", 4) == 0
    assert run("gen-data", "--env", tmp_path / "env", "--out", tmp_path / "data") == 2


# -- exit codes -----------------------------------------------------------------------------------

def test_usage_errors(tmp_path):
    assert run() == 1
    assert run("gen-env") == 1
    assert run("frobnicate") == 1
    assert run("gen-env", "--out", tmp_path, "--set", "env.colour=3") == 1
    assert run("gen-env", "--out", tmp_path, "--set", "novalue") == 1


def test_validation_errors(workspace, tmp_path):
    root, env, data, _ = workspace
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train.typo": 1}))
    assert run("train", "--env", env, "--data", data, "--out", tmp_path / "r", "--config", bad) == 2
    assert run("train", "--env", env, "--data", data, "--out", tmp_path / "r", "--lr-gen", -1) == 2
    assert run("train", "--env", env, "--data", tmp_path, "--out", tmp_path / "r") == 2
    assert run("eval", "--env", env, "--data", data, "--out", tmp_path / "e") == 1


def test_console_script_exit_code(tmp_path):
    r = subprocess.run([sys.executable, "-m", "cmgnav.cli", "gen-env"], capture_output=True)
    assert r.returncode == 1


def test_precedence_file_then_set_then_flag(workspace, tmp_path):
    root, env, data, _ = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train.iterations": 3, "train.batch_size": 2, "train.eval_every": 0}))
    out = tmp_path / "r"
    assert run("train", "--env", env, "--data", data, "--out", out, "--config", cfg, "--set",
               "train.batch_size=3", "--regime", "teacher", *SMALL, "--iters", 2) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["config"]["train.iterations"] == 2
    assert m["config"]["train.batch_size"] == 3
    assert m["config"]["train.regime"] == "teacher"


def test_alternate_alias_and_interval_warning(workspace, tmp_path):
    root, env, data, _ = workspace
    out = tmp_path / "alt"
    assert run("train", "--env", env, "--data", data, "--out", out, "--regime", "alternate", "--iters", 2,
               "--batch", 2, *SMALL) == 0
    assert json.loads((out / "manifest.json").read_text())["config"]["train.regime"] == "alternate_only"
    with pytest.warns(UserWarning, match="interval"):
        assert run("train", "--env", env, "--data", data, "--out", tmp_path / "tf", "--regime", "teacher",
                   "--interval", 4, "--iters", 1, "--batch", 2, *SMALL) == 0


# -- train / eval -----------------------------------------------------------------------------------

def test_train_outputs(workspace):
    root, env, data, out = workspace
    m = json.loads((out / "manifest.json").read_text())
    assert set(m["dataset_hashes"]) >= {"data/episodes.jsonl", "data/vocab.json"}
    assert (out / m["checkpoint"]).exists()
    assert [e["mode"] for e in m["train_log"]] == ["teacher", "student", "teacher", "student"]
    rows = list(csv.DictReader((out / "metrics.csv").open()))
    assert [r["iteration"] for r in rows] == ["2", "2", "4", "4"]
    index = json.loads((root / "runs" / "index.json").read_text())
    assert any(v["manifest"] == "aal/manifest.json" for v in index.values())


def test_train_is_deterministic(workspace, tmp_path):
    root, env, data, out = workspace
    again = tmp_path / "again"
    assert run("train", "--env", env, "--data", data, "--out", again, "--regime", "aal", "--iters", 4,
               "--batch", 4, "--eval-every", 2, "--seed", 1, *SMALL) == 0
    for name in ("manifest.json", "metrics.csv", "checkpoint.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes()


def test_eval_oracle(workspace, tmp_path):
    root, env, data, _ = workspace
    assert run("eval", "--env", env, "--data", data, "--out", tmp_path, "--oracle") == 0
    for split in ("val_seen", "val_unseen"):
        agg = json.loads((tmp_path / f"{split}.json").read_text())
        assert (agg["SR"], agg["SPL"], agg["NE"]) == (1.0, 1.0, 0.0)


def test_eval_twice_identical_and_dump_valid(workspace, tmp_path):
    root, env, data, out = workspace
    ckpt = out / "checkpoint.json"
    for d, workers in (("a", 1), ("b", 2)):
        assert run("eval", "--env", env, "--data", data, "--out", tmp_path / d, "--checkpoint", ckpt,
                   "--traj-dump", tmp_path / d / "dump.jsonl", "--workers", workers) == 0
    for name in ("val_seen.csv", "val_seen.json", "val_unseen.csv", "val_unseen.json", "dump.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = [json.loads(line) for line in (tmp_path / "a" / "dump.jsonl").read_text().splitlines()]
    assert rows
    for r in rows:
        validate_dump_row(r)


def test_eval_width_mismatch(workspace, tmp_path):
    root, env, data, out = workspace
    other = tmp_path / "env"
    assert run("gen-env", "--out", other, "--count", 3, "--nodes", 15, "--kmax", 4, "--dim", 12, "--seed", 1) == 0
    assert run("eval", "--env", other, "--data", data, "--out", tmp_path / "e",
               "--checkpoint", out / "checkpoint.json") == 2


# -- sweep and plots -----------------------------------------------------------------------------------

def test_sweep_and_plots(workspace, tmp_path):
    root, env, data, out = workspace
    sweep = tmp_path / "sweep"
    assert run("sweep", "--env", env, "--data", data, "--out", sweep, "--intervals", "1,2", "--iters", 2,
               "--batch", 2, *SMALL) == 0
    manifests = sorted(sweep.glob("interval_*/manifest.json"))
    assert [m.parent.name for m in manifests] == ["interval_1", "interval_2"]
    assert run("eval", "--env", env, "--data", data, "--out", tmp_path / "ev",
               "--checkpoint", out / "checkpoint.json", "--traj-dump", tmp_path / "dump.jsonl") == 0
    plots = tmp_path / "plots"
    assert run("plot", "--manifests", *manifests, "--traj-dump", tmp_path / "dump.jsonl", "--env", env,
               "--out", plots) == 0
    names = {p.name for p in plots.iterdir()}
    assert {"spl_vs_interval.png", "spl_vs_interval.csv"} <= names
    assert sum(n.endswith(".png") and n.startswith("spl_vs_iteration") for n in names) == 2
    assert any(n.startswith("traj_") and n.endswith(".png") for n in names)
    assert run("plot", "--out", tmp_path / "empty") == 2
