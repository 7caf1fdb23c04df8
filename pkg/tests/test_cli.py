import json

import pytest

from kgret import cli
from kgret.errors import NonFinite
from kgret.taskgen import read_pairs

TINY_TRAIN = ["--epochs", "1", "--batch-size", "16", "--dim", "16", "--layers", "1", "--heads", "2",
              "--ffn-dim", "32", "--max-len", "16", "--vocab-size", "400"]


def run(wd, *args):
    return cli.main(["--workdir", str(wd), *args])


@pytest.fixture
def synth_dir(tmp_path):
    assert run(tmp_path, "synth", "--out-dir", "s", "--n-concepts", "60", "--d-min", "2", "--d-max", "4",
               "--edge-density", "0.05", "--seed", "1") == 0
    return tmp_path


def manifest(path):
    return json.loads(path.read_text())


def test_synth_outputs_and_manifest(synth_dir):
    s = synth_dir / "s"
    for name in ("kg.jsonl", "census.jsonl", "test.tsv", "pool.tsv", "annotations.tsv"):
        assert (s / name).exists()
    m = manifest(s / "synth.manifest.json")
    assert set(m) == {"command", "config", "seeds", "inputs", "outputs", "versions"}
    assert m["seeds"] == {"synth": 1} and "--workdir" not in m["command"]
    assert (s / "synth.manifest.timing.json").exists()
    assert cli.verify_manifest(s / "synth.manifest.json", synth_dir) == []
    (s / "test.tsv").write_text("tampered\tx\n")
    assert cli.verify_manifest(s / "synth.manifest.json", synth_dir) == ["s/test.tsv"]


def test_gen_tasks_example(synth_dir):
    assert run(synth_dir, "gen-tasks", "--task", "snomed-syn", "--kg", "s/kg.jsonl", "--out", "pairs.tsv",
               "--seed", "7") == 0
    pairs = read_pairs(synth_dir / "pairs.tsv")
    train, dev = read_pairs(synth_dir / "pairs.train.tsv"), read_pairs(synth_dir / "pairs.dev.tsv")
    assert len(train) + len(dev) == len(pairs) and len(train) == (4 * len(pairs) + 4) // 5
    m = manifest(synth_dir / "pairs.tsv.manifest.json")
    assert m["seeds"] == {"split": 7} and "s/kg.jsonl" in m["inputs"]
    stats = json.loads((synth_dir / "pairs.stats.json").read_text())
    assert stats["train_count"] == len(train)


def test_gen_tasks_comb(synth_dir):
    assert run(synth_dir, "gen-tasks", "--task", "comb", "--kg", "s/kg.jsonl", "--out", "comb.tsv") == 0
    stats = json.loads((synth_dir / "comb.stats.json").read_text())
    counts = {c["train"] for c in stats["per_task_counts"].values()}
    assert len(counts) == 1 and len(stats["per_task_counts"]) == 2


def test_config_precedence(synth_dir):
    (synth_dir / "run.cfg").write_text("# comment\nseed = 3\nout = cfg.tsv\ntask=snomed-graph\n")
    assert run(synth_dir, "--config", "run.cfg", "gen-tasks", "--kg", "s/kg.jsonl") == 0
    m = manifest(synth_dir / "cfg.tsv.manifest.json")
    assert m["config"]["seed"] == 3 and m["config"]["task"] == "snomed-graph"
    assert "run.cfg" in m["inputs"]
    assert run(synth_dir, "--config", "run.cfg", "gen-tasks", "--kg", "s/kg.jsonl", "--seed", "5") == 0
    assert manifest(synth_dir / "cfg.tsv.manifest.json")["config"]["seed"] == 5
    (synth_dir / "bad.cfg").write_text("no_such_option = 1\n")
    assert run(synth_dir, "--config", "bad.cfg", "gen-tasks", "--kg", "s/kg.jsonl") == 1


def test_exit_codes(synth_dir, monkeypatch, capsys):
    assert run(synth_dir) == 1
    assert run(synth_dir, "gen-tasks", "--kg", "s/kg.jsonl") == 1          # missing --task/--out
    assert run(synth_dir, "ingest", "--kg", "missing.jsonl") == 1
    (synth_dir / "broken.jsonl").write_text('{"id": "a", "descriptions": ["x"], "edges": [["is_a", "zz"]]}\n')
    assert run(synth_dir, "ingest", "--kg", "broken.jsonl") == 1
    assert "validation error" in capsys.readouterr().err

    def boom(run_ctx):
        raise NonFinite("diverged")

    monkeypatch.setattr(cli, "cmd_report", boom)
    assert run(synth_dir, "report", "--reports", "x") == 2


def test_ingest_holdout(synth_dir):
    assert run(synth_dir, "ingest", "--kg", "s/kg.jsonl", "--mentions", "s/pool.tsv",
               "--regime", "mentions-and-concepts", "--split-out", "held.tsv", "--holdout-out", "held.ids") == 0
    held = (synth_dir / "held.ids").read_text().split()
    assert len(held) == 12
    golds = {line.split("\t")[1] for line in (synth_dir / "held.tsv").read_text().splitlines()}
    assert golds <= set(held)
    assert run(synth_dir, "gen-tasks", "--task", "snomed-syn", "--kg", "s/kg.jsonl", "--exclude", "held.ids",
               "--out", "p.tsv") == 0
    assert not {c for p in read_pairs(synth_dir / "p.tsv") for c in (p.mention_node, p.concept_node)} & set(held)


def test_pipeline_bm25_vs_dense(synth_dir, capsys):
    wd = synth_dir
    assert run(wd, "gen-tasks", "--task", "snomed-syn", "--kg", "s/kg.jsonl", "--out", "p.tsv") == 0
    assert run(wd, "train", "--pairs", "p.tsv", "--out-dir", "m", *TINY_TRAIN) == 0
    assert (wd / "m" / "checkpoints" / "epoch-1.kgre").exists()
    log_lines = [json.loads(l) for l in (wd / "m" / "train_log.jsonl").read_text().splitlines()]
    assert log_lines[0]["step"] == 0
    assert run(wd, "index", "build-bm25", "--kg", "s/kg.jsonl", "--out", "bm25.idx") == 0
    assert run(wd, "index", "build-dense", "--kg", "s/kg.jsonl", "--model", "m/model.kgre", "--out", "dense.idx") == 0
    assert run(wd, "eval", "--system", "bm25", "--index", "bm25.idx", "--kg", "s/kg.jsonl",
               "--split", "s/test.tsv", "--out", "r_bm25.jsonl") == 0
    assert run(wd, "eval", "--system", "dense", "--index", "dense.idx", "--model", "m/model.kgre",
               "--kg", "s/kg.jsonl", "--split", "s/test.tsv", "--out", "r_dense.jsonl") == 0
    capsys.readouterr()
    assert run(wd, "report", "--reports", "r_bm25.jsonl", "r_dense.jsonl", "--out", "summary.txt") == 0
    table = (wd / "summary.txt").read_text()
    header, _, row = table.splitlines()[:3]
    assert "bm25" in header and "dense" in header and row.startswith("test")
    capsys.readouterr()
    assert run(wd, "query", "--index", "dense.idx", "--model", "m/model.kgre", "--mention", "chest pain",
               "--k", "3") == 0
    hits = json.loads(capsys.readouterr().out)["hits"]
    assert len(hits) == 3
    # dense index needs its model
    assert run(wd, "eval", "--system", "dense", "--index", "dense.idx", "--split", "s/test.tsv",
               "--out", "x.jsonl") == 1
