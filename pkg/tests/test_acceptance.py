"""Acceptance gate: one test per criterion, one PASS/FAIL line each.

The lines are printed in pytest's terminal summary (see conftest.py). Run
alone with ``pytest tests/test_acceptance.py -v``.
"""

import hashlib
import math
import os
import subprocess
import sys
import time
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from kgret.encoder import EncoderDims, EncoderModel, backward, embed, embed_texts, train_tokenizer
from kgret.encoder.model import param_shapes
from kgret.evalkit import EvalSplit, evaluate
from kgret.experiments import (
    DeskConfig, fresh_encoder, median_r25, run_auxiliary, run_mentions_and_concepts, run_mentions_only,
    tokenizer_corpus,
)
from kgret.kg import GraphKind
from kgret.retrieval import CatalogEntry, ConceptCatalog, build_bm25_index, build_dense_index, search_dense
from kgret.synthkg import SynthSpec, generate
from kgret.taskgen import (
    gen_graph_pairs, gen_icd_graph_pairs, gen_icd_synonym_pairs, gen_synonym_pairs, make_comb, split_80_20,
    task_stats,
)
from kgret.trainer import TrainConfig, batch_loss, train

RESULTS: dict[int, str] = {}
ALL_REPORTS = []


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


@pytest.fixture(autouse=True)
def one_thread():
    with threadpool_limits(1):
        yield


# -- 1 ------------------------------------------------------------------------------

def _rel_err(a, b):
    scale = np.abs(a) + np.abs(b)
    err = np.where(scale < 1e-7, 0.0, np.abs(a - b) / np.maximum(scale, 1e-12))
    return float(err.max())


def test_criterion_1_gradient_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    worst_loss = 0.0
    for B in range(1, 9):
        S = rng.normal(scale=2.0, size=(B, B))
        _, dS = batch_loss(S)
        num = np.zeros_like(S)
        eps = 1e-4
        for i in range(B):
            for j in range(B):
                P, M = S.copy(), S.copy()
                P[i, j] += eps
                M[i, j] -= eps
                num[i, j] = (batch_loss(P)[0] - batch_loss(M)[0]) / (2 * eps)
        worst_loss = max(worst_loss, _rel_err(num, dS))

    dims = EncoderDims(vocab_size=16, dim=8, layers=1, heads=2, ffn_dim=16, max_len=7)
    worst_enc = 0.0
    for seed in range(2):
        prng = np.random.default_rng(seed)
        params = {n: prng.normal(0, 0.5, size=s) for n, s in param_shapes(dims)}
        model = EncoderModel(dims, params)
        B = 4
        ids = np.zeros((B, dims.max_len), dtype=np.int64)
        for b in range(B):
            n = int(prng.integers(1, dims.max_len - 1))
            ids[b, 0], ids[b, 1:n + 1], ids[b, n + 1] = 2, prng.integers(4, 16, size=n), 3
        up = prng.normal(size=(B, dims.dim))
        grads = backward(model, ids, up)
        eps = 1e-4
        for name, arr in model.params.items():
            flat = arr.reshape(-1)
            num = np.zeros(flat.size)
            for i in range(flat.size):
                old = flat[i]
                flat[i] = old + eps
                fp = float((embed(model, ids) * up).sum())
                flat[i] = old - eps
                fm = float((embed(model, ids) * up).sum())
                flat[i] = old
                num[i] = (fp - fm) / (2 * eps)
            worst_enc = max(worst_enc, _rel_err(num, grads[name].reshape(-1)))
    dt = time.perf_counter() - t0
    record(1, worst_loss < 1e-3 and worst_enc < 1e-3 and dt < 60,
           f"max rel err batch_loss {worst_loss:.2e}, encoder {worst_enc:.2e}; {dt:.1f}s")


# -- 2 ------------------------------------------------------------------------------

def test_criterion_2_loss_sanity(synth_500):
    ds = split_80_20(gen_synonym_pairs(synth_500.kg), 0)
    cfg = DeskConfig()
    model = fresh_encoder(tokenizer_corpus(ds.train), cfg)
    _, tl = train(model, ds, TrainConfig(batch_size=128, max_epochs=1))
    first = tl.steps[0]["loss"]
    equal, _ = batch_loss(np.zeros((2, 2)))
    ok = abs(first - math.log(128)) <= 0.3 and abs(equal - math.log(2)) <= 1e-12
    record(2, ok, f"first-step loss {first:.4f} vs ln128 {math.log(128):.4f}; B=2 equal scores {equal!r}")


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_pair_count_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    mismatches = []
    for i in range(20):
        d_min = int(rng.integers(1, 4))
        kind = GraphKind.ICD10_TREE if i % 4 == 3 else GraphKind.LABELED_MULTIGRAPH
        spec = SynthSpec(n_concepts=int(rng.integers(20, 400)),
                         synonyms_per_concept=(d_min, d_min + int(rng.integers(0, 5))),
                         edge_density=float(rng.uniform(0, 0.05)), seed=int(rng.integers(0, 10**6)), kind=kind)
        out = generate(spec)
        kg, c = out.kg, out.census
        if kind is GraphKind.ICD10_TREE:
            got = (len(gen_icd_synonym_pairs(kg)), len(gen_icd_graph_pairs(kg)))
            want = (c.synonym_pairs, c.parent_links)
        else:
            per_node = all(len(n.descriptions) == c.d[cid] for cid, n in kg.nodes.items())
            formula = sum(d * (d - 1) // 2 for d in c.d.values())
            got = (len(gen_synonym_pairs(kg)), len(gen_graph_pairs(kg)), per_node)
            want = (formula, c.graph_pairs, True)
            if c.synonym_pairs != formula:
                mismatches.append((i, "census synonym total"))
        if got != want:
            mismatches.append((i, got, want))
    dt = time.perf_counter() - t0
    record(3, not mismatches and dt < 120, f"20 specs, {len(mismatches)} mismatches; {dt:.1f}s")


# -- 4 ------------------------------------------------------------------------------

def _split_ok(ds):
    n = len(ds.train) + len(ds.dev)
    return abs(len(ds.train) - 0.8 * n) <= 1 + 1e-9


def test_criterion_4_comb_mechanics(synth_500):
    icd = generate(SynthSpec(n_concepts=300, kind=GraphKind.ICD10_TREE, seed=5)).kg
    inputs = [
        split_80_20(gen_synonym_pairs(synth_500.kg), 0),
        split_80_20(gen_graph_pairs(synth_500.kg), 0),
        split_80_20(gen_icd_synonym_pairs(icd), 0),
        split_80_20(gen_icd_graph_pairs(icd), 0),
    ]
    comb = make_comb(inputs, seed=0)
    stats = task_stats(comb)
    s = min(len(d.train) for d in inputs)
    equal = all(v["train"] == s for v in stats.per_task_counts.values()) and len(stats.per_task_counts) == 4
    splits = all(_split_ok(d) for d in inputs + [comb])
    record(4, equal and splits,
           f"per-task train {sorted(v['train'] for v in stats.per_task_counts.values())} (min {s}); "
           f"comb {len(comb.train)}/{len(comb.dev)}; 80:20 on all {len(inputs) + 1} datasets: {splits}")


# -- 5 ------------------------------------------------------------------------------

def _bm25_oracle(docs, q, k1=1.2, b=0.75):
    toks = [d.lower().split() for d in docs]
    N, avg = len(toks), sum(map(len, toks)) / len(toks)
    out = []
    for t in toks:
        tf = Counter(t)
        s = 0.0
        for term in set(q.lower().split()):
            if tf[term]:
                df = sum(term in d for d in toks)
                s += math.log(1 + (N - df + 0.5) / (df + 0.5)) * tf[term] * (k1 + 1) / (
                    tf[term] + k1 * (1 - b + b * len(t) / avg))
        out.append(s)
    return np.array(out)


def test_criterion_5_retrieval_oracle(synth_500):
    rng = np.random.default_rng(5)
    words = [w for n in list(synth_500.kg.nodes.values())[:40] for w in n.main_description.lower().split()]
    vocab = sorted(set(w for w in words if w.isalpha()))
    docs = [" ".join(rng.choice(vocab, size=int(rng.integers(1, 6)))) for _ in range(20)]
    queries = [" ".join(rng.choice(vocab, size=int(rng.integers(1, 4)))) for _ in range(10)]
    catalog = ConceptCatalog([CatalogEntry(f"D{i:02d}", d, True) for i, d in enumerate(docs)])
    bm25 = build_bm25_index(catalog)
    bm25_err = max(float(np.abs(bm25.score_entries(q)[0] - _bm25_oracle(docs, q)).max()) for q in queries)

    tok = train_tokenizer(docs, 320)
    model = EncoderModel(EncoderDims(tok.vocab_size, 32, 1, 2, 64, 16), tokenizer=tok, seed=3)
    dense = build_dense_index(model, catalog)
    dense_exact = True
    for q in queries:
        qv = embed_texts(model, [q])[0].astype(np.float64)
        scores = dense.matrix.astype(np.float64) @ qv
        oracle = sorted(((float(s), c.concept_id) for s, c in zip(scores, catalog.entries)),
                        key=lambda t: (-t[0], t[1]))
        got = search_dense(dense, model, q, 20).hits
        dense_exact &= got == [(c, s) for s, c in oracle]

    kgcat = ConceptCatalog.from_kg(synth_500.kg)
    reports = [evaluate(build_bm25_index(kgcat), EvalSplit("in-domain", synth_500.test_in_domain), kgcat)]
    ALL_REPORTS.extend(reports)
    prefix = all(r.r1 <= r.r25 for r in ALL_REPORTS)
    record(5, dense_exact and bm25_err <= 1e-9 and prefix,
           f"dense exact {dense_exact}; BM25 max abs err {bm25_err:.1e}; R@1<=R@25 on {len(ALL_REPORTS)} reports")


# -- 6..8 -----------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_mentions_only(synth_500):
    t0 = time.perf_counter()
    cfg = DeskConfig()
    res = run_mentions_only(cfg, synth_500)
    dt = time.perf_counter() - t0
    ALL_REPORTS.extend(res.reports.values())
    r = {k: v.r1 for k, v in res.reports.items()}
    trained, bm25, untrained = r[("trained", "in-domain")], r[("bm25", "in-domain")], r[("untrained", "in-domain")]
    margin = r[("trained", "acronym")] - r[("bm25", "acronym")]
    ok = (trained > bm25 and trained > untrained and margin >= 0.10 and cfg.train.max_epochs <= 30
          and dt <= 15 * 60 and all(v.r1 <= v.r25 for v in res.reports.values()))
    record(6, ok, f"R@1 trained {trained:.4f} bm25 {bm25:.4f} untrained {untrained:.4f}; "
                  f"acronym margin {margin:+.4f} (n={res.get('trained', 'acronym').n}); "
                  f"{cfg.train.max_epochs} epochs; {dt:.0f}s")


@pytest.mark.slow
def test_criterion_7_mentions_and_concepts(synth_500):
    res = run_mentions_and_concepts(DeskConfig(), synth_500)
    ALL_REPORTS.extend(res.reports.values())
    trained, untrained = res.get("trained", "held-out").r25, res.get("untrained", "held-out").r25
    ok = trained > untrained and res.info["leaked"] == 0 and all(r.r1 <= r.r25 for r in res.reports.values())
    record(7, ok, f"held-out R@25 trained {trained:.4f} vs untrained {untrained:.4f}; "
                  f"{res.info['held_out']} held-out concepts, {res.info['leaked']} leaked")


@pytest.mark.slow
def test_criterion_8_auxiliary_task():
    # the supervised primary set is small (~160 train pairs), so B=32
    cfg = DeskConfig(train=TrainConfig(max_epochs=10, batch_size=32))
    res = run_auxiliary(cfg, seeds=(0, 1, 2))
    ALL_REPORTS.extend(res.reports.values())
    multi, only = median_r25(res, "multitask"), median_r25(res, "primary-only")
    per_seed = ", ".join(f"{s} {split[-2:]} {r.r25:.2f}" for (s, split), r in sorted(res.reports.items()))
    prefix = all(r.r1 <= r.r25 for r in res.reports.values())
    record(8, multi >= only and prefix, f"median held-out R@25 multitask {multi:.4f} vs primary-only {only:.4f} ({per_seed})")


# -- 9 ------------------------------------------------------------------------------

PIPELINE = [
    ["synth", "--out-dir", "data", "--seed", "0"],
    ["gen-tasks", "--task", "snomed-syn", "--kg", "data/kg.jsonl", "--out", "pairs.tsv", "--seed", "0"],
    ["train", "--pairs", "pairs.tsv", "--out-dir", "model", "--epochs", "1", "--seed", "0"],
    ["index", "build-dense", "--kg", "data/kg.jsonl", "--model", "model/model.kgre", "--out", "dense.idx"],
    ["index", "build-bm25", "--kg", "data/kg.jsonl", "--out", "bm25.idx"],
    ["eval", "--system", "dense", "--index", "dense.idx", "--model", "model/model.kgre", "--kg", "data/kg.jsonl",
     "--split", "data/test.tsv", "--out", "dense.report.jsonl"],
    ["eval", "--system", "bm25", "--index", "bm25.idx", "--kg", "data/kg.jsonl", "--split", "data/test.tsv",
     "--out", "bm25.report.jsonl"],
]


def _run_pipeline(workdir: Path) -> dict[str, str]:
    workdir.mkdir()
    env = {**os.environ, "OMP_NUM_THREADS": "1"}
    for step in PIPELINE:
        subprocess.run([sys.executable, "-m", "kgret.cli", "--workdir", str(workdir), "--threads", "1", *step],
                       check=True, capture_output=True, env=env)
    return {str(p.relative_to(workdir)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(workdir.rglob("*")) if p.is_file() and not p.name.endswith(".timing.json")}


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path):
    a = _run_pipeline(tmp_path / "run1")
    b = _run_pipeline(tmp_path / "run2")
    manifests = [k for k in a if k.endswith(".manifest.json")]
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    record(9, not differing and len(manifests) == len(PIPELINE),
           f"{len(a)} files ({len(manifests)} manifests) compared; {len(differing)} differ {differing[:3]}")
