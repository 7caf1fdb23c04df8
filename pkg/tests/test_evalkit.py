import numpy as np
import pytest

from kgret.errors import NoEligibleMentions, UnknownGold
from kgret.evalkit import (
    AnnotatedMention, EvalSplit, Regime, evaluate, make_zeroshot_split, read_mentions, read_report,
    recall_at_k, recount, summary_table, write_mentions, write_report,
)
from kgret.retrieval import CatalogEntry, ConceptCatalog, RetrievalResult, build_bm25_index
from kgret.taskgen import filter_pairs, gen_graph_pairs, gen_synonym_pairs, split_80_20


def ranked(gold_rank, n=40):
    """Result list where the gold 'G' sits at ``gold_rank`` (None: absent)."""
    ids = [f"X{i}" for i in range(n)]
    if gold_rank is not None:
        ids.insert(gold_rank - 1, "G")
    return RetrievalResult([(c, -i) for i, c in enumerate(ids)])


def test_recall_examples():
    assert recall_at_k([(ranked(1), "G")] * 4, 1) == 1.0
    assert recall_at_k([(ranked(None), "G")] * 3, 25) == 0.0
    three = [(ranked(1), "G"), (ranked(7), "G"), (ranked(30), "G")]
    assert recall_at_k(three, 1) == pytest.approx(1 / 3)
    assert recall_at_k(three, 25) == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        recall_at_k(three, 0)


def test_mentions_only_keeps_everything(synth_small):
    split, keep = make_zeroshot_split(synth_small.kg, synth_small.test_in_domain, Regime.MENTIONS_ONLY)
    assert len(split.mentions) == len(synth_small.test_in_domain)
    assert not split.held_out_concepts


def test_holdout_size_and_hygiene(synth_small):
    kg = synth_small.kg
    split, keep = make_zeroshot_split(kg, synth_small.mention_pool, Regime.MENTIONS_AND_CONCEPTS, 0.2, seed=5)
    assert len(split.held_out_concepts) == int(np.ceil(0.2 * len(kg)))
    assert all(m.gold_concept in split.held_out_concepts for m in split.mentions)
    pairs = filter_pairs(gen_synonym_pairs(kg) + gen_graph_pairs(kg), keep)
    ds = split_80_20(pairs, 0)
    touched = {c for p in ds.train + ds.dev for c in (p.mention_node, p.concept_node)}
    assert not touched & split.held_out_concepts


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.1])
def test_holdout_fraction_bounds(synth_small, fraction):
    with pytest.raises(ValueError):
        make_zeroshot_split(synth_small.kg, synth_small.mention_pool, Regime.MENTIONS_AND_CONCEPTS, fraction)


def test_unknown_gold_rejected(synth_small):
    with pytest.raises(UnknownGold):
        make_zeroshot_split(synth_small.kg, [AnnotatedMention("x", "nope")], Regime.MENTIONS_ONLY)


def test_single_concept_catalog():
    catalog = ConceptCatalog([CatalogEntry("C1", "chest pain", True)])
    split = EvalSplit("one", [AnnotatedMention("chest pain", "C1")])
    report = evaluate(build_bm25_index(catalog), split, catalog)
    assert (report.r1, report.r25, report.n) == (1.0, 1.0, 1)


def test_evaluate_deterministic_and_recount(synth_small):
    catalog = ConceptCatalog.from_kg(synth_small.kg)
    index = build_bm25_index(catalog)
    split = EvalSplit("test", synth_small.test_in_domain)
    a, b = evaluate(index, split, catalog), evaluate(index, split, catalog)
    assert a == b
    assert a.r1 <= a.r25
    assert recount(a, 1) == a.r1 and recount(a, 25) == a.r25
    assert a.summary_record()["R@1"] == round(a.r1, 4)


def test_evaluate_rejects_partial_catalog(synth_small):
    catalog = ConceptCatalog.from_kg(synth_small.kg)
    partial = ConceptCatalog(catalog.entries[:10])
    with pytest.raises(ValueError):
        evaluate(build_bm25_index(partial), EvalSplit("t", synth_small.test_in_domain), catalog)
    with pytest.raises(UnknownGold):
        evaluate(build_bm25_index(partial), EvalSplit("t", synth_small.test_in_domain))
    with pytest.raises(NoEligibleMentions):
        evaluate(build_bm25_index(catalog), EvalSplit("t", []))


def test_files_round_trip(tmp_path, synth_small):
    write_mentions(synth_small.test_in_domain, tmp_path / "m.tsv")
    assert read_mentions(tmp_path / "m.tsv", synth_small.kg) == synth_small.test_in_domain
    (tmp_path / "bad.tsv").write_text("fever\tmissing\n")
    with pytest.raises(UnknownGold):
        read_mentions(tmp_path / "bad.tsv", synth_small.kg)

    catalog = ConceptCatalog.from_kg(synth_small.kg)
    report = evaluate(build_bm25_index(catalog), EvalSplit("test", synth_small.test_in_domain), catalog)
    write_report(report, tmp_path / "r.jsonl")
    back = read_report(tmp_path / "r.jsonl")
    assert back.r1 == round(report.r1, 4) and back.trace == report.trace
    table = summary_table([report, back])
    assert "test" in table and "bm25" in table
