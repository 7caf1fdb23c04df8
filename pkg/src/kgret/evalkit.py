"""Zero-shot entity retrieval evaluation (R@1 / R@25)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np

from kgret.encoder.model import EncoderModel
from kgret.errors import MalformedRecord, NoEligibleMentions, UnknownGold
from kgret.kg import ConceptId, KnowledgeGraph
from kgret.retrieval import (
    Bm25Index,
    ConceptCatalog,
    DenseIndex,
    RetrievalResult,
    search_bm25,
    search_dense_many,
)
from kgret.taskgen import TrainingPair

EVAL_K = 25


class Regime(str, Enum):
    MENTIONS_ONLY = "mentions-only"
    MENTIONS_AND_CONCEPTS = "mentions-and-concepts"


@dataclass(frozen=True)
class AnnotatedMention:
    mention_text: str
    gold_concept: ConceptId


@dataclass
class EvalSplit:
    name: str
    mentions: list[AnnotatedMention]
    regime: Regime = Regime.MENTIONS_ONLY
    held_out_concepts: frozenset[ConceptId] = frozenset()


@dataclass
class DenseSystem:
    index: DenseIndex
    model: EncoderModel
    name: str = "dense"


System = Union[DenseSystem, Bm25Index]


@dataclass
class EvalReport:
    split: str
    system: str
    r1: float
    r25: float
    n: int
    regime: str = Regime.MENTIONS_ONLY.value
    trace: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def summary_record(self) -> dict:
        return {"split": self.split, "system": self.system, "regime": self.regime, "n": self.n,
                "R@1": round(self.r1, 4), "R@25": round(self.r25, 4), **self.meta}


class HoldoutFilter:
    """Keeps a training pair only if neither side is a held-out concept."""

    def __init__(self, held_out: Iterable[ConceptId] = ()):
        self.held_out = frozenset(held_out)

    def __call__(self, pair: TrainingPair) -> bool:
        return pair.mention_node not in self.held_out and pair.concept_node not in self.held_out


def recall_at_k(results: Sequence[tuple[RetrievalResult, ConceptId]], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ValueError("recall needs at least one result")
    hits = sum(1 for res, gold in results if gold in res.ids[:k])
    return hits / len(results)


def make_zeroshot_split(
    kg: KnowledgeGraph,
    mentions: Sequence[AnnotatedMention],
    regime: Regime | str,
    holdout_fraction: float = 0.2,
    seed: int = 0,
    name: str = "test",
) -> tuple[EvalSplit, HoldoutFilter]:
    """Build an evaluation split for either zero-shot regime.

    For mentions-and-concepts, ceil(fraction * |KG|) concepts are held out
    and only mentions of those concepts are kept; the returned filter removes
    every training pair touching a held-out concept.
    """
    regime = Regime(regime)
    for m in mentions:
        if m.gold_concept not in kg:
            raise UnknownGold(f"gold concept {m.gold_concept!r} is not in the knowledge graph")
    if regime is Regime.MENTIONS_ONLY:
        return EvalSplit(name, list(mentions), regime), HoldoutFilter()
    if not 0 < holdout_fraction < 1:
        raise ValueError("holdout_fraction must lie strictly between 0 and 1")
    ids = sorted(kg.nodes)
    n_hold = math.ceil(round(holdout_fraction * len(ids), 9))
    rng = np.random.default_rng(seed)
    held = frozenset(ids[i] for i in rng.choice(len(ids), size=n_hold, replace=False))
    kept = [m for m in mentions if m.gold_concept in held]
    if not kept:
        raise NoEligibleMentions("no mention has a held-out gold concept")
    return EvalSplit(name, kept, regime, held), HoldoutFilter(held)


def _retrieve(system: System, texts: list[str], k: int) -> list[RetrievalResult]:
    if isinstance(system, DenseSystem):
        return search_dense_many(system.index, system.model, texts, k)
    return [search_bm25(system, t, k) for t in texts]


def evaluate(system: System, split: EvalSplit, catalog: ConceptCatalog | None = None,
             system_name: str | None = None) -> EvalReport:
    """Retrieve the top 25 concepts for every mention and score R@1 / R@25."""
    index_catalog = system.index.catalog if isinstance(system, DenseSystem) else system.catalog
    if catalog is not None and set(catalog.concept_ids) != set(index_catalog.concept_ids):
        raise ValueError("index was not built over the full concept catalog")
    known = set(index_catalog.concept_ids)
    for m in split.mentions:
        if m.gold_concept not in known:
            raise UnknownGold(f"gold concept {m.gold_concept!r} is not in the catalog")
    if not split.mentions:
        raise NoEligibleMentions(f"split {split.name!r} is empty")
    results = _retrieve(system, [m.mention_text for m in split.mentions], EVAL_K)
    pairs = [(res, m.gold_concept) for res, m in zip(results, split.mentions)]
    trace = [
        {"mention": m.mention_text, "gold": m.gold_concept, "rank": res.rank_of(m.gold_concept),
         "top5": res.ids[:5]}
        for res, m in zip(results, split.mentions)
    ]
    if system_name is None:
        system_name = system.name if isinstance(system, DenseSystem) else "bm25"
    return EvalReport(split.name, system_name, recall_at_k(pairs, 1), recall_at_k(pairs, EVAL_K),
                      len(pairs), split.regime.value, trace)


def recount(report: EvalReport, k: int) -> float:
    return sum(1 for t in report.trace if t["rank"] is not None and t["rank"] <= k) / report.n


# -- files ----------------------------------------------------------------------

def read_mentions(path: str | Path, kg: KnowledgeGraph | None = None) -> list[AnnotatedMention]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise MalformedRecord(lineno, "expected mention<TAB>gold_concept_id")
            if kg is not None and parts[1] not in kg:
                raise UnknownGold(f"line {lineno}: gold concept {parts[1]!r} is not in the knowledge graph")
            out.append(AnnotatedMention(parts[0], parts[1]))
    return out


def write_mentions(mentions: Iterable[AnnotatedMention], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for m in mentions:
            if "\t" in m.mention_text or "\n" in m.mention_text:
                raise ValueError(f"mention {m.mention_text!r} contains a tab or newline")
            fh.write(f"{m.mention_text}\t{m.gold_concept}\n")


def write_report(report: EvalReport, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps({"summary": report.summary_record()}, ensure_ascii=False) + "\n")
        for t in report.trace:
            fh.write(json.dumps(t, ensure_ascii=False) + "\n")


def read_report(path: str | Path) -> EvalReport:
    with open(path, encoding="utf-8") as fh:
        summary = json.loads(fh.readline())["summary"]
        trace = [json.loads(line) for line in fh if line.strip()]
    meta = {k: v for k, v in summary.items() if k not in {"split", "system", "regime", "n", "R@1", "R@25"}}
    return EvalReport(summary["split"], summary["system"], summary["R@1"], summary["R@25"], summary["n"],
                      summary["regime"], trace, meta)


def summary_table(reports: Sequence[EvalReport]) -> str:
    """Plain-text grid: one row per split, one ``R@1(R@25)`` cell per system."""
    systems = list(dict.fromkeys(r.system for r in reports))
    splits = list(dict.fromkeys(r.split for r in reports))
    cell = {(r.split, r.system): f"{r.r1:.4f}({r.r25:.4f})" for r in reports}
    regimes = {r.split: r.regime for r in reports}
    header = ["split", "regime", *systems]
    rows = [[s, regimes[s], *(cell.get((s, sys), "-") for sys in systems)] for s in splits]
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    lines = [fmt.format(*header), fmt.format(*("-" * w for w in widths))]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(line.rstrip() for line in lines) + "\n"
