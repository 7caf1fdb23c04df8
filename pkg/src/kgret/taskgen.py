"""Self-supervised (mention, concept) pair construction from a knowledge graph.

Synonym tasks pair alternative descriptions of one node; graph tasks pair the
descriptions of directly linked nodes. ``split_80_20`` and ``make_comb`` turn
pair lists into train/dev datasets.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from kgret.errors import EmptyInput, MalformedRecord, TextContainsTab, TooFewPairs
from kgret.kg import ConceptId, GraphKind, KnowledgeGraph, _require_kind


class Task(str, Enum):
    ICD_SYN = "icd-syn"
    ICD_GRAPH = "icd-graph"
    SNOMED_SYN = "snomed-syn"
    SNOMED_GRAPH = "snomed-graph"
    UMLS_SYN = "umls-syn"
    UMLS_GRAPH = "umls-graph"
    # annotated mention -> gold concept pairs, used as the primary task in
    # auxiliary-loss training
    SUPERVISED = "supervised"


SYNONYM_TASKS = (Task.SNOMED_SYN, Task.UMLS_SYN)
GRAPH_TASKS = (Task.SNOMED_GRAPH, Task.UMLS_GRAPH)


@dataclass(frozen=True)
class TrainingPair:
    mention_text: str
    concept_text: str
    mention_node: ConceptId
    concept_node: ConceptId
    task: Task

    def __post_init__(self):
        if not self.mention_text or not self.concept_text:
            raise ValueError("pair texts must be non-empty")
        if self.mention_text == self.concept_text and self.mention_node == self.concept_node:
            raise ValueError(f"degenerate pair at node {self.mention_node!r}")

    @property
    def triple(self) -> tuple[str, str, Task]:
        return (self.mention_text, self.concept_text, self.task)


@dataclass
class TaskDataset:
    train: list[TrainingPair]
    dev: list[TrainingPair]
    task_label: str
    seed: int

    def __len__(self) -> int:
        return len(self.train) + len(self.dev)


@dataclass
class TaskStats:
    train_count: int
    dev_count: int
    per_task_counts: dict[str, dict[str, int]] = field(default_factory=dict)


def gen_icd_synonym_pairs(kg: KnowledgeGraph) -> list[TrainingPair]:
    """All section pairs of every ICD-10 node, in section order
    (title concatenation, code description, see-also)."""
    _require_kind(kg, GraphKind.ICD10_TREE)
    out = []
    for cid in sorted(kg.nodes):
        sections = kg.nodes[cid].icd_sections.present()
        for i in range(len(sections)):
            for j in range(i + 1, len(sections)):
                if sections[i] != sections[j]:
                    out.append(TrainingPair(sections[i], sections[j], cid, cid, Task.ICD_SYN))
    return out


def gen_icd_graph_pairs(kg: KnowledgeGraph, symmetric: bool = False) -> list[TrainingPair]:
    """Parent code description as mention, child code description as concept."""
    _require_kind(kg, GraphKind.ICD10_TREE)
    out = []
    for child in sorted(kg.parent_of):
        parent = kg.parent_of[child]
        p_text = kg.nodes[parent].icd_sections.code_description
        c_text = kg.nodes[child].icd_sections.code_description
        out.append(TrainingPair(p_text, c_text, parent, child, Task.ICD_GRAPH))
        if symmetric:
            out.append(TrainingPair(c_text, p_text, child, parent, Task.ICD_GRAPH))
    return out


def gen_synonym_pairs(kg: KnowledgeGraph, task: Task = Task.SNOMED_SYN) -> list[TrainingPair]:
    """d(d-1)/2 pairs per node: later-ranked description as mention,
    earlier-ranked as concept."""
    _require_kind(kg, GraphKind.LABELED_MULTIGRAPH)
    task = Task(task)
    if task not in SYNONYM_TASKS:
        raise ValueError(f"{task.value} is not a multigraph synonym task")
    out = []
    for cid in sorted(kg.nodes):
        descs = kg.nodes[cid].descriptions
        for p in range(1, len(descs)):
            for q in range(p):
                out.append(TrainingPair(descs[p], descs[q], cid, cid, task))
    return out


def gen_graph_pairs(
    kg: KnowledgeGraph, task: Task = Task.SNOMED_GRAPH, symmetric: bool = False
) -> list[TrainingPair]:
    """One pair of main descriptions per connected ordered node pair.

    Parallel edges under different labels collapse to one pair; self-loops
    are skipped.
    """
    _require_kind(kg, GraphKind.LABELED_MULTIGRAPH)
    task = Task(task)
    if task not in GRAPH_TASKS:
        raise ValueError(f"{task.value} is not a multigraph graph task")
    seen: set[tuple[ConceptId, ConceptId]] = set()
    out = []

    def emit(a: ConceptId, b: ConceptId) -> None:
        if (a, b) in seen:
            return
        seen.add((a, b))
        out.append(TrainingPair(kg.nodes[a].main_description, kg.nodes[b].main_description, a, b, task))

    for cid in sorted(kg.nodes):
        for target in sorted({t for _, t in kg.nodes[cid].edges}):
            if target == cid:
                continue
            emit(cid, target)
            if symmetric:
                emit(target, cid)
    return out


def generate_task(kg: KnowledgeGraph, task: Task | str, symmetric_graph_pairs: bool = False) -> list[TrainingPair]:
    task = Task(task)
    if task is Task.ICD_SYN:
        return gen_icd_synonym_pairs(kg)
    if task is Task.ICD_GRAPH:
        return gen_icd_graph_pairs(kg, symmetric=symmetric_graph_pairs)
    if task in SYNONYM_TASKS:
        return gen_synonym_pairs(kg, task)
    if task in GRAPH_TASKS:
        return gen_graph_pairs(kg, task, symmetric=symmetric_graph_pairs)
    raise ValueError(f"{task.value} pairs are not generated from a knowledge graph")


def default_tasks(kg: KnowledgeGraph, family: str = "snomed") -> tuple[Task, Task]:
    if kg.kind is GraphKind.ICD10_TREE:
        return (Task.ICD_SYN, Task.ICD_GRAPH)
    if family == "umls":
        return (Task.UMLS_SYN, Task.UMLS_GRAPH)
    return (Task.SNOMED_SYN, Task.SNOMED_GRAPH)


def supervised_pairs(kg: KnowledgeGraph, annotations: Iterable) -> list[TrainingPair]:
    """Annotated (mention, gold) rows as pairs against the gold's main description.

    ``annotations`` holds objects with ``mention_text`` and ``gold_concept``.
    """
    out = []
    for a in annotations:
        node = kg.node(a.gold_concept)
        if a.mention_text != node.main_description:
            out.append(TrainingPair(a.mention_text, node.main_description, a.gold_concept,
                                    a.gold_concept, Task.SUPERVISED))
    return out


def filter_pairs(pairs: Iterable[TrainingPair], keep: Callable[[TrainingPair], bool]) -> list[TrainingPair]:
    return [p for p in pairs if keep(p)]


def _train_size(n: int) -> int:
    # ceil(0.8 n) in integer arithmetic
    return (4 * n + 4) // 5


def split_80_20(pairs: Sequence[TrainingPair], seed: int, task_label: str | None = None) -> TaskDataset:
    """Seeded shuffle, first ceil(0.8 n) pairs to train, the rest to dev.

    Exact duplicate (mention, concept, task) triples are dropped first so the
    two sides can never share a triple.
    """
    seen: set = set()
    unique = []
    for p in pairs:
        if p.triple not in seen:
            seen.add(p.triple)
            unique.append(p)
    n = len(unique)
    if n < 5:
        raise TooFewPairs(f"need at least 5 distinct pairs to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    shuffled = [unique[i] for i in order]
    cut = _train_size(n)
    if task_label is None:
        tasks = sorted({p.task.value for p in unique})
        task_label = "+".join(tasks)
    return TaskDataset(shuffled[:cut], shuffled[cut:], task_label, seed)


def _comb_dev_quotas(dev_sizes: list[int], train_total: int, spec_quota: int) -> list[int]:
    """Per-dataset dev draw counts for ``make_comb``.

    Equal quotas of ``spec_quota`` are used whenever they keep the combined
    dataset at 80:20 within one pair. Otherwise the total dev count is moved
    to the nearest admissible value and spread as evenly as each input's dev
    pool allows.
    """
    k = len(dev_sizes)

    def ok(d: int) -> bool:
        return abs(train_total - 0.8 * (train_total + d)) <= 1 + 1e-9

    if ok(k * spec_quota):
        return [spec_quota] * k
    want = round(train_total / 4)
    target = min(
        (d for d in range(max(0, want - 2), want + 3) if ok(d)),
        key=lambda d: (abs(d - k * spec_quota), d),
    )
    target = min(target, sum(dev_sizes))
    quotas = [0] * k
    remaining = target
    # round-robin one pair at a time, largest pools first
    order = sorted(range(k), key=lambda i: (-dev_sizes[i], i))
    while remaining:
        progressed = False
        for i in order:
            if remaining and quotas[i] < dev_sizes[i]:
                quotas[i] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return quotas


def make_comb(datasets: Sequence[TaskDataset], seed: int) -> TaskDataset:
    """Down-sample every input to the smallest train size and concatenate."""
    if not datasets:
        raise EmptyInput("make_comb needs at least one dataset")
    for ds in datasets:
        if not ds.train:
            raise EmptyInput(f"dataset {ds.task_label!r} has an empty train split")
    rng = np.random.default_rng(seed)
    s = min(len(ds.train) for ds in datasets)
    s_dev = min(len(ds.dev) for ds in datasets)
    quotas = _comb_dev_quotas([len(ds.dev) for ds in datasets], s * len(datasets), s_dev)

    train: list[TrainingPair] = []
    dev: list[TrainingPair] = []
    for ds, q in zip(datasets, quotas):
        train.extend(ds.train[i] for i in sorted(rng.choice(len(ds.train), size=s, replace=False)))
        dev.extend(ds.dev[i] for i in sorted(rng.choice(len(ds.dev), size=q, replace=False)))
    train = [train[i] for i in rng.permutation(len(train))]
    dev = [dev[i] for i in rng.permutation(len(dev))]
    return TaskDataset(train, dev, "comb", seed)


def task_stats(ds: TaskDataset) -> TaskStats:
    per: dict[str, dict[str, int]] = {}
    for side, pairs in (("train", ds.train), ("dev", ds.dev)):
        for task, count in Counter(p.task.value for p in pairs).items():
            per.setdefault(task, {"train": 0, "dev": 0})[side] = count
    return TaskStats(len(ds.train), len(ds.dev), dict(sorted(per.items())))


# -- pairs file ---------------------------------------------------------------

def write_pairs(pairs: Iterable[TrainingPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            fields = (p.task.value, p.mention_node, p.concept_node, p.mention_text, p.concept_text)
            for f in fields:
                if "\t" in f or "\n" in f:
                    raise TextContainsTab(f"field {f!r} contains a tab or newline")
            fh.write("\t".join(fields) + "\n")


def read_pairs(path: str | Path) -> list[TrainingPair]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise MalformedRecord(lineno, f"expected 5 tab-separated fields, got {len(parts)}")
            task, m_node, c_node, m_text, c_text = parts
            try:
                out.append(TrainingPair(m_text, c_text, m_node, c_node, Task(task)))
            except ValueError as exc:
                raise MalformedRecord(lineno, str(exc)) from None
    return out
