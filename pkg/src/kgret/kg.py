"""In-memory medical knowledge graphs and their line-delimited file formats.

Two graph kinds are supported. ``ICD10_TREE`` nodes carry the three ICD-10
sections (title concatenation, code description, optional see-also) and a
single parent link. ``LABELED_MULTIGRAPH`` nodes carry ranked synonym
descriptions and typed directed edges; SNOMED and UMLS both map onto it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping

from kgret.errors import (
    CycleDetected,
    DanglingEdge,
    DuplicateId,
    MalformedRecord,
    UnknownId,
    WrongKind,
)

ConceptId = str


class GraphKind(str, Enum):
    ICD10_TREE = "icd10_tree"
    LABELED_MULTIGRAPH = "labeled_multigraph"


class KGFormat(str, Enum):
    ICD10_JSONL = "icd10"
    GRAPH_JSONL = "graph"


def normalize_text(text: str) -> str:
    """Strip and collapse whitespace runs. Case is preserved."""
    return " ".join(text.split())


@dataclass(frozen=True)
class IcdSections:
    title_concatenation: str
    code_description: str
    see_also: str | None = None

    def present(self) -> list[str]:
        out = [self.title_concatenation, self.code_description]
        if self.see_also:
            out.append(self.see_also)
        return out


@dataclass(frozen=True)
class ConceptNode:
    id: ConceptId
    descriptions: tuple[str, ...]
    icd_sections: IcdSections | None = None
    edges: tuple[tuple[str, ConceptId], ...] = ()

    def __post_init__(self):
        if not self.id:
            raise ValueError("concept id must be non-empty")
        if not self.descriptions or not all(self.descriptions):
            raise ValueError(f"node {self.id!r} needs at least one non-empty description")
        if len(set(self.edges)) != len(self.edges):
            raise ValueError(f"node {self.id!r} has duplicate edges")
        if self.icd_sections is not None:
            s = self.icd_sections
            if not s.title_concatenation or not s.code_description:
                raise ValueError(f"node {self.id!r} has empty ICD-10 sections")

    @property
    def main_description(self) -> str:
        return self.descriptions[0]


@dataclass(frozen=True)
class KnowledgeGraph:
    kind: GraphKind
    nodes: Mapping[ConceptId, ConceptNode]
    parent_of: Mapping[ConceptId, ConceptId] = field(default_factory=dict)
    relation_labels: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))
        object.__setattr__(self, "parent_of", MappingProxyType(dict(self.parent_of)))
        object.__setattr__(self, "relation_labels", frozenset(self.relation_labels))

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, cid: object) -> bool:
        return cid in self.nodes

    def node(self, cid: ConceptId) -> ConceptNode:
        try:
            return self.nodes[cid]
        except KeyError:
            raise UnknownId(f"unknown concept id {cid!r}") from None

    def edge_count(self) -> int:
        return sum(len(n.edges) for n in self.nodes.values())

    def children(self) -> dict[ConceptId, list[ConceptId]]:
        out: dict[ConceptId, list[ConceptId]] = {cid: [] for cid in self.nodes}
        for child, parent in self.parent_of.items():
            out[parent].append(child)
        return out


def _require_kind(kg: KnowledgeGraph, kind: GraphKind) -> None:
    if kg.kind is not kind:
        raise WrongKind(f"operation requires a {kind.value} graph, got {kg.kind.value}")


def is_parent(kg: KnowledgeGraph, a: ConceptId, b: ConceptId) -> bool:
    """True iff ``a`` is recorded as the parent of ``b``."""
    _require_kind(kg, GraphKind.ICD10_TREE)
    kg.node(a)
    kg.node(b)
    return kg.parent_of.get(b) == a


def is_connected(kg: KnowledgeGraph, a: ConceptId, b: ConceptId) -> bool:
    """True iff a directed edge a -> b exists under any relation label."""
    _require_kind(kg, GraphKind.LABELED_MULTIGRAPH)
    node = kg.node(a)
    kg.node(b)
    return any(target == b for _, target in node.edges)


def build_graph(
    kind: GraphKind,
    nodes: Iterable[ConceptNode],
    parent_of: Mapping[ConceptId, ConceptId] | None = None,
    relation_labels: Iterable[str] | None = None,
) -> KnowledgeGraph:
    """Validate graph-level invariants and assemble a KnowledgeGraph."""
    table: dict[ConceptId, ConceptNode] = {}
    for node in nodes:
        if node.id in table:
            raise DuplicateId(f"duplicate concept id {node.id!r}")
        table[node.id] = node
    parent_of = dict(parent_of or {})

    seen_labels = set()
    for node in table.values():
        for label, target in node.edges:
            if target not in table:
                raise DanglingEdge(node.id, target)
            seen_labels.add(label)
    if relation_labels is None:
        relation_labels = seen_labels
    else:
        relation_labels = set(relation_labels)
        unknown = seen_labels - relation_labels
        if unknown:
            raise MalformedRecord(0, f"undeclared relation labels {sorted(unknown)}")

    if kind is GraphKind.ICD10_TREE:
        for child, parent in parent_of.items():
            if child not in table:
                raise UnknownId(f"parent link for unknown node {child!r}")
            if parent not in table:
                raise DanglingEdge(child, parent)
        _check_acyclic(parent_of)
    elif parent_of:
        raise WrongKind("parent links are only valid in an ICD-10 tree")

    return KnowledgeGraph(kind, table, parent_of, frozenset(relation_labels))


def _check_acyclic(parent_of: Mapping[ConceptId, ConceptId]) -> None:
    done: set[ConceptId] = set()
    for start in parent_of:
        path: list[ConceptId] = []
        on_path: set[ConceptId] = set()
        cur: ConceptId | None = start
        while cur is not None and cur not in done:
            if cur in on_path:
                cycle = path[path.index(cur):] + [cur]
                raise CycleDetected("parent cycle: " + " -> ".join(cycle))
            on_path.add(cur)
            path.append(cur)
            cur = parent_of.get(cur)
        done.update(path)


def _text(value, lineno: int, name: str, optional: bool = False) -> str | None:
    if value is None and optional:
        return None
    if not isinstance(value, str):
        raise MalformedRecord(lineno, f"field {name!r} must be a string")
    text = normalize_text(value)
    if not text:
        if optional:
            return None
        raise MalformedRecord(lineno, f"field {name!r} is empty")
    return text


def _dedupe(items: Iterable[str]) -> tuple[str, ...]:
    return tuple(dict.fromkeys(items))


def _parse_icd(rec: dict, lineno: int) -> tuple[ConceptNode, ConceptId | None]:
    cid = _text(rec.get("id"), lineno, "id")
    sections = IcdSections(
        _text(rec.get("title_concat"), lineno, "title_concat"),
        _text(rec.get("code_desc"), lineno, "code_desc"),
        _text(rec.get("see_also"), lineno, "see_also", optional=True),
    )
    parent = rec.get("parent")
    if parent is not None:
        parent = _text(parent, lineno, "parent")
    node = ConceptNode(cid, _dedupe(sections.present()), icd_sections=sections)
    return node, parent


def _parse_graph(rec: dict, lineno: int) -> ConceptNode:
    cid = _text(rec.get("id"), lineno, "id")
    descs = rec.get("descriptions")
    if not isinstance(descs, list) or not descs:
        raise MalformedRecord(lineno, "'descriptions' must be a non-empty list")
    texts = _dedupe(_text(d, lineno, "descriptions") for d in descs)
    raw_edges = rec.get("edges", [])
    if not isinstance(raw_edges, list):
        raise MalformedRecord(lineno, "'edges' must be a list")
    edges = []
    for e in raw_edges:
        if not (isinstance(e, list) and len(e) == 2):
            raise MalformedRecord(lineno, "each edge must be [label, target_id]")
        edges.append((_text(e[0], lineno, "edge label"), _text(e[1], lineno, "edge target")))
    if len(set(edges)) != len(edges):
        raise MalformedRecord(lineno, "duplicate (label, target) edge")
    return ConceptNode(cid, texts, edges=tuple(edges))


def detect_format(path: str | Path) -> KGFormat:
    """Guess the record format from the first non-blank line."""
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                return KGFormat.ICD10_JSONL if "title_concat" in rec else KGFormat.GRAPH_JSONL
    raise MalformedRecord(0, "empty knowledge graph file")


def load_kg(
    path: str | Path,
    format: KGFormat | str | None = None,
    relation_labels: Iterable[str] | None = None,
) -> KnowledgeGraph:
    """Load and validate a knowledge graph file.

    Blank lines are skipped. Any other line that fails to parse raises
    ``MalformedRecord`` with its 1-based line number.
    """
    fmt = KGFormat(format) if format is not None else detect_format(path)
    nodes: list[ConceptNode] = []
    parent_of: dict[ConceptId, ConceptId] = {}
    ids: set[ConceptId] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MalformedRecord(lineno, f"invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise MalformedRecord(lineno, "record must be a JSON object")
            if fmt is KGFormat.ICD10_JSONL:
                node, parent = _parse_icd(rec, lineno)
                if parent is not None:
                    parent_of[node.id] = parent
            else:
                node = _parse_graph(rec, lineno)
            if node.id in ids:
                raise DuplicateId(f"line {lineno}: duplicate concept id {node.id!r}")
            ids.add(node.id)
            nodes.append(node)
    kind = GraphKind.ICD10_TREE if fmt is KGFormat.ICD10_JSONL else GraphKind.LABELED_MULTIGRAPH
    return build_graph(kind, nodes, parent_of, relation_labels)


def kg_records(kg: KnowledgeGraph) -> list[dict]:
    """Graph as a list of JSON-ready records in node order."""
    out = []
    for node in kg.nodes.values():
        if kg.kind is GraphKind.ICD10_TREE:
            s = node.icd_sections
            out.append({
                "id": node.id,
                "title_concat": s.title_concatenation,
                "code_desc": s.code_description,
                "see_also": s.see_also,
                "parent": kg.parent_of.get(node.id),
            })
        else:
            out.append({
                "id": node.id,
                "descriptions": list(node.descriptions),
                "edges": [[label, target] for label, target in node.edges],
            })
    return out


def dump_kg(kg: KnowledgeGraph, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in kg_records(kg):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
