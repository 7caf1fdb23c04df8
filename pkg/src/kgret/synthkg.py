"""Seeded synthetic ontologies with exact censuses.

Concepts come from a compositional grammar, modifier + body part + condition
("acute gastro intestinal hemorrhage"). Alternative descriptions and test
mentions are surface variants of the same triple: word-level synonyms,
reordered templates, acronyms of multiword body parts ("GI") and character
typos. Every mention string is absent from the graph's descriptions, so
evaluation is zero-shot on mentions by construction.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kgret.errors import SpecInvalid
from kgret.evalkit import AnnotatedMention
from kgret.kg import ConceptNode, GraphKind, IcdSections, KnowledgeGraph, build_graph

MODIFIERS: list[tuple[str, tuple[str, ...]]] = [
    ("acute", ("sudden",)),
    ("chronic", ("persistent", "longstanding")),
    ("mild", ("slight",)),
    ("severe", ("serious", "marked")),
    ("recurrent", ("relapsing",)),
    ("congenital", ("inborn",)),
    ("progressive", ("advancing",)),
    ("localized", ("focal",)),
    ("diffuse", ("widespread",)),
    ("traumatic", ("injury related",)),
]

BODY_PARTS: list[tuple[str, tuple[str, ...]]] = [
    ("gastro intestinal", ("digestive tract",)),
    ("coronary artery", ("heart vessel",)),
    ("central nervous system", ("brain and spinal cord",)),
    ("upper respiratory tract", ("upper airway",)),
    ("urinary tract", ("bladder and urethra",)),
    ("left ventricle", ("left heart chamber",)),
    ("lower back", ("lumbar region",)),
    ("peripheral nerve", ("outer nerve",)),
    ("chest", ("thorax", "thoracic region")),
    ("liver", ("hepatic tissue",)),
    ("kidney", ("renal tissue",)),
    ("skin", ("dermis",)),
    ("lung", ("pulmonary tissue",)),
    ("joint", ("articulation",)),
]

CONDITIONS: list[tuple[str, tuple[str, ...]]] = [
    ("inflammation", ("swelling",)),
    ("hemorrhage", ("bleeding",)),
    ("pain", ("ache",)),
    ("infection", ("sepsis",)),
    ("obstruction", ("blockage",)),
    ("lesion", ("injury site",)),
    ("tumor", ("neoplasm", "growth")),
    ("ulcer", ("sore",)),
    ("stenosis", ("narrowing",)),
    ("fibrosis", ("scarring",)),
    ("spasm", ("cramp",)),
]

RELATION_LABELS = ("is_a", "finding_site", "relative_to", "associated_with", "due_to", "has_severity")

# 0: "{mod} {body} {cond}"   1: "{cond} of {body}, {mod}"   2: "{body} {cond}, {mod}"
N_TEMPLATES = 3


def acronym(phrase: str) -> str | None:
    words = phrase.split()
    if len(words) < 2:
        return None
    return "".join(w[0] for w in words).upper()


def has_acronym(text: str) -> bool:
    return any(len(w) >= 2 and w.isalpha() and w.isupper() for w in text.replace(",", " ").split())


@dataclass(frozen=True)
class NoiseRates:
    acronym_rate: float = 0.3
    reorder_rate: float = 0.3
    typo_rate: float = 0.1


@dataclass(frozen=True)
class SynthSpec:
    n_concepts: int = 500
    synonyms_per_concept: tuple[int, int] = (2, 5)
    edge_density: float = 0.01
    tree_branching: int = 8
    surface_noise: NoiseRates = field(default_factory=NoiseRates)
    seed: int = 0
    kind: GraphKind = GraphKind.LABELED_MULTIGRAPH
    annotated_fraction: float = 0.2
    annotations_per_concept: int = 2

    def validate(self) -> None:
        d_min, d_max = self.synonyms_per_concept
        rates = asdict(self.surface_noise).values()
        problems = []
        if self.n_concepts < 10:
            problems.append("n_concepts must be >= 10")
        if d_min < 1 or d_max < d_min:
            problems.append("synonyms_per_concept must satisfy 1 <= d_min <= d_max")
        if not all(0.0 <= r <= 1.0 for r in rates):
            problems.append("noise rates must lie in [0, 1]")
        if not 0.0 <= self.edge_density <= 1.0:
            problems.append("edge_density must lie in [0, 1]")
        if self.tree_branching < 1:
            problems.append("tree_branching must be >= 1")
        if not 0.0 <= self.annotated_fraction <= 1.0:
            problems.append("annotated_fraction must lie in [0, 1]")
        if self.kind is GraphKind.LABELED_MULTIGRAPH:
            cap = len(MODIFIERS) * len(BODY_PARTS) * len(CONDITIONS)
            if self.n_concepts > cap:
                problems.append(f"grammar supports at most {cap} concepts")
            if d_max > 12:
                problems.append("d_max above 12 exceeds the variant space of short phrases")
        elif _tree_capacity(self.tree_branching) < self.n_concepts:
            problems.append(f"branching {self.tree_branching} supports at most "
                            f"{_tree_capacity(self.tree_branching)} tree nodes")
        if problems:
            raise SpecInvalid("; ".join(problems))


@dataclass
class SynthCensus:
    nodes: int
    edges: int
    parent_links: int
    d: dict[str, int]
    synonym_pairs: int
    graph_pairs: int

    def records(self) -> list[dict]:
        head = {k: v for k, v in asdict(self).items() if k != "d"}
        return [{"census": head}] + [{"node": cid, "d": d} for cid, d in self.d.items()]


@dataclass
class SynthOutput:
    kg: KnowledgeGraph
    census: SynthCensus
    test_in_domain: list[AnnotatedMention]
    mention_pool: list[AnnotatedMention]
    train_annotations: list[AnnotatedMention]


# -- surface forms ------------------------------------------------------------------

Triple = tuple  # (mod index | None, body index | None, cond index)


def render(triple: Triple, choice: tuple[int, int, int], template: int) -> str:
    """Text for a triple; ``choice`` picks a surface per slot.

    Surface 0 is canonical, 1.. are synonyms, and for body parts -1 is the
    acronym.
    """
    mi, bi, ci = triple
    mc, bc, cc = choice

    def pick(table, idx, c):
        canon, syns = table[idx]
        if c == -1:
            return acronym(canon)
        return canon if c == 0 else syns[c - 1]

    mod = pick(MODIFIERS, mi, mc) if mi is not None else None
    body = pick(BODY_PARTS, bi, bc) if bi is not None else None
    cond = pick(CONDITIONS, ci, cc)
    if template == 0 or (template == 2 and body is None):
        return " ".join(w for w in (mod, body, cond) if w)
    if template == 1:
        head = f"{cond} of {body}" if body else cond
    else:
        head = f"{body} {cond}"
    return f"{head}, {mod}" if mod else head


def parse_main(text: str) -> Triple:
    """Inverse of the canonical rendering; raises ValueError on unparseable text."""
    mods = {m: i for i, (m, _) in enumerate(MODIFIERS)}
    bodies = {b: i for i, (b, _) in enumerate(BODY_PARTS)}
    conds = {c: i for i, (c, _) in enumerate(CONDITIONS)}
    words = text.lower().split()
    if not words or words[-1] not in conds:
        raise ValueError(f"no condition at the end of {text!r}")
    ci = conds[words[-1]]
    rest = words[:-1]
    mi = None
    if rest and rest[0] in mods:
        mi = mods[rest[0]]
        rest = rest[1:]
    bi = None
    if rest:
        phrase = " ".join(rest)
        if phrase not in bodies:
            raise ValueError(f"unknown body part {phrase!r} in {text!r}")
        bi = bodies[phrase]
    return (mi, bi, ci)


def _typo(text: str, rng: np.random.Generator) -> str:
    words = text.split(" ")
    cand = [i for i, w in enumerate(words) if len(w.strip(",")) >= 4 and not w.isupper()]
    if not cand:
        return text
    wi = cand[int(rng.integers(len(cand)))]
    w = words[wi]
    core, tail = (w[:-1], ",") if w.endswith(",") else (w, "")
    pos = int(rng.integers(1, len(core) - 1))
    op = int(rng.integers(3))
    if op == 0:
        core = core[:pos] + core[pos + 1] + core[pos] + core[pos + 2:]
    elif op == 1:
        core = core[:pos] + core[pos + 1:]
    else:
        core = core[:pos] + core[pos] + core[pos:]
    words[wi] = core + tail
    return " ".join(words)


def sample_variant(triple: Triple, rates: NoiseRates, rng: np.random.Generator) -> str:
    mi, bi, ci = triple
    mc = 0 if mi is None else (int(rng.integers(1, len(MODIFIERS[mi][1]) + 1)) if rng.random() < 0.5 else 0)
    bc = 0
    if bi is not None:
        canon, syns = BODY_PARTS[bi]
        if acronym(canon) and rng.random() < rates.acronym_rate:
            bc = -1
        elif rng.random() < 0.5:
            bc = int(rng.integers(1, len(syns) + 1))
    cc = int(rng.integers(1, len(CONDITIONS[ci][1]) + 1)) if rng.random() < 0.5 else 0
    template = 0
    if rng.random() < rates.reorder_rate:
        template = 1 + int(rng.integers(N_TEMPLATES - 1))
    text = render(triple, (mc, bc, cc), template)
    if rng.random() < rates.typo_rate:
        text = _typo(text, rng)
    return text


def _fresh_variant(triple: Triple, rates: NoiseRates, rng: np.random.Generator, taken: set[str]) -> str:
    """A variant whose lowercased form is not in ``taken``; typos are forced
    once plain sampling keeps colliding."""
    for attempt in range(200):
        text = sample_variant(triple, rates, rng)
        if attempt >= 50:
            text = _typo(text, rng)
        if text.lower() not in taken:
            taken.add(text.lower())
            return text
    raise SpecInvalid(f"could not find a fresh surface form for {render(triple, (0, 0, 0), 0)!r}")


# -- graph construction -------------------------------------------------------------

def _tree_capacity(b: int) -> int:
    l1 = min(b, len(CONDITIONS))
    l2 = l1 * min(b, len(BODY_PARTS))
    l3 = l2 * min(b, len(MODIFIERS))
    return 1 + l1 + l2 + l3


def _multigraph(spec: SynthSpec, rng: np.random.Generator):
    all_triples = list(itertools.product(range(len(MODIFIERS)), range(len(BODY_PARTS)), range(len(CONDITIONS))))
    picked = rng.choice(len(all_triples), size=spec.n_concepts, replace=False)
    triples = [all_triples[i] for i in picked]
    ids = [str(10_000_000 + 37 * i) for i in range(spec.n_concepts)]
    d_min, d_max = spec.synonyms_per_concept
    taken: set[str] = set()
    descs = []
    for t in triples:
        main = render(t, (0, 0, 0), 0)
        taken.add(main.lower())
        d = int(rng.integers(d_min, d_max + 1))
        descs.append([main] + [_fresh_variant(t, spec.surface_noise, rng, taken) for _ in range(d - 1)])

    # edges favour concepts sharing two of their three slots
    n = spec.n_concepts
    by_key: dict[tuple, list[int]] = {}
    for i, (m, b, c) in enumerate(triples):
        for key in ((None, b, c), (m, None, c), (m, b, None)):
            by_key.setdefault(key, []).append(i)
    related = [sorted({j for key in ((None, b, c), (m, None, c), (m, b, None)) for j in by_key[key]} - {i})
               for i, (m, b, c) in enumerate(triples)]
    target_pairs = min(round(spec.edge_density * n * (n - 1)), n * (n - 1))
    pairs: dict[tuple[int, int], list[str]] = {}
    while len(pairs) < target_pairs:
        i = int(rng.integers(n))
        if related[i] and rng.random() < 0.7:
            j = related[i][int(rng.integers(len(related[i])))]
        else:
            j = int(rng.integers(n))
        if i == j or (i, j) in pairs:
            continue
        labels = [RELATION_LABELS[int(rng.integers(len(RELATION_LABELS)))]]
        if rng.random() < 0.1:
            second = RELATION_LABELS[int(rng.integers(len(RELATION_LABELS)))]
            if second != labels[0]:
                labels.append(second)
        pairs[(i, j)] = labels
    edges: list[list[tuple[str, str]]] = [[] for _ in range(n)]
    for (i, j), labels in sorted(pairs.items()):
        edges[i].extend((lab, ids[j]) for lab in labels)

    nodes = [ConceptNode(ids[i], tuple(descs[i]), edges=tuple(edges[i])) for i in range(n)]
    kg = build_graph(GraphKind.LABELED_MULTIGRAPH, nodes, relation_labels=RELATION_LABELS)
    d = {ids[i]: len(descs[i]) for i in range(n)}
    census = SynthCensus(
        nodes=n,
        edges=sum(len(e) for e in edges),
        parent_links=0,
        d=d,
        synonym_pairs=sum(k * (k - 1) // 2 for k in d.values()),
        graph_pairs=len(pairs),
    )
    return kg, census, dict(zip(ids, triples)), taken


def _capital(text: str) -> str:
    return text[:1].upper() + text[1:]


def _tree(spec: SynthSpec, rng: np.random.Generator):
    b = spec.tree_branching
    root = "K00"
    nodes_meta: list[tuple[str, Triple | None, str | None]] = [(root, None, None)]
    frontier: list[tuple[str, Triple | None]] = [(root, None)]
    while frontier and len(nodes_meta) < spec.n_concepts:
        next_frontier = []
        for cid, triple in frontier:
            if triple is None:
                options = [(None, None, c) for c in range(len(CONDITIONS))]
            elif triple[1] is None:
                options = [(None, bi, triple[2]) for bi in range(len(BODY_PARTS))]
            elif triple[0] is None:
                options = [(mi, triple[1], triple[2]) for mi in range(len(MODIFIERS))]
            else:
                options = []
            picks = rng.choice(len(options), size=min(b, len(options)), replace=False) if options else []
            for o in sorted(int(p) for p in picks):
                if len(nodes_meta) >= spec.n_concepts:
                    break
                t = options[o]
                level = sum(x is not None for x in t)
                if level == 1:
                    child = f"K{t[2] + 1:02d}"
                elif level == 2:
                    child = f"K{t[2] + 1:02d}.{t[1]:02d}"
                else:
                    child = f"K{t[2] + 1:02d}.{t[1]:02d}{t[0]}"
                nodes_meta.append((child, t, cid))
                next_frontier.append((child, t))
        frontier = next_frontier

    taken: set[str] = set()
    nodes, parent_of, triples, d = [], {}, {}, {}
    for cid, t, parent in nodes_meta:
        if t is None:
            sections = IcdSections("Condition", f"{cid} Condition, unspecified", None)
        else:
            title = _capital(render(t, (0, 0, 0), 0))
            formal = render(t, (0, 0, 0), 1)
            if t[0] is None:
                formal += ", unspecified"
            code_desc = f"{cid} {_capital(formal)}"
            taken.update({title.lower(), code_desc.lower()})
            see_also = None
            if rng.random() < 0.8:
                see_also = _capital(_fresh_variant(t, spec.surface_noise, rng, taken))
            sections = IcdSections(title, code_desc, see_also)
            triples[cid] = t
        node = ConceptNode(cid, tuple(dict.fromkeys(sections.present())), icd_sections=sections)
        nodes.append(node)
        d[cid] = len(node.descriptions)
        if parent is not None:
            parent_of[cid] = parent
    kg = build_graph(GraphKind.ICD10_TREE, nodes, parent_of)
    census = SynthCensus(
        nodes=len(nodes), edges=0, parent_links=len(parent_of), d=d,
        synonym_pairs=sum(k * (k - 1) // 2 for k in d.values()), graph_pairs=len(parent_of),
    )
    return kg, census, triples, taken


def generate(spec: SynthSpec) -> SynthOutput:
    """Build a graph, its census and three disjoint mention sets.

    Returns the in-domain test set (one unseen variant per concept), a
    holdout-ready pool (one more per concept) and annotated training mentions
    for a seeded subset of concepts.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    if spec.kind is GraphKind.LABELED_MULTIGRAPH:
        kg, census, triples, taken = _multigraph(spec, rng)
    else:
        kg, census, triples, taken = _tree(spec, rng)

    mention_rng = np.random.default_rng([spec.seed, 1])
    ids = [cid for cid in kg.nodes if cid in triples]
    test = [AnnotatedMention(_fresh_variant(triples[c], spec.surface_noise, mention_rng, taken), c) for c in ids]
    pool = [AnnotatedMention(_fresh_variant(triples[c], spec.surface_noise, mention_rng, taken), c) for c in ids]
    n_ann = round(spec.annotated_fraction * len(ids))
    chosen = sorted(int(i) for i in mention_rng.choice(len(ids), size=n_ann, replace=False))
    annotations = [
        AnnotatedMention(_fresh_variant(triples[ids[i]], spec.surface_noise, mention_rng, taken), ids[i])
        for i in chosen for _ in range(spec.annotations_per_concept)
    ]
    return SynthOutput(kg, census, test, pool, annotations)


def acronym_slice(mentions: Sequence[AnnotatedMention]) -> list[AnnotatedMention]:
    return [m for m in mentions if has_acronym(m.mention_text)]


def write_census(census: SynthCensus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in census.records():
            fh.write(json.dumps(rec) + "\n")


def read_census(path: str | Path) -> SynthCensus:
    with open(path, encoding="utf-8") as fh:
        head = json.loads(fh.readline())["census"]
        d = {}
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                d[rec["node"]] = rec["d"]
    return SynthCensus(d=d, **head)
