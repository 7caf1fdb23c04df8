"""Exact top-k concept retrieval: dense inner product and Okapi BM25.

Both searchers score catalog entries (one per concept description), collapse
entries to their concept's best score, then cut to k. Equal scores are
ordered by ascending concept id.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kgret.encoder.model import EncoderModel, embed_texts
from kgret.errors import FingerprintMismatch, MalformedRecord, NonFiniteActivation
from kgret.kg import ConceptId, KnowledgeGraph

INDEX_MAGIC = b"KGIX"
_TOKEN = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class CatalogEntry:
    concept_id: ConceptId
    text: str
    is_main: bool = False


@dataclass
class ConceptCatalog:
    entries: list[CatalogEntry]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("concept catalog is empty")
        self.concept_ids = sorted({e.concept_id for e in self.entries})
        rank = {cid: i for i, cid in enumerate(self.concept_ids)}
        # entry -> position of its concept in ascending-id order
        self.entry_concept = np.array([rank[e.concept_id] for e in self.entries], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_kg(cls, kg: KnowledgeGraph, main_desc_only: bool = False) -> "ConceptCatalog":
        entries = []
        for cid, node in kg.nodes.items():
            descs = node.descriptions[:1] if main_desc_only else node.descriptions
            entries.extend(CatalogEntry(cid, text, i == 0) for i, text in enumerate(descs))
        return cls(entries)

    def records(self) -> list[dict]:
        return [{"concept_id": e.concept_id, "text": e.text, "main": e.is_main} for e in self.entries]


@dataclass
class RetrievalResult:
    hits: list[tuple[ConceptId, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def ids(self) -> list[ConceptId]:
        return [cid for cid, _ in self.hits]

    def rank_of(self, cid: ConceptId) -> int | None:
        for i, (c, _) in enumerate(self.hits, start=1):
            if c == cid:
                return i
        return None


def collapse_top_k(
    entry_scores: np.ndarray, catalog: ConceptCatalog, k: int, present: np.ndarray | None = None
) -> RetrievalResult:
    """Best entry score per concept, top k, ties by ascending concept id.

    ``present`` optionally masks entries that were not scored at all (BM25
    documents sharing no term with the query); concepts with no present
    entry are left out.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    n_concepts = len(catalog.concept_ids)
    best = np.full(n_concepts, -np.inf)
    seen = np.zeros(n_concepts, dtype=bool)
    idx = catalog.entry_concept
    scores = np.asarray(entry_scores, dtype=np.float64)
    if present is not None:
        idx, scores = idx[present], scores[present]
    np.maximum.at(best, idx, scores)
    seen[idx] = True
    cand = np.nonzero(seen)[0]
    # lexsort: last key is primary
    order = cand[np.lexsort((cand, -best[cand]))][:k]
    return RetrievalResult([(catalog.concept_ids[i], float(best[i])) for i in order])


# -- dense --------------------------------------------------------------------------

@dataclass
class DenseIndex:
    matrix: np.ndarray
    catalog: ConceptCatalog
    fingerprint: str

    def __post_init__(self):
        if self.matrix.shape[0] != len(self.catalog):
            raise ValueError("index rows do not match catalog size")

    def save(self, path: str | Path) -> None:
        n, D = self.matrix.shape
        fp = bytes.fromhex(self.fingerprint)
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC + struct.pack("<QI", n, D) + struct.pack("<I", len(fp)) + fp)
            fh.write(self.matrix.astype("<f4").tobytes())
            for rec in self.catalog.records():
                fh.write((json.dumps(rec, ensure_ascii=False) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str | Path) -> "DenseIndex":
        blob = Path(path).read_bytes()
        if blob[:4] != INDEX_MAGIC:
            raise MalformedRecord(0, "not a KGIX index file")
        n, D = struct.unpack_from("<QI", blob, 4)
        (fp_len,) = struct.unpack_from("<I", blob, 16)
        off = 20
        fp = blob[off:off + fp_len].hex()
        off += fp_len
        matrix = np.frombuffer(blob, dtype="<f4", count=n * D, offset=off).reshape(n, D).astype(np.float32)
        off += 4 * n * D
        lines = blob[off:].decode("utf-8").splitlines()
        entries = [CatalogEntry(r["concept_id"], r["text"], r["main"]) for r in map(json.loads, lines)]
        return cls(matrix, ConceptCatalog(entries), fp)


def build_dense_index(model: EncoderModel, catalog: ConceptCatalog) -> DenseIndex:
    matrix = embed_texts(model, [e.text for e in catalog.entries])
    if not np.isfinite(matrix).all():
        raise NonFiniteActivation("non-finite concept embeddings")
    return DenseIndex(matrix, catalog, model.fingerprint())


def _check_fingerprint(index: DenseIndex, model: EncoderModel) -> None:
    if model.fingerprint() != index.fingerprint:
        raise FingerprintMismatch("model does not match the encoder the index was built with")


def search_dense_embedded(index: DenseIndex, query: np.ndarray, k: int) -> RetrievalResult:
    scores = index.matrix.astype(np.float64) @ np.asarray(query, dtype=np.float64)
    return collapse_top_k(scores, index.catalog, k)


def search_dense(index: DenseIndex, model: EncoderModel, mention: str, k: int) -> RetrievalResult:
    """Exhaustive inner-product search for one mention."""
    _check_fingerprint(index, model)
    return search_dense_embedded(index, embed_texts(model, [mention])[0], k)


def search_dense_many(index: DenseIndex, model: EncoderModel, mentions: Sequence[str], k: int) -> list[RetrievalResult]:
    _check_fingerprint(index, model)
    queries = embed_texts(model, list(mentions)).astype(np.float64)
    all_scores = queries @ index.matrix.astype(np.float64).T
    return [collapse_top_k(row, index.catalog, k) for row in all_scores]


# -- BM25 ---------------------------------------------------------------------------

def bm25_tokens(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def bm25_idf(n_docs: int, df: int) -> float:
    return math.log(1.0 + (n_docs - df + 0.5) / (df + 0.5))


@dataclass
class Bm25Index:
    catalog: ConceptCatalog
    postings: dict[str, list[tuple[int, int]]]
    doc_len: np.ndarray
    k1: float = 1.2
    b: float = 0.75

    @property
    def n_docs(self) -> int:
        return len(self.doc_len)

    @property
    def avg_len(self) -> float:
        return float(self.doc_len.mean())

    def score_entries(self, query: str) -> tuple[np.ndarray, np.ndarray]:
        scores = np.zeros(self.n_docs)
        touched = np.zeros(self.n_docs, dtype=bool)
        norm = self.k1 * (1.0 - self.b + self.b * self.doc_len / self.avg_len)
        for term in dict.fromkeys(bm25_tokens(query)):
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = bm25_idf(self.n_docs, len(plist))
            docs = np.fromiter((d for d, _ in plist), dtype=np.int64, count=len(plist))
            tf = np.fromiter((t for _, t in plist), dtype=np.float64, count=len(plist))
            scores[docs] += idf * tf * (self.k1 + 1.0) / (tf + norm[docs])
            touched[docs] = True
        return scores, touched

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            head = {"format": "kgret-bm25", "version": 1, "k1": self.k1, "b": self.b,
                    "n_docs": self.n_docs, "avg_len": self.avg_len}
            fh.write(json.dumps(head) + "\n")
            for i, rec in enumerate(self.catalog.records()):
                fh.write(json.dumps({"doc": i, "len": int(self.doc_len[i]), **rec}, ensure_ascii=False) + "\n")
            for term in sorted(self.postings):
                fh.write(json.dumps({"token": term, "postings": self.postings[term]}, ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Bm25Index":
        with open(path, encoding="utf-8") as fh:
            head = json.loads(fh.readline())
            if head.get("format") != "kgret-bm25":
                raise MalformedRecord(1, "not a BM25 index file")
            entries, lengths, postings = [], [], {}
            for lineno, line in enumerate(fh, start=2):
                rec = json.loads(line)
                if "doc" in rec:
                    entries.append(CatalogEntry(rec["concept_id"], rec["text"], rec["main"]))
                    lengths.append(rec["len"])
                elif "token" in rec:
                    postings[rec["token"]] = [tuple(p) for p in rec["postings"]]
                else:
                    raise MalformedRecord(lineno, "unrecognized BM25 index record")
        return cls(ConceptCatalog(entries), postings, np.array(lengths, dtype=np.float64), head["k1"], head["b"])


def build_bm25_index(catalog: ConceptCatalog, k1: float = 1.2, b: float = 0.75) -> Bm25Index:
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    lengths = []
    for i, entry in enumerate(catalog.entries):
        toks = bm25_tokens(entry.text)
        lengths.append(len(toks))
        for term, tf in Counter(toks).items():
            postings[term].append((i, tf))
    return Bm25Index(catalog, dict(postings), np.array(lengths, dtype=np.float64), k1, b)


def search_bm25(index: Bm25Index, mention: str, k: int) -> RetrievalResult:
    """BM25 top-k; mentions sharing no term with the catalog get an empty result."""
    scores, touched = index.score_entries(mention)
    if not touched.any():
        if k < 1:
            raise ValueError("k must be >= 1")
        return RetrievalResult([])
    return collapse_top_k(scores, index.catalog, k, present=touched)

