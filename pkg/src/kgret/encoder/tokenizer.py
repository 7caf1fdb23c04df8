"""Byte-level BPE tokenizer.

Text is lowercased, cut into whitespace-led chunks (``" chest"``, ``" pain"``)
and each chunk is segmented by the learned merges. Merges never cross chunk
boundaries. Ids 0..3 are the specials, 4..259 the raw bytes, merges follow.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from kgret.errors import EmptyCorpus, MalformedRecord, VocabTooSmall

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIALS = ("<pad>", "<unk>", "<bos>", "<eos>")
BYTE_OFFSET = len(SPECIALS)
BASE_VOCAB = BYTE_OFFSET + 256

_CHUNK = re.compile(r" ?\S+|\s+")


def chunks(text: str) -> list[str]:
    return _CHUNK.findall(text.lower())


def _count_pairs(segs: dict[tuple[int, ...], int]) -> Counter:
    counts: Counter = Counter()
    for seg, freq in segs.items():
        for a, b in zip(seg, seg[1:]):
            counts[(a, b)] += freq
    return counts


def _apply_merge(seg: tuple[int, ...], a: int, b: int, new: int) -> tuple[int, ...]:
    out = []
    i = 0
    while i < len(seg):
        if i + 1 < len(seg) and seg[i] == a and seg[i + 1] == b:
            out.append(new)
            i += 2
        else:
            out.append(seg[i])
            i += 1
    return tuple(out)


@dataclass
class Tokenizer:
    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.token_bytes: list[bytes] = [s.encode() for s in SPECIALS] + [bytes([i]) for i in range(256)]
        self._rank: dict[tuple[int, int], int] = {}
        for a, b in self.merges:
            if not (a < len(self.token_bytes) and b < len(self.token_bytes)):
                raise ValueError(f"merge ({a}, {b}) references an undefined token")
            self._rank[(a, b)] = len(self.token_bytes)
            self.token_bytes.append(self.token_bytes[a] + self.token_bytes[b])
        self._cache: dict[str, list[int]] = {}

    @property
    def vocab_size(self) -> int:
        return len(self.token_bytes)

    @property
    def vocabulary(self) -> dict[bytes, int]:
        return {tb: i for i, tb in enumerate(self.token_bytes) if i >= BYTE_OFFSET}

    def _segment(self, chunk: str) -> list[int]:
        cached = self._cache.get(chunk)
        if cached is not None:
            return cached
        seg = [b + BYTE_OFFSET for b in chunk.encode("utf-8")]
        while len(seg) > 1:
            best = None
            for i in range(len(seg) - 1):
                r = self._rank.get((seg[i], seg[i + 1]))
                if r is not None and (best is None or r < best[0]):
                    best = (r, i)
            if best is None:
                break
            r, _ = best
            a, b = self.merges[r - BASE_VOCAB]
            seg = list(_apply_merge(tuple(seg), a, b, r))
        self._cache[chunk] = seg
        return seg

    def tokenize(self, text: str) -> list[int]:
        out: list[int] = []
        for c in chunks(text):
            out.extend(self._segment(c))
        return out

    def encode(self, text: str, max_len: int) -> list[int]:
        """BOS + tokens + EOS, truncated to ``max_len`` and PAD-filled."""
        if max_len < 3:
            raise ValueError("max_len must be at least 3")
        body = self.tokenize(text)[: max_len - 2]
        ids = [BOS, *body, EOS]
        return ids + [PAD] * (max_len - len(ids))

    def decode(self, ids: Iterable[int]) -> str:
        data = b"".join(self.token_bytes[i] for i in ids if i >= BYTE_OFFSET)
        return data.decode("utf-8", errors="replace")

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#kgret-tokenizer 1\n#merges {len(self.merges)}\n")
            for a, b in self.merges:
                fh.write(f"{a} {b}\n")
            fh.write(f"#vocab {self.vocab_size}\n")
            for i, tb in enumerate(self.token_bytes):
                fh.write(f"{i}\t{tb.hex()}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#kgret-tokenizer"):
            raise MalformedRecord(1, "not a tokenizer file")
        n_merges = int(lines[1].split()[1])
        merges = []
        for lineno in range(2, 2 + n_merges):
            a, b = lines[lineno].split()
            merges.append((int(a), int(b)))
        tok = cls(merges)
        vocab_lines = lines[3 + n_merges:]
        if len(vocab_lines) != tok.vocab_size:
            raise MalformedRecord(3 + n_merges, "vocabulary listing does not match merges")
        for lineno, line in enumerate(vocab_lines, start=4 + n_merges):
            i, hexed = line.split("\t")
            if bytes.fromhex(hexed) != tok.token_bytes[int(i)]:
                raise MalformedRecord(lineno, f"vocabulary entry {i} disagrees with merges")
        return tok


MergeHook = Callable[[int, tuple[int, int], Counter], None]


def train_tokenizer(
    corpus: Sequence[str], vocab_size: int, on_merge: MergeHook | None = None
) -> Tokenizer:
    """Greedy BPE: repeatedly merge the most frequent adjacent pair.

    Stops at ``vocab_size`` or when no pair occurs at least twice. Ties go to
    the lexicographically smallest (left bytes, right bytes). ``on_merge`` is
    called with (step, chosen pair, pair counts) before each merge is applied.
    """
    if not corpus:
        raise EmptyCorpus("tokenizer corpus is empty")
    if vocab_size < BASE_VOCAB:
        raise VocabTooSmall(f"vocab_size must be >= {BASE_VOCAB}, got {vocab_size}")
    chunk_freq = Counter(c for text in corpus for c in chunks(text))
    segs: dict[tuple[int, ...], int] = Counter()
    for c, f in chunk_freq.items():
        segs[tuple(b + BYTE_OFFSET for b in c.encode("utf-8"))] += f

    token_bytes = [s.encode() for s in SPECIALS] + [bytes([i]) for i in range(256)]
    merges: list[tuple[int, int]] = []
    step = 0
    while len(token_bytes) < vocab_size:
        counts = _count_pairs(segs)
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        pair = min(
            (p for p, c in counts.items() if c == top),
            key=lambda p: (token_bytes[p[0]], token_bytes[p[1]]),
        )
        if on_merge is not None:
            on_merge(step, pair, counts)
        new = len(token_bytes)
        merged: dict[tuple[int, ...], int] = Counter()
        for seg, f in segs.items():
            merged[_apply_merge(seg, pair[0], pair[1], new)] += f
        segs = merged
        merges.append(pair)
        token_bytes.append(token_bytes[pair[0]] + token_bytes[pair[1]])
        step += 1
    return Tokenizer(merges)
