"""PMI n-gram mining and unit segmentation.

Counts are exact maximum-likelihood slot counts (an n-gram slot is any
position where an n-gram of that length fits, never crossing a document
separator or padding). Multi-token PMI is the minimum over all contiguous
binary segmentations, which penalizes n-grams that decompose into
independent halves.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import PackedDataset, TokenSequence, Vocab, Window
from .errors import ConfigError, UndefinedScoreError

Gram = tuple[int, ...]


@dataclass
class NgramCounts:
    """Exact contiguous n-gram counts plus per-length slot totals."""

    counts: Counter
    slots: dict[int, int]
    n_max: int

    @property
    def total_unigrams(self) -> int:
        return self.slots.get(1, 0)

    def merge(self, other: "NgramCounts") -> "NgramCounts":
        """Combine shard counts; associative and commutative."""
        if self.n_max != other.n_max:
            raise ConfigError(f"cannot merge counts with n_max {self.n_max} != {other.n_max}")
        merged = Counter(self.counts)
        merged.update(other.counts)
        slots = dict(self.slots)
        for n, s in other.slots.items():
            slots[n] = slots.get(n, 0) + s
        return NgramCounts(counts=merged, slots=slots, n_max=self.n_max)


@dataclass
class PmiVocabulary:
    """Ranked n-gram -> PMI score map; insertion order is rank order."""

    entries: dict[Gram, float]
    n_max: int
    size_cap: int
    _max_len: int | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def max_len(self) -> int:
        if self._max_len is None:
            self._max_len = max((len(g) for g in self.entries), default=0)
        return self._max_len

    def save_tsv(self, target, header: str | None = None) -> None:
        """Write rank-ordered TSV: ``id1 id2 ... idN<TAB>score``."""
        own = isinstance(target, (str, Path))
        fh = open(target, "w", encoding="utf-8") if own else target
        try:
            if header is not None:
                fh.write(f"# {header}\n")
            for gram, score in self.entries.items():
                fh.write(" ".join(str(t) for t in gram) + f"\t{score:.9g}\n")
        finally:
            if own:
                fh.close()

    @classmethod
    def load_tsv(cls, source) -> "PmiVocabulary":
        own = isinstance(source, (str, Path))
        fh = open(source, "r", encoding="utf-8") if own else source
        try:
            entries: dict[Gram, float] = {}
            for line in fh:
                if not line.strip() or line.startswith("#"):
                    continue
                gram_part, score_part = line.rstrip("\n").split("\t")
                gram = tuple(int(t) for t in gram_part.split())
                entries[gram] = float(score_part)
            n_max = max((len(g) for g in entries), default=2)
            return cls(entries=entries, n_max=n_max, size_cap=max(len(entries), 1))
        finally:
            if own:
                fh.close()


def _iter_segments(data: PackedDataset | Iterable[TokenSequence]) -> Iterable[Sequence[int]]:
    """Maximal runs of ordinary tokens; sep/pad break runs in packed data."""
    if isinstance(data, PackedDataset):
        pad, sep = data.vocab.pad_id, data.vocab.sep_id
        for win in data.sequences:
            ids = win.ids
            breaks = (ids == pad) | (ids == sep)
            start = None
            for i in range(len(ids)):
                if breaks[i]:
                    if start is not None:
                        yield ids[start:i].tolist()
                        start = None
                elif start is None:
                    start = i
            if start is not None:
                yield ids[start:].tolist()
    else:
        for doc in data:
            yield list(doc.ids)


def count_ngrams(data: PackedDataset | Iterable[TokenSequence], n_max: int) -> NgramCounts:
    """Exact counts of all contiguous n-grams of length 1..n_max."""
    if n_max < 2:
        raise ConfigError(f"n_max must be >= 2, got {n_max}")
    counts: Counter = Counter()
    slots = {n: 0 for n in range(1, n_max + 1)}
    for seg in _iter_segments(data):
        s = len(seg)
        for n in range(1, n_max + 1):
            if s < n:
                break
            slots[n] += s - n + 1
            if n == 1:
                counts.update((t,) for t in seg)
            else:
                counts.update(zip(*(seg[i:] for i in range(n))))
    return NgramCounts(counts=counts, slots=slots, n_max=n_max)


def count_ngrams_sharded(shards: Iterable[Iterable[TokenSequence]], n_max: int) -> NgramCounts:
    """Count each shard independently and merge; equals unsharded counting."""
    result = NgramCounts(counts=Counter(), slots={}, n_max=n_max)
    for shard in shards:
        result = result.merge(count_ngrams(shard, n_max))
    return result


def _prob(gram: Gram, counts: NgramCounts) -> float:
    c = counts.counts.get(gram, 0)
    if c == 0:
        raise UndefinedScoreError(f"zero count for segment {gram}")
    return c / counts.slots[len(gram)]


def pmi_score(gram: Gram, counts: NgramCounts) -> float:
    """PMI in nats; for n > 2, the minimum over binary segmentations."""
    n = len(gram)
    if n < 2:
        raise ConfigError(f"PMI requires an n-gram of length >= 2, got {gram}")
    p_full = _prob(gram, counts)
    best = math.inf
    for k in range(1, n):
        split = math.log(p_full / (_prob(gram[:k], counts) * _prob(gram[k:], counts)))
        best = min(best, split)
    return best


def build_vocab(counts: NgramCounts, size_cap: int, min_count: int) -> PmiVocabulary:
    """Rank n-grams (count >= min_count) by PMI and keep the top size_cap.

    Ties break by higher count, then lexicographic token-id order, so caps
    are monotone: the top-k list is a prefix of the top-(k+1) list.
    """
    if size_cap < 1:
        raise ConfigError(f"size_cap must be >= 1, got {size_cap}")
    scored = [
        (pmi_score(gram, counts), c, gram)
        for gram, c in counts.counts.items()
        if len(gram) >= 2 and c >= min_count
    ]
    scored.sort(key=lambda t: (-t[0], -t[1], t[2]))
    entries = {gram: score for score, _, gram in scored[:size_cap]}
    return PmiVocabulary(entries=entries, n_max=counts.n_max, size_cap=size_cap)


def segment_units(window: Window, vocab: Vocab, mode: str,
                  pmi_vocab: PmiVocabulary | None = None) -> list[tuple[int, int]]:
    """Partition a window's maskable positions into atomic units.

    Returns half-open (start, end) ranges. single_token: one unit per
    position. whole_word: maximal runs starting at word boundaries. pmi:
    greedy leftmost-longest match against the PMI vocabulary, falling back
    to whole-word units. Pad/sep positions never appear in a unit.
    """
    if mode not in ("single_token", "whole_word", "pmi"):
        raise ConfigError(f"unknown segmentation mode {mode!r}")
    if mode == "pmi" and pmi_vocab is None:
        raise ConfigError("pmi segmentation requires a PMI vocabulary")
    ids = window.ids
    word_starts = window.word_starts
    special = (ids == vocab.pad_id) | (ids == vocab.sep_id)
    units: list[tuple[int, int]] = []
    L = len(ids)
    seg_start = None
    for i in range(L + 1):
        if i < L and not special[i]:
            if seg_start is None:
                seg_start = i
            continue
        if seg_start is None:
            continue
        units.extend(_segment_run(ids, word_starts, seg_start, i, mode, pmi_vocab))
        seg_start = None
    return units


def _segment_run(ids, word_starts, start: int, end: int, mode: str,
                 pmi_vocab: PmiVocabulary | None) -> list[tuple[int, int]]:
    if mode == "single_token":
        return [(i, i + 1) for i in range(start, end)]
    units: list[tuple[int, int]] = []
    pos = start
    max_n = pmi_vocab.max_len if (mode == "pmi" and pmi_vocab is not None) else 0
    while pos < end:
        if mode == "pmi" and max_n >= 2:
            matched = False
            for n in range(min(max_n, end - pos), 1, -1):
                gram = tuple(int(t) for t in ids[pos:pos + n])
                if gram in pmi_vocab.entries:
                    units.append((pos, pos + n))
                    pos += n
                    matched = True
                    break
            if matched:
                continue
        # whole-word unit: run until the next word start (or run end)
        nxt = pos + 1
        while nxt < end and not word_starts[nxt]:
            nxt += 1
        units.append((pos, nxt))
        pos = nxt
    return units
