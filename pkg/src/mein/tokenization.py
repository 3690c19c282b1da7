"""Vocabularies for the two input streams.

The expert reads whitespace-split, lowercased words (:class:`WordVocabulary`);
the imitators read byte-pair-encoded subwords (:class:`BpeVocabulary`).
The two streams are built and encoded independently.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNK = "<unk>"
EOS = "</s>"
PAD = "$"
BOUNDARY = "▁"


def tokenize(text: str) -> list[str]:
    """Expert-stream tokenization: lowercase, split on whitespace."""
    return text.lower().split()


class WordVocabulary:
    UNK_ID = 0
    EOS_ID = 1

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = [UNK, EOS, *tokens]
        self.stoi: dict[str, int] = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi and self.stoi[token] > self.EOS_ID

    def encode(self, text: str | Sequence[str], max_len: int | None = None) -> np.ndarray:
        tokens = tokenize(text) if isinstance(text, str) else list(text)
        if max_len is not None:
            tokens = tokens[:max_len]
        return np.array([self.stoi.get(t, self.UNK_ID) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "WordVocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        if lines[:2] != [UNK, EOS]:
            raise ValueError(f"{path}: not a word vocabulary (missing special tokens)")
        return cls(lines[2:])


def build_word_vocab(corpus: Iterable[str | Sequence[str]], min_count: int = 2) -> WordVocabulary:
    """Keep tokens seen at least ``min_count`` times; rarer ones map to unknown.

    Ids are assigned by descending frequency, ties alphabetically, so the
    result does not depend on corpus order.
    """
    counts: Counter[str] = Counter()
    for item in corpus:
        counts.update(tokenize(item) if isinstance(item, str) else item)
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in (UNK, EOS)),
                  key=lambda t: (-counts[t], t))
    return WordVocabulary(kept)


@dataclass
class BpeVocabulary:
    """Ordered merge table plus symbol ids.

    Id 0 is the pad symbol ``$`` and id 1 the unknown symbol; they are kept
    apart from the learned symbols, so a literal ``$`` in text is an ordinary
    character. Every word ends with a boundary marker, which makes decoding
    exact.
    """

    merges: list[tuple[str, str]]
    symbols: list[str]
    stoi: dict[str, int] = field(init=False, repr=False)
    ranks: dict[tuple[str, str], int] = field(init=False, repr=False)

    PAD_ID = 0
    UNK_ID = 1

    def __post_init__(self):
        self.stoi = {s: i + 2 for i, s in enumerate(self.symbols)}
        self.ranks = {pair: r for r, pair in enumerate(self.merges)}
        self._cache: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.symbols) + 2

    def id_to_symbol(self, i: int) -> str:
        if i == self.PAD_ID:
            return PAD
        if i == self.UNK_ID:
            return UNK
        return self.symbols[i - 2]

    def segment_word(self, word: str) -> list[str]:
        """Replay merges on one word, lowest rank first."""
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        parts = [*word, BOUNDARY]
        while len(parts) > 1:
            best = None
            for k in range(len(parts) - 1):
                rank = self.ranks.get((parts[k], parts[k + 1]))
                if rank is not None and (best is None or rank < best[0]):
                    best = (rank, k)
            if best is None:
                break
            pair = self.merges[best[0]]
            merged, k = [], 0
            while k < len(parts):
                if k < len(parts) - 1 and (parts[k], parts[k + 1]) == pair:
                    merged.append(parts[k] + parts[k + 1])
                    k += 2
                else:
                    merged.append(parts[k])
                    k += 1
            parts = merged
        self._cache[word] = parts
        return parts

    def encode_symbols(self, text: str) -> list[str]:
        if BOUNDARY in text:
            raise ValueError(f"text contains the reserved boundary character {BOUNDARY!r}")
        out: list[str] = []
        for word in text.split(" "):
            out.extend(self.segment_word(word))
        return out

    def encode(self, text: str, max_len: int | None = None) -> np.ndarray:
        # only single unseen characters can miss the table
        ids = [self.stoi.get(sym, self.UNK_ID) for sym in self.encode_symbols(text)]
        if max_len is not None:
            ids = ids[:max_len]
        return np.array(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        text = "".join("" if i == self.PAD_ID else self.id_to_symbol(int(i)) for i in ids)
        text = text.replace(BOUNDARY, " ")
        return text[:-1] if text.endswith(" ") else text

    def save(self, merges_path: str | Path, symbols_path: str | Path) -> None:
        Path(merges_path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")
        Path(symbols_path).write_text("".join(s + "\n" for s in [PAD, UNK, *self.symbols]), encoding="utf-8")

    @classmethod
    def load(cls, merges_path: str | Path, symbols_path: str | Path) -> "BpeVocabulary":
        merges = []
        for line in Path(merges_path).read_text(encoding="utf-8").split("\n")[:-1]:
            left, right = line.split(" ")
            merges.append((left, right))
        symbols = Path(symbols_path).read_text(encoding="utf-8").split("\n")[:-1]
        if symbols[:2] != [PAD, UNK]:
            raise ValueError(f"{symbols_path}: not a BPE symbol table (missing special symbols)")
        return cls(merges=merges, symbols=symbols[2:])


def learn_bpe(corpus: Iterable[str], num_merges: int) -> BpeVocabulary:
    """Learn ``num_merges`` merges by repeatedly joining the most frequent pair.

    Pairs never cross word boundaries. Ties go to the lexicographically
    smallest pair. Learning stops early once every word is a single symbol.
    """
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_counts: Counter[str] = Counter()
    for text in corpus:
        if BOUNDARY in text:
            raise ValueError(f"text contains the reserved boundary character {BOUNDARY!r}")
        word_counts.update(text.split(" "))

    words = [[*w, BOUNDARY] for w in word_counts]
    freqs = [word_counts[w] for w in word_counts]
    alphabet = sorted({ch for w in word_counts for ch in w} | {BOUNDARY})

    pair_counts: defaultdict[tuple[str, str], int] = defaultdict(int)
    where: defaultdict[tuple[str, str], set[int]] = defaultdict(set)
    for wi, (parts, f) in enumerate(zip(words, freqs)):
        for pair in zip(parts, parts[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)
    heap = [(-c, pair) for pair, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[str, str]] = []
    symbols = list(alphabet)
    known = set(symbols)
    while len(merges) < num_merges and heap:
        neg, pair = heapq.heappop(heap)
        if pair_counts.get(pair, 0) != -neg or -neg <= 0:
            continue  # stale entry
        merges.append(pair)
        new_sym = pair[0] + pair[1]
        if new_sym not in known:
            known.add(new_sym)
            symbols.append(new_sym)
        touched: dict[tuple[str, str], None] = {}
        for wi in sorted(where.pop(pair)):
            parts, f = words[wi], freqs[wi]
            for old in zip(parts, parts[1:]):
                pair_counts[old] -= f
                touched[old] = None
            merged, k = [], 0
            while k < len(parts):
                if k < len(parts) - 1 and parts[k] == pair[0] and parts[k + 1] == pair[1]:
                    merged.append(new_sym)
                    k += 2
                else:
                    merged.append(parts[k])
                    k += 1
            words[wi] = merged
            for new in zip(merged, merged[1:]):
                pair_counts[new] += f
                where[new].add(wi)
                touched[new] = None
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
    return BpeVocabulary(merges=merges, symbols=symbols)
