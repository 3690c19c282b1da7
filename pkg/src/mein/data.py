"""Corpora, the synthetic generator, encoding and batching.

On-disk corpus layout (one directory)::

    train.tsv  dev.tsv  test.tsv    <label><TAB><text>, one example per line
    unlabeled.txt                   one raw text per line (optional)
    classes.txt                     one label per line (optional; fixes id order)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tokenization import BpeVocabulary, WordVocabulary, build_word_vocab, learn_bpe, tokenize


class CorpusFormatError(ValueError):
    pass


@dataclass
class Corpus:
    train: list[tuple[str, int]]
    dev: list[tuple[str, int]]
    test: list[tuple[str, int]]
    unlabeled: list[str]
    class_names: list[str]
    lexicon: "Lexicon | None" = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labeled(self, split: str) -> list[tuple[str, int]]:
        if split not in ("train", "dev", "test"):
            raise KeyError(f"unknown split {split!r}; expected train, dev or test")
        return getattr(self, split)

    def save(self, directory: str | Path) -> None:
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        for split in ("train", "dev", "test"):
            lines = (f"{self.class_names[y]}\t{text}\n" for text, y in self.labeled(split))
            (root / f"{split}.tsv").write_text("".join(lines), encoding="utf-8")
        (root / "unlabeled.txt").write_text("".join(t + "\n" for t in self.unlabeled), encoding="utf-8")
        (root / "classes.txt").write_text("".join(c + "\n" for c in self.class_names), encoding="utf-8")


def _label_sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def _read_labeled(path: Path) -> list[tuple[str, str]]:
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if "\t" not in line:
                raise CorpusFormatError(f"{path}:{lineno}: expected '<label><TAB><text>'")
            label, text = line.split("\t", 1)
            if not label.strip() or not text.strip():
                raise CorpusFormatError(f"{path}:{lineno}: empty label or text")
            rows.append((text, label.strip()))
    return rows


def load_corpus(path: str | Path) -> Corpus:
    root = Path(path)
    raw = {}
    for split in ("train", "dev", "test"):
        file = root / f"{split}.tsv"
        if not file.exists():
            raise FileNotFoundError(f"corpus split missing: {file}")
        raw[split] = _read_labeled(file)

    classes_file = root / "classes.txt"
    if classes_file.exists():
        class_names = [c for c in classes_file.read_text(encoding="utf-8").split("\n") if c]
    else:
        class_names = sorted({lab for _, lab in raw["train"]}, key=_label_sort_key)
    index = {c: i for i, c in enumerate(class_names)}

    splits = {}
    for split, rows in raw.items():
        out = []
        for lineno, (text, label) in enumerate(rows, start=1):
            if label not in index:
                raise CorpusFormatError(f"{root / f'{split}.tsv'}:{lineno}: unknown class label {label!r}")
            out.append((text, index[label]))
        splits[split] = out

    unlabeled_file = root / "unlabeled.txt"
    if unlabeled_file.exists():
        unlabeled = [t for t in unlabeled_file.read_text(encoding="utf-8").split("\n") if t.strip()]
    else:
        warnings.warn(f"{unlabeled_file} not found; continuing with no unlabeled data", stacklevel=2)
        unlabeled = []
    return Corpus(**splits, unlabeled=unlabeled, class_names=class_names)


# ------------------------------------------------------------------ synthetic

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic sentiment-like corpus.

    Each class owns ``lexicon_size`` cue n-grams whose spans cycle through
    ``1..max_span``. Unigram cues are reserved words that never appear as
    filler; longer cues are built from ordinary filler words, so only their
    order is discriminative. ``cue_stride > 0`` switches to dense placement:
    one cue every ``cue_stride`` tokens.
    """

    vocab_size: int = 100
    num_classes: int = 2
    lexicon_size: int = 8
    max_span: int = 4
    noise: float = 0.1
    n_train: int = 200
    n_dev: int = 200
    n_test: int = 1000
    n_unlabeled: int = 10000
    min_len: int = 10
    max_len: int = 40
    min_cues: int = 1
    max_cues: int = 3
    cue_stride: int = 0
    seed: int = 0


@dataclass
class Lexicon:
    cues: list[list[tuple[str, ...]]]  # per class
    filler: list[str]

    def counts(self, tokens: Sequence[str]) -> list[int]:
        out = []
        for class_cues in self.cues:
            n = 0
            for cue in class_cues:
                span = len(cue)
                n += sum(1 for k in range(len(tokens) - span + 1) if tuple(tokens[k:k + span]) == cue)
            out.append(n)
        return out

    def rule(self, text: str | Sequence[str]) -> int | None:
        """The generator's own labelling rule: the class with the most cue hits."""
        tokens = tokenize(text) if isinstance(text, str) else list(text)
        counts = self.counts(tokens)
        best = max(counts)
        if best == 0 or counts.count(best) > 1:
            return None
        return counts.index(best)


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    syllables = [c + v for c in _CONSONANTS for v in _VOWELS]
    words = [a + b for a in syllables for b in syllables]
    if n > len(words):
        raise ValueError(f"vocab_size {n} exceeds the {len(words)} available synthetic words")
    return [words[i] for i in rng.choice(len(words), size=n, replace=False)]


def _make_lexicon(spec: SynthSpec, rng: np.random.Generator) -> Lexicon:
    spans = [1 + k % spec.max_span for k in range(spec.lexicon_size)]
    n_reserved = spec.num_classes * spans.count(1)
    words = _make_words(spec.vocab_size, rng)
    reserved, filler = words[:n_reserved], words[n_reserved:]
    if len(filler) < 2:
        raise ValueError("vocab_size too small for the requested lexicon")
    seen: set[tuple[str, ...]] = set()
    cues: list[list[tuple[str, ...]]] = []
    reserved_iter = iter(reserved)
    for _ in range(spec.num_classes):
        class_cues = []
        for span in spans:
            if span == 1:
                cue = (next(reserved_iter),)
            else:
                while True:
                    cue = tuple(filler[i] for i in rng.choice(len(filler), size=span, replace=False))
                    if cue not in seen:
                        break
            seen.add(cue)
            class_cues.append(cue)
        cues.append(class_cues)
    return Lexicon(cues=cues, filler=filler)


def _sample_sentence(spec: SynthSpec, lex: Lexicon, label: int, rng: np.random.Generator) -> list[str]:
    while True:
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        class_cues = lex.cues[label]
        if spec.cue_stride > 0:
            tokens = [lex.filler[i] for i in rng.integers(0, len(lex.filler), size=length)]
            offset = int(rng.integers(0, spec.cue_stride))
            pos = offset
            while pos < length:
                cue = class_cues[int(rng.integers(0, len(class_cues)))]
                if pos + len(cue) <= length:
                    tokens[pos:pos + len(cue)] = cue
                pos += max(spec.cue_stride, len(cue))
        else:
            n_cues = int(rng.integers(spec.min_cues, spec.max_cues + 1))
            chosen = [class_cues[int(rng.integers(0, len(class_cues)))] for _ in range(n_cues)]
            n_filler = length - sum(len(c) for c in chosen)
            if n_filler < 0:
                continue
            filler = [lex.filler[i] for i in rng.integers(0, len(lex.filler), size=n_filler)]
            # insertion points between filler tokens keep cues from overlapping
            slots = np.sort(rng.integers(0, n_filler + 1, size=n_cues))
            tokens, prev = [], 0
            for slot, cue in zip(slots, chosen):
                tokens.extend(filler[prev:slot])
                tokens.extend(cue)
                prev = slot
            tokens.extend(filler[prev:])
        if lex.rule(tokens) == label:
            return tokens


def generate_synthetic(spec: SynthSpec) -> Corpus:
    """Draw a labelled/unlabelled corpus whose labels follow cue n-grams.

    Labels of the labelled splits are flipped to a uniformly chosen other
    class with probability ``spec.noise``; :meth:`Lexicon.rule` recovers the
    clean label.
    """
    if not 0.0 <= spec.noise < 0.5:
        raise ValueError("noise must lie in [0, 0.5)")
    rng = np.random.default_rng(spec.seed)
    lex = _make_lexicon(spec, rng)

    def labeled(n: int) -> list[tuple[str, int]]:
        out = []
        for _ in range(n):
            y = int(rng.integers(0, spec.num_classes))
            text = " ".join(_sample_sentence(spec, lex, y, rng))
            if rng.random() < spec.noise:
                y = int((y + rng.integers(1, spec.num_classes)) % spec.num_classes)
            out.append((text, y))
        return out

    train, dev, test = labeled(spec.n_train), labeled(spec.n_dev), labeled(spec.n_test)
    unlabeled = [" ".join(_sample_sentence(spec, lex, int(rng.integers(0, spec.num_classes)), rng))
                 for _ in range(spec.n_unlabeled)]
    names = [str(c) for c in range(spec.num_classes)]
    return Corpus(train=train, dev=dev, test=test, unlabeled=unlabeled, class_names=names, lexicon=lex)


# ------------------------------------------------------------------ encoding

@dataclass
class EncodedSplit:
    """Both token streams of one split. ``labels`` is None for unlabeled data."""

    word_ids: list[np.ndarray]
    bpe_ids: list[np.ndarray]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.word_ids)

    def subset(self, indices: Sequence[int]) -> "EncodedSplit":
        idx = list(indices)
        labels = None if self.labels is None else self.labels[idx]
        return EncodedSplit([self.word_ids[i] for i in idx], [self.bpe_ids[i] for i in idx], labels)

    @property
    def num_word_tokens(self) -> int:
        return int(sum(len(w) for w in self.word_ids))

    @property
    def num_bpe_tokens(self) -> int:
        return int(sum(len(b) for b in self.bpe_ids))


@dataclass
class PreparedData:
    word_vocab: WordVocabulary
    bpe_vocab: BpeVocabulary
    train: EncodedSplit
    dev: EncodedSplit
    test: EncodedSplit
    unlabeled: EncodedSplit
    num_classes: int
    splits: dict[str, EncodedSplit] = field(init=False, repr=False)

    def __post_init__(self):
        self.splits = {"train": self.train, "dev": self.dev, "test": self.test, "unlabeled": self.unlabeled}


def encode_split(texts: Sequence[str], labels, word_vocab: WordVocabulary, bpe_vocab: BpeVocabulary,
                 max_len: int) -> EncodedSplit:
    words, bpes = [], []
    for text in texts:
        w = word_vocab.encode(text, max_len=max_len)
        b = bpe_vocab.encode(" ".join(tokenize(text)), max_len=max_len)
        if len(w) == 0 or len(b) == 0:
            raise ValueError(f"empty sequence after tokenization: {text!r}")
        words.append(w)
        bpes.append(b)
    return EncodedSplit(words, bpes, None if labels is None else np.asarray(labels, dtype=np.int64))


def prepare(corpus: Corpus, min_count: int = 2, bpe_merges: int = 20000, max_len: int = 400,
            word_vocab: WordVocabulary | None = None, bpe_vocab: BpeVocabulary | None = None) -> PreparedData:
    """Build both vocabularies from train + unlabeled text and encode every split.

    The imitator stream sees the same lowercased, whitespace-normalised text
    as the expert stream.
    """
    vocab_texts = [t for t, _ in corpus.train] + list(corpus.unlabeled)
    if word_vocab is None:
        word_vocab = build_word_vocab(vocab_texts, min_count=min_count)
    if bpe_vocab is None:
        bpe_vocab = learn_bpe((" ".join(tokenize(t)) for t in vocab_texts), bpe_merges)

    def enc(rows, labeled=True):
        texts = [t for t, _ in rows] if labeled else rows
        labels = [y for _, y in rows] if labeled else None
        return encode_split(texts, labels, word_vocab, bpe_vocab, max_len)

    return PreparedData(word_vocab, bpe_vocab, enc(corpus.train), enc(corpus.dev), enc(corpus.test),
                        enc(corpus.unlabeled, labeled=False), corpus.num_classes)


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    indices: np.ndarray
    word_ids: np.ndarray      # (B, T) padded with 0, see word_lengths
    word_lengths: np.ndarray
    bpe_ids: np.ndarray       # (B, J) padded with the pad symbol id 0
    bpe_lengths: np.ndarray
    labels: np.ndarray | None

    def __len__(self) -> int:
        return len(self.indices)


def pad_sequences(seqs: Sequence[np.ndarray], max_len: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    seqs = [s if max_len is None else s[:max_len] for s in seqs]
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.zeros((len(seqs), int(lengths.max())), dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out, lengths


def make_batch(split: EncodedSplit, indices: np.ndarray, max_len: int | None = None) -> Batch:
    words, wlen = pad_sequences([split.word_ids[i] for i in indices], max_len)
    bpes, blen = pad_sequences([split.bpe_ids[i] for i in indices], max_len)
    labels = None if split.labels is None else split.labels[indices]
    return Batch(np.asarray(indices), words, wlen, bpes, blen, labels)


def batch_iter(split: EncodedSplit, batch_size: int, seed: int | np.random.Generator | None = None,
               max_len: int | None = None) -> Iterator[Batch]:
    """Yield batches; shuffled when ``seed`` is given, in order otherwise."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(split)
    if seed is None:
        order = np.arange(n)
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield make_batch(split, order[start:start + batch_size], max_len)
