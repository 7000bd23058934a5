"""Corpus files, vocabulary, mini-batches and the synthetic topic corpus.

Corpus format: UTF-8, one dialogue per line, utterances separated by the
token ``</u>``, whitespace tokenized::

    hello </u> hi there </u> how are you

After ingestion every utterance is wrapped in ``<s> ... </s>``.

Randomness: every stream is a Philox generator (numpy's counter-based bit
generator) keyed by ``SeedSequence(seed, spawn_key=(crc32(name), *ints))``.
Streams with different names or indices are independent, and a port that
implements Philox4x64 plus SeedSequence reproduces them exactly.
"""

from __future__ import annotations

import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, UNK, SOU, EOU = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")
SEPARATOR = "</u>"

Dialogue = list[list[int]]


def make_rng(seed: int, stream: str, *index: int) -> np.random.Generator:
    key = (zlib.crc32(stream.encode()),) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))


class CorpusError(ValueError):
    pass


class Vocabulary:
    """Token/id map; ids 0-3 are ``<pad> <unk> <s> </s>`` in that order."""

    def __init__(self, words: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(RESERVED)}
        for w in words:
            if w in self.stoi:
                raise ValueError(f"duplicate vocabulary entry {w!r}")
            self.stoi[w] = len(self.itos)
            self.itos.append(w)

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def words(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def id(self, token: str) -> int:
        i = self.stoi.get(token, UNK)
        return UNK if i < len(RESERVED) else i

    def token(self, i: int) -> str:
        return self.itos[i]

    def encode_utterance(self, tokens: Sequence[str]) -> list[int]:
        return [SOU] + [self.id(t) for t in tokens] + [EOU]

    def decode(self, ids: Sequence[int], strip: bool = True) -> list[str]:
        out = [self.itos[i] for i in ids]
        if strip:
            out = [w for w, i in zip(out, ids) if i not in (PAD, SOU, EOU)]
        return out

    @classmethod
    def build(cls, dialogues: Sequence[Sequence[Sequence[str]]], limit: int | None = None):
        counts = Counter(t for d in dialogues for u in d for t in u if t not in RESERVED)
        ranked = sorted(counts, key=lambda w: (-counts[w], w))
        if limit is not None:
            ranked = ranked[:limit]
        return cls(ranked)

    def save(self, path):
        Path(path).write_text("\n".join(self.words) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls([w for w in Path(path).read_text(encoding="utf-8").split("\n") if w])


def parse_line(line: str, lineno: int = 0) -> list[list[str]]:
    tokens = line.split()
    if not tokens:
        raise CorpusError(f"line {lineno}: empty dialogue")
    utts: list[list[str]] = [[]]
    for t in tokens:
        if t == SEPARATOR:
            utts.append([])
        else:
            utts[-1].append(t)
    if any(not u for u in utts):
        raise CorpusError(f"line {lineno}: empty utterance")
    return utts


def format_dialogue(utts: Sequence[Sequence[str]]) -> str:
    return f" {SEPARATOR} ".join(" ".join(u) for u in utts)


def read_corpus_text(path) -> list[list[list[str]]]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorpusError(f"{path}: empty corpus file")
    return [parse_line(line, i + 1) for i, line in enumerate(lines)]


def write_corpus_text(path, dialogues: Sequence[Sequence[Sequence[str]]]):
    Path(path).write_text("".join(format_dialogue(d) + "\n" for d in dialogues),
                          encoding="utf-8")


def encode_corpus(raw: Sequence[Sequence[Sequence[str]]], vocab: Vocabulary) -> list[Dialogue]:
    return [[vocab.encode_utterance(u) for u in d] for d in raw]


def load_corpus(path, vocab_limit: int | None = None,
                vocab: Vocabulary | None = None) -> tuple[list[Dialogue], Vocabulary]:
    """Read a corpus file; builds the vocabulary unless one is supplied."""
    raw = read_corpus_text(path)
    if vocab is None:
        vocab = Vocabulary.build(raw, vocab_limit)
    return encode_corpus(raw, vocab), vocab


def serialize_corpus(dialogues: Sequence[Dialogue], vocab: Vocabulary) -> str:
    return "".join(format_dialogue([vocab.decode(u) for u in d]) + "\n" for d in dialogues)


# ------------------------------------------------------------------ batching

@dataclass(frozen=True)
class Segment:
    start: int
    stop: int
    carry: bool


@dataclass
class Batch:
    """Padded view of a group of dialogues.

    ``tokens[n]`` is a ``(B, L_n)`` int array holding utterance ``n`` of every
    dialogue (PAD where shorter or absent); ``present[n]`` marks dialogues that
    have an utterance ``n``.  ``segments`` cut the utterance axis for
    truncated back-propagation; ``carry`` means state flows in from the
    previous segment.
    """

    dialogues: list[Dialogue]
    tokens: list[np.ndarray]
    present: list[np.ndarray]
    segments: list[Segment] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.dialogues)

    @property
    def n_tokens(self) -> int:
        return int(sum((t != PAD).sum() for t in self.tokens))

    @classmethod
    def from_dialogues(cls, dialogues: Sequence[Dialogue], max_unroll: int | None = None):
        dialogues = list(dialogues)
        n_utts = max(len(d) for d in dialogues)
        tokens, present = [], []
        for n in range(n_utts):
            lens = [len(d[n]) if n < len(d) else 0 for d in dialogues]
            arr = np.full((len(dialogues), max(lens)), PAD, dtype=np.int64)
            for b, d in enumerate(dialogues):
                if n < len(d):
                    arr[b, :lens[b]] = d[n]
            tokens.append(arr)
            present.append(np.array([l > 0 for l in lens]))
        return cls(dialogues, tokens, present, split_segments([t.shape[1] for t in tokens], max_unroll))


def split_segments(lengths: Sequence[int], max_unroll: int | None) -> list[Segment]:
    """Group consecutive utterances so each group spans at most ``max_unroll`` tokens.

    Utterances are never split; one longer than ``max_unroll`` gets a
    segment to itself.
    """
    if not max_unroll:
        return [Segment(0, len(lengths), False)]
    segs, start, used = [], 0, 0
    for n, length in enumerate(lengths):
        if n > start and used + length > max_unroll:
            segs.append(Segment(start, n, start > 0))
            start, used = n, 0
        used += length
    segs.append(Segment(start, len(lengths), start > 0))
    return segs


def make_batches(corpus: Sequence[Dialogue], batch_size: int, max_unroll: int | None = 80,
                 seed: int = 0, epochs: int | None = 1) -> Iterator[Batch]:
    """Shuffled mini-batches; ``epochs=None`` streams forever."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    epoch = 0
    while epochs is None or epoch < epochs:
        order = make_rng(seed, "shuffle", epoch).permutation(len(corpus))
        for i in range(0, len(order), batch_size):
            yield Batch.from_dialogues([corpus[j] for j in order[i:i + batch_size]], max_unroll)
        epoch += 1


# --------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    """Dialogues whose utterances are drawn from a sticky Markov chain over topics.

    With probability ``stickiness`` the next utterance keeps the current
    topic, otherwise the topic is redrawn uniformly from all topics.
    """

    n_topics: int = 4
    words_per_topic: int = 6
    stickiness: float = 0.5
    min_len: int = 3
    max_len: int = 6
    min_turns: int = 3
    max_turns: int = 4
    n_dialogues: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.n_topics < 2:
            raise ValueError("need at least 2 topics")
        if not 0.0 <= self.stickiness <= 1.0:
            raise ValueError("stickiness must lie in [0, 1]")
        if not 1 <= self.min_len <= self.max_len or not 1 <= self.min_turns <= self.max_turns:
            raise ValueError("length and turn ranges must be nonempty")

    def topic_words(self, k: int) -> list[str]:
        return [f"t{k}w{j}" for j in range(self.words_per_topic)]


def word_topic(word: str) -> int:
    return int(word[1:word.index("w")])


def synthesize_corpus(spec: SyntheticSpec) -> tuple[list[list[list[str]]], list[list[int]]]:
    """Return raw dialogues and their per-utterance topic labels."""
    rng = make_rng(spec.seed, "synthetic")
    vocab = [spec.topic_words(k) for k in range(spec.n_topics)]
    dialogues, labels = [], []
    for _ in range(spec.n_dialogues):
        n_turns = int(rng.integers(spec.min_turns, spec.max_turns + 1))
        topic = int(rng.integers(spec.n_topics))
        utts, topics = [], []
        for t in range(n_turns):
            if t > 0 and rng.random() >= spec.stickiness:
                topic = int(rng.integers(spec.n_topics))
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            words = rng.integers(spec.words_per_topic, size=length)
            utts.append([vocab[topic][w] for w in words])
            topics.append(topic)
        dialogues.append(utts)
        labels.append(topics)
    return dialogues, labels


def write_synthetic(spec: SyntheticSpec, corpus_path, labels_path):
    dialogues, labels = synthesize_corpus(spec)
    write_corpus_text(corpus_path, dialogues)
    Path(labels_path).write_text("".join(" ".join(map(str, l)) + "\n" for l in labels),
                                 encoding="utf-8")
    return dialogues, labels
