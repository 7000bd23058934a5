"""Embedding metrics, response statistics, preference intervals and TF-IDF retrieval.

Embedding metrics skip out-of-vocabulary words; a text with no known word
has no score (``None``), which aggregates ignore and count separately.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from statistics import NormalDist
from typing import Iterable, Sequence

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer

from .tensor import ContractError

Text = Sequence[str]


class EmbeddingTable:
    def __init__(self, vectors: dict[str, np.ndarray]):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"embedding vectors disagree on dimension: {sorted(dims)}")
        self.vectors = {w: np.asarray(v, dtype=np.float64) for w, v in vectors.items()}
        self.dim = dims.pop() if dims else 0

    def __contains__(self, word):
        return word in self.vectors

    def __len__(self):
        return len(self.vectors)

    def lookup(self, text: Text) -> np.ndarray:
        """Vectors of the in-vocabulary words of ``text``, one row each."""
        known = [self.vectors[w] for w in text if w in self.vectors]
        return np.array(known).reshape(len(known), self.dim)

    def oov_rate(self, texts: Iterable[Text]) -> float:
        words = [w for t in texts for w in t]
        return sum(w not in self.vectors for w in words) / len(words) if words else 0.0

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        """word2vec text format: header ``<count> <dim>`` then ``word v1 .. v_dim``."""
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().split()
            if len(header) != 2:
                raise ValueError(f"{path}: first line must be '<count> <dim>'")
            count, dim = int(header[0]), int(header[1])
            vectors = {}
            for lineno, line in enumerate(fh, start=2):
                parts = line.rstrip("\n").split(" ")
                if not line.strip():
                    continue
                if len(parts) != dim + 1:
                    raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
                vectors[parts[0]] = np.array([float(x) for x in parts[1:]])
        if len(vectors) != count:
            raise ValueError(f"{path}: header promises {count} words, found {len(vectors)}")
        table = cls(vectors)
        table.dim = dim
        return table

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{len(self.vectors)} {self.dim}\n")
            for w, v in self.vectors.items():
                fh.write(w + " " + " ".join(repr(float(x)) for x in v) + "\n")


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def embedding_average(response: Text, reference: Text, table: EmbeddingTable) -> float | None:
    r, g = table.lookup(response), table.lookup(reference)
    if not len(r) or not len(g):
        return None
    return _cos(r.mean(axis=0), g.mean(axis=0))


def extrema_vector(vectors: np.ndarray) -> np.ndarray:
    """Per dimension, the entry of largest magnitude with its sign (ties favour +)."""
    hi, lo = vectors.max(axis=0), vectors.min(axis=0)
    return np.where(hi >= np.abs(lo), hi, lo)


def embedding_extrema(response: Text, reference: Text, table: EmbeddingTable) -> float | None:
    r, g = table.lookup(response), table.lookup(reference)
    if not len(r) or not len(g):
        return None
    return _cos(extrema_vector(r), extrema_vector(g))


def greedy_direction(response: Text, reference: Text, table: EmbeddingTable) -> float | None:
    """Mean over response words of their best cosine match among reference words."""
    r, g = table.lookup(response), table.lookup(reference)
    if not len(r) or not len(g):
        return None
    rn = np.linalg.norm(r, axis=1, keepdims=True)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    sims = (r / np.where(rn == 0, 1, rn)) @ (g / np.where(gn == 0, 1, gn)).T
    return float(sims.max(axis=1).mean())


def embedding_greedy(response: Text, reference: Text, table: EmbeddingTable,
                     both: bool = False):
    """Average of the two greedy directions; ``both=True`` also returns each direction."""
    fwd = greedy_direction(response, reference, table)
    bwd = greedy_direction(reference, response, table)
    score = None if fwd is None else (fwd + bwd) / 2.0
    return (score, fwd, bwd) if both else score


# ------------------------------------------------------------ response stats

class UnigramModel:
    """Maximum-likelihood unigram distribution of a training corpus."""

    def __init__(self, probs: dict[str, float], unk: str | None = "<unk>"):
        self.probs = probs
        self.unk = unk

    @classmethod
    def from_texts(cls, texts: Iterable[Text], unk: str | None = "<unk>") -> "UnigramModel":
        counts = Counter(w for t in texts for w in t)
        total = sum(counts.values())
        if total == 0:
            raise ContractError("cannot fit a unigram model to an empty corpus")
        return cls({w: c / total for w, c in counts.items()}, unk)

    def prob(self, word: str) -> float:
        p = self.probs.get(word)
        if p is None and self.unk is not None:
            p = self.probs.get(self.unk)
        if not p:
            raise ContractError(f"token {word!r} has zero probability under the unigram model")
        return p


@dataclass
class ResponseStats:
    length: float
    word_entropy: float
    utterance_entropy: float


def response_stats(responses: Sequence[Text], u: UnigramModel) -> ResponseStats:
    """Mean |U|, bits per word H_w and bits per utterance H_U over ``responses``.

    Empty responses count towards |U| but have no defined H_w; they are left
    out of the H_w mean.
    """
    if not responses:
        raise ContractError("response_stats needs at least one response")
    lens, hw, hu = [], [], []
    for r in responses:
        bits = -sum(math.log2(u.prob(w)) for w in r)
        lens.append(len(r))
        hu.append(bits)
        if r:
            hw.append(bits / len(r))
    return ResponseStats(float(np.mean(lens)), float(np.mean(hw)) if hw else 0.0, float(np.mean(hu)))


# ------------------------------------------------------- preference interval

@dataclass
class PreferenceCounts:
    wins: int
    losses: int
    ties: int

    @property
    def total(self) -> int:
        return self.wins + self.losses + self.ties


def preference_ci(c: PreferenceCounts, level: float = 0.90, z: float | None = None):
    """Win/loss/tie percentages, each with a normal-approximation margin."""
    n = c.total
    if n <= 0:
        raise ContractError("preference_ci needs at least one judgement")
    if z is None:
        z = NormalDist().inv_cdf(0.5 + level / 2.0)
    out = []
    for k in (c.wins, c.losses, c.ties):
        p = k / n
        out.append((100.0 * p, 100.0 * z * math.sqrt(p * (1.0 - p) / n)))
    return tuple(out)


# ------------------------------------------------------------------ TF-IDF

class TfidfRetriever:
    """Nearest pool context by TF-IDF cosine; returns the paired response.

    Raw term counts times smoothed idf ``log((1+N)/(1+df)) + 1``, rows L2
    normalized, whitespace tokens kept verbatim.
    """

    def __init__(self, pool: Sequence[tuple[str, str]]):
        if not pool:
            raise ContractError("TF-IDF retrieval needs a nonempty pool")
        self.pool = list(pool)
        self.vectorizer = TfidfVectorizer(tokenizer=str.split, token_pattern=None,
                                          lowercase=False, smooth_idf=True, sublinear_tf=False)
        self.matrix = self.vectorizer.fit_transform([c for c, _ in self.pool])

    def scores(self, context: str) -> np.ndarray:
        q = self.vectorizer.transform([context])
        return (self.matrix @ q.T).toarray().ravel()

    def retrieve(self, context: str) -> tuple[str, bool]:
        """Best response and a flag that is True when no query term was known."""
        s = self.scores(context)
        if not s.any():
            return self.pool[0][1], True
        return self.pool[int(np.argmax(s))][1], False


def tfidf_retrieve(context: str, candidate_pool: Sequence[tuple[str, str]]) -> tuple[str, bool]:
    return TfidfRetriever(candidate_pool).retrieve(context)


# ---------------------------------------------------------------- reporting

def metric_report(responses: Sequence[Text], references: Sequence[Text], table: EmbeddingTable,
                  metrics: Sequence[str] = ("avg", "greedy", "extrema")) -> tuple[list[dict], dict]:
    """Per-response metric rows plus an aggregate row (means over defined values)."""
    if len(responses) != len(references):
        raise ValueError(f"{len(responses)} responses vs {len(references)} references")
    fns = {"avg": embedding_average, "extrema": embedding_extrema}
    rows = []
    for i, (r, g) in enumerate(zip(responses, references)):
        row = {"index": i}
        for name in metrics:
            if name == "greedy":
                row["greedy"], row["greedy_r2g"], row["greedy_g2r"] = embedding_greedy(r, g, table, both=True)
            elif name in fns:
                row[name] = fns[name](r, g, table)
        rows.append(row)
    agg = {"index": "mean"}
    keys = [k for k in rows[0] if k != "index"] if rows else []
    for k in keys:
        vals = [row[k] for row in rows if row[k] is not None]
        agg[k] = float(np.mean(vals)) if vals else None
        agg[f"{k}_missing"] = len(rows) - len(vals)
    agg["oov_rate"] = table.oov_rate(list(responses) + list(references))
    return rows, agg


def write_report(path, rows: list[dict], agg: dict):
    keys = [k for k in rows[0] if k != "index"] if rows else []
    fmt = lambda v: "NA" if v is None else f"{v:.6f}"
    lines = ["\t".join(["index"] + keys)]
    lines += ["\t".join([str(r["index"])] + [fmt(r[k]) for k in keys]) for r in rows]
    lines.append("\t".join(["mean"] + [fmt(agg[k]) for k in keys]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
