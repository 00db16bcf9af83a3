"""Okapi BM25 over proposition texts."""

import math
import re
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

_TOKEN_RE = re.compile(r"[^\W_]+")

K1 = 1.2
B = 0.75


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a letter or digit."""
    return _TOKEN_RE.findall(text.lower())


def query_terms(keywords: Iterable[str]) -> list[str]:
    """Distinct tokens of a keyword bag, sorted; repeats count once."""
    return sorted({token for keyword in keywords for token in tokenize(keyword)})


@dataclass
class BM25Index:
    """Incrementally built BM25 statistics with an in-memory inverted index."""

    k1: float = K1
    b: float = B
    doc_freq: dict[str, int] = field(default_factory=dict)
    term_counts: list[dict[str, int]] = field(default_factory=list)
    lengths: list[int] = field(default_factory=list)
    _postings: dict[str, list[int]] = field(default_factory=dict, compare=False, repr=False)

    @property
    def n_docs(self) -> int:
        return len(self.lengths)

    @property
    def avg_length(self) -> float:
        return sum(self.lengths) / self.n_docs if self.n_docs else 0.0

    def add_document(self, text: str) -> int:
        """Index a document and return its position."""
        tokens = tokenize(text)
        counts = dict(sorted(Counter(tokens).items()))
        doc = self.n_docs
        self.term_counts.append(counts)
        self.lengths.append(len(tokens))
        for term in counts:
            self.doc_freq[term] = self.doc_freq.get(term, 0) + 1
            self._postings.setdefault(term, []).append(doc)
        return doc

    def idf(self, term: str) -> float:
        df = self.doc_freq.get(term, 0)
        return math.log(1 + (self.n_docs - df + 0.5) / (df + 0.5))

    def _term_score(self, term: str, doc: int) -> float:
        tf = self.term_counts[doc].get(term, 0)
        if tf == 0:
            return 0.0
        norm = self.k1 * (1 - self.b + self.b * self.lengths[doc] / self.avg_length)
        return self.idf(term) * tf * (self.k1 + 1) / (tf + norm)

    def score(self, keywords: Sequence[str], doc: int) -> float:
        """BM25 of one document for a keyword bag.

        Raises:
            KeyError: If doc is not an indexed position
        """
        if not 0 <= doc < self.n_docs:
            raise KeyError(f"unknown document {doc}")
        return sum(self._term_score(term, doc) for term in query_terms(keywords))

    def score_all(self, keywords: Sequence[str]) -> np.ndarray:
        """BM25 of every document, as a float64 vector aligned with positions."""
        scores = np.zeros(self.n_docs, dtype=np.float64)
        for term in query_terms(keywords):
            for doc in self._postings.get(term, ()):
                scores[doc] += self._term_score(term, doc)
        return scores

    def to_json(self) -> dict[str, Any]:
        return {
            "avg_length": self.avg_length,
            "b": self.b,
            "doc_freq": dict(sorted(self.doc_freq.items())),
            "k1": self.k1,
            "lengths": self.lengths,
            "n_docs": self.n_docs,
            "term_counts": self.term_counts,
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> "BM25Index":
        """Rebuild from persisted statistics, checking internal consistency.

        Raises:
            ValueError: If the statistics contradict each other
        """
        index = cls(
            k1=float(data["k1"]),
            b=float(data["b"]),
            doc_freq={str(k): int(v) for k, v in data["doc_freq"].items()},
            term_counts=[{str(k): int(v) for k, v in counts.items()} for counts in data["term_counts"]],
            lengths=[int(n) for n in data["lengths"]],
        )
        if index.n_docs != int(data["n_docs"]) or len(index.term_counts) != index.n_docs:
            raise ValueError("bm25 document counts disagree")
        if not math.isclose(index.avg_length, float(data["avg_length"]), rel_tol=0, abs_tol=1e-12):
            raise ValueError("bm25 average length disagrees with lengths")
        for doc, counts in enumerate(index.term_counts):
            for term in counts:
                index._postings.setdefault(term, []).append(doc)
        if {t: len(docs) for t, docs in index._postings.items()} != index.doc_freq:
            raise ValueError("bm25 document frequencies disagree with term counts")
        return index
