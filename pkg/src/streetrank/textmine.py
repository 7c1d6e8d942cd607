"""Free-text mining: tokenisation, gazetteer entities, keyword counts, LDA topics.

Entity extraction uses curated gazetteers (plain-text term lists shipped with
the package) instead of a pretrained NER model. Topic features come from a
from-scratch collapsed Gibbs LDA and are fitted per CV fold on training text
only.
"""
from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numba as nb
import numpy as np

from .rng import next_u64, to_unit

_TOKEN_RE = re.compile(r"[a-z0-9]+")

LDA_FORMAT_VERSION = 1


def _data_path(name: str):
    return resources.files("streetrank") / "data" / name


def load_terms(source: Path | str) -> list[str]:
    """Read a term list: one term per line, blank lines and # comments skipped."""
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read_text(encoding="utf-8")
    terms = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip().lower()
        if line:
            terms.append(line)
    return terms


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset[str]:
    return frozenset(load_terms(_data_path("stopwords.txt")))  # type: ignore[arg-type]


def tokenize(text: str, stopwords: frozenset[str] | None = None) -> list[str]:
    """Split on non-alphanumeric runs; drop tokens shorter than 2 and stop words."""
    if stopwords is None:
        stopwords = default_stopwords()
    return [tok for tok in _TOKEN_RE.findall(text.lower())
            if len(tok) >= 2 and tok not in stopwords]


@dataclass(frozen=True)
class TermSet:
    """Unigrams and bigrams matched longest-first with span consumption.

    A matched bigram consumes both tokens, so "train station" counts once and
    does not also fire the "station" unigram.
    """

    name: str
    unigrams: frozenset[str]
    bigrams: frozenset[tuple[str, str]]

    @classmethod
    def from_terms(cls, name: str, terms: Iterable[str]) -> "TermSet":
        unigrams, bigrams = set(), set()
        for term in terms:
            parts = term.split()
            if len(parts) == 1:
                unigrams.add(parts[0])
            elif len(parts) == 2:
                bigrams.add((parts[0], parts[1]))
            else:
                raise ValueError(f"{name}: terms longer than 2 words unsupported: {term!r}")
        if not unigrams and not bigrams:
            raise ValueError(f"{name}: empty term list")
        return cls(name, frozenset(unigrams), frozenset(bigrams))

    def match(self, tokens: Sequence[str]) -> Counter:
        """Count hits per canonical term (bigrams joined with a space)."""
        hits: Counter = Counter()
        i = 0
        n = len(tokens)
        while i < n:
            if i + 1 < n and (tokens[i], tokens[i + 1]) in self.bigrams:
                hits[f"{tokens[i]} {tokens[i + 1]}"] += 1
                i += 2
            elif tokens[i] in self.unigrams:
                hits[tokens[i]] += 1
                i += 1
            else:
                i += 1
        return hits

    def count(self, tokens: Sequence[str]) -> int:
        return sum(self.match(tokens).values())


def load_gazetteer(name: str, source: Path | str) -> TermSet:
    return TermSet.from_terms(name, load_terms(source))


@lru_cache(maxsize=None)
def default_gazetteers() -> tuple[TermSet, TermSet]:
    """(location, activity) gazetteers shipped with the package."""
    return (load_gazetteer("location", _data_path("gazetteer_locations.txt")),   # type: ignore[arg-type]
            load_gazetteer("activity", _data_path("gazetteer_activities.txt")))  # type: ignore[arg-type]


@lru_cache(maxsize=None)
def default_manual_terms() -> tuple[TermSet, TermSet]:
    """(sleep, beg) keyword lists shipped with the package."""
    return (TermSet.from_terms("sleep", load_terms(_data_path("sleep_words.txt"))),  # type: ignore[arg-type]
            TermSet.from_terms("beg", load_terms(_data_path("beg_words.txt"))))      # type: ignore[arg-type]


def extract_entities(tokens: Sequence[str],
                     gazetteers: tuple[TermSet, TermSet] | None = None
                     ) -> dict[str, Counter]:
    """Match location and activity gazetteer terms in a token stream."""
    if gazetteers is None:
        gazetteers = default_gazetteers()
    location, activity = gazetteers
    return {"location_entities": location.match(tokens),
            "activity_entities": activity.match(tokens)}


def manual_topic_counts(tokens: Sequence[str],
                        terms: tuple[TermSet, TermSet] | None = None
                        ) -> dict[str, int]:
    """Count sleep-related and begging-related keyword hits."""
    if terms is None:
        terms = default_manual_terms()
    sleep, beg = terms
    return {"sleep_count": sleep.count(tokens), "beg_count": beg.count(tokens)}


# ---------------------------------------------------------------------------
# LDA: collapsed Gibbs sampling over small entity-stream documents.


@dataclass(frozen=True)
class Vocabulary:
    """Dense token index plus document frequencies."""

    tokens: tuple[str, ...]
    doc_freq: np.ndarray

    @classmethod
    def from_documents(cls, documents: Sequence[Sequence[str]]) -> "Vocabulary":
        freq: Counter = Counter()
        for doc in documents:
            freq.update(set(doc))
        tokens = tuple(sorted(freq))
        return cls(tokens, np.array([freq[t] for t in tokens], dtype=np.int64))

    def index(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)


@nb.njit(cache=True)
def _gibbs_fit(word_ids, doc_ids, n_docs, n_vocab, k, alpha, beta, sweeps, seed):
    n_tokens = word_ids.shape[0]
    assign = np.empty(n_tokens, np.int32)
    n_dk = np.zeros((n_docs, k), np.int64)
    n_kv = np.zeros((k, n_vocab), np.int64)
    n_k = np.zeros(k, np.int64)
    state = np.uint64(seed)
    for i in range(n_tokens):
        state, word = next_u64(state)
        topic = np.int32(word % np.uint64(k))
        assign[i] = topic
        n_dk[doc_ids[i], topic] += 1
        n_kv[topic, word_ids[i]] += 1
        n_k[topic] += 1
    cumulative = np.empty(k, np.float64)
    v_beta = n_vocab * beta
    for _ in range(sweeps):
        for i in range(n_tokens):
            d = doc_ids[i]
            v = word_ids[i]
            topic = assign[i]
            n_dk[d, topic] -= 1
            n_kv[topic, v] -= 1
            n_k[topic] -= 1
            total = 0.0
            for t in range(k):
                total += (n_dk[d, t] + alpha) * (n_kv[t, v] + beta) / (n_k[t] + v_beta)
                cumulative[t] = total
            state, word = next_u64(state)
            draw = to_unit(word) * total
            topic = 0
            while cumulative[topic] < draw and topic < k - 1:
                topic += 1
            assign[i] = topic
            n_dk[d, topic] += 1
            n_kv[topic, v] += 1
            n_k[topic] += 1
    return n_kv, n_k


@nb.njit(cache=True)
def _gibbs_infer(word_ids, phi, alpha, sweeps, seed):
    k = phi.shape[0]
    n_tokens = word_ids.shape[0]
    theta = np.empty(k, np.float64)
    if n_tokens == 0:
        for t in range(k):
            theta[t] = 1.0 / k
        return theta
    assign = np.empty(n_tokens, np.int32)
    m_k = np.zeros(k, np.int64)
    state = np.uint64(seed)
    for i in range(n_tokens):
        state, word = next_u64(state)
        topic = np.int32(word % np.uint64(k))
        assign[i] = topic
        m_k[topic] += 1
    cumulative = np.empty(k, np.float64)
    for _ in range(sweeps):
        for i in range(n_tokens):
            v = word_ids[i]
            topic = assign[i]
            m_k[topic] -= 1
            total = 0.0
            for t in range(k):
                total += (m_k[t] + alpha) * phi[t, v]
                cumulative[t] = total
            state, word = next_u64(state)
            draw = to_unit(word) * total
            topic = 0
            while cumulative[topic] < draw and topic < k - 1:
                topic += 1
            assign[i] = topic
            m_k[topic] += 1
    denom = n_tokens + k * alpha
    for t in range(k):
        theta[t] = (m_k[t] + alpha) / denom
    return theta


@dataclass(frozen=True)
class LdaModel:
    """Fitted topic model: φ rows are per-topic word distributions."""

    phi: np.ndarray
    vocabulary: Vocabulary
    alpha: float
    beta: float
    sweeps: int
    seed: int

    @property
    def k(self) -> int:
        return self.phi.shape[0]

    def save(self, path: Path | str) -> None:
        np.savez(path,
                 version=np.int64(LDA_FORMAT_VERSION),
                 phi=self.phi,
                 tokens=np.array(self.vocabulary.tokens, dtype=np.str_),
                 doc_freq=self.vocabulary.doc_freq,
                 params=np.array([self.alpha, self.beta, self.sweeps, self.seed]))

    @classmethod
    def load(cls, path: Path | str) -> "LdaModel":
        blob = np.load(path, allow_pickle=False)
        version = int(blob["version"])
        if version != LDA_FORMAT_VERSION:
            raise ValueError(f"unsupported topic-model format version {version}")
        alpha, beta, sweeps, seed = blob["params"]
        vocab = Vocabulary(tuple(str(t) for t in blob["tokens"]), blob["doc_freq"])
        return cls(blob["phi"], vocab, float(alpha), float(beta), int(sweeps), int(seed))


def lda_fit(documents: Sequence[Sequence[str]],
            k: int = 10,
            alpha: float | None = None,
            beta: float = 0.01,
            sweeps: int = 1000,
            seed: int = 0) -> LdaModel:
    """Fit a K-topic model by collapsed Gibbs sampling. Deterministic per seed.

    Empty documents are ignored; at least ``k`` non-empty documents are
    required. Call only with training-split text.
    """
    if alpha is None:
        alpha = 50.0 / k
    docs = [doc for doc in documents if len(doc) > 0]
    if len(docs) < k:
        raise ValueError(f"need at least {k} non-empty documents, got {len(docs)}")
    vocab = Vocabulary.from_documents(docs)
    if len(vocab) == 0:
        raise ValueError("vocabulary empty after filtering")
    index = {tok: i for i, tok in enumerate(vocab.tokens)}
    word_ids, doc_ids = [], []
    for d, doc in enumerate(docs):
        for tok in doc:
            word_ids.append(index[tok])
            doc_ids.append(d)
    n_kv, n_k = _gibbs_fit(np.array(word_ids, np.int32), np.array(doc_ids, np.int32),
                           len(docs), len(vocab), k, alpha, beta, sweeps, np.uint64(seed))
    phi = (n_kv + beta) / (n_k + len(vocab) * beta)[:, None]
    return LdaModel(phi, vocab, alpha, beta, sweeps, seed)


def lda_infer(model: LdaModel,
              document: Sequence[str],
              sweeps: int = 100,
              seed: int = 0) -> np.ndarray:
    """Topic proportions for one document under frozen φ.

    Out-of-vocabulary tokens are dropped; a document with no known tokens
    gets the symmetric prior (uniform proportions).
    """
    index = {tok: i for i, tok in enumerate(model.vocabulary.tokens)}
    ids = np.array([index[tok] for tok in document if tok in index], np.int32)
    return _gibbs_infer(ids, model.phi, model.alpha, sweeps, np.uint64(seed))


def lda_infer_many(model: LdaModel,
                   documents: Sequence[Sequence[str]],
                   sweeps: int = 100,
                   seed: int = 0) -> np.ndarray:
    """Row-stacked topic proportions for a batch of documents."""
    out = np.empty((len(documents), model.k), np.float64)
    index = {tok: i for i, tok in enumerate(model.vocabulary.tokens)}
    for row, doc in enumerate(documents):
        ids = np.array([index[tok] for tok in doc if tok in index], np.int32)
        out[row] = _gibbs_infer(ids, model.phi, model.alpha, sweeps,
                                np.uint64(seed) + np.uint64(row))
    return out
