"""Bag-of-words corpora: loading, validation, splitting, fold-in halving.

A corpus is a sparse document-word count matrix stored as parallel entry
arrays (doc id, word id, count), sorted document-major with the original
file order preserved inside each document. All ids are 0-based internally;
the UCI interchange format is 1-based.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Iterator, Sequence

import numpy as np

__all__ = [
    "Corpus",
    "SplitCorpus",
    "FoldInSplit",
    "CorpusFormatError",
    "load_uci_bow",
    "dump_uci_bow",
    "split_corpus",
    "fold_in_split",
    "synthetic_corpus",
]


class CorpusFormatError(ValueError):
    """Raised when a docword/vocab stream violates the UCI bag-of-words format."""


@dataclass(eq=False)
class Corpus:
    """Immutable bag-of-words corpus.

    Entries are sorted by document (stable, so within-document order follows
    the input). `source_doc_ids[j]` tracks which document of a parent corpus
    document j came from; it is the identity mapping for freshly loaded
    corpora and lets splits stay aligned with external per-document files
    such as class labels.
    """

    num_docs: int
    vocab_size: int
    doc_ids: np.ndarray
    word_ids: np.ndarray
    counts: np.ndarray
    vocab: list[str] | None = None
    source_doc_ids: np.ndarray | None = None
    allow_empty_docs: bool = False
    total_tokens: int = field(init=False)

    def __post_init__(self):
        self.doc_ids = np.ascontiguousarray(self.doc_ids, dtype=np.int64)
        self.word_ids = np.ascontiguousarray(self.word_ids, dtype=np.int64)
        self.counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        order = np.argsort(self.doc_ids, kind="stable")
        self.doc_ids = self.doc_ids[order]
        self.word_ids = self.word_ids[order]
        self.counts = self.counts[order]
        if self.source_doc_ids is None:
            self.source_doc_ids = np.arange(self.num_docs, dtype=np.int64)
        else:
            self.source_doc_ids = np.asarray(self.source_doc_ids, dtype=np.int64)
        self.total_tokens = int(self.counts.sum())
        self._validate()
        for a in (self.doc_ids, self.word_ids, self.counts, self.source_doc_ids):
            a.setflags(write=False)

    def _validate(self):
        if self.num_docs < 1 or self.vocab_size < 1:
            raise CorpusFormatError("corpus must have at least one document and one word type")
        if not (len(self.doc_ids) == len(self.word_ids) == len(self.counts)):
            raise CorpusFormatError("entry arrays have mismatched lengths")
        if len(self.doc_ids) and (self.doc_ids.min() < 0 or self.doc_ids.max() >= self.num_docs):
            raise CorpusFormatError("doc id out of range")
        if len(self.word_ids) and (self.word_ids.min() < 0 or self.word_ids.max() >= self.vocab_size):
            raise CorpusFormatError("word id out of range")
        if len(self.counts) and self.counts.min() < 1:
            raise CorpusFormatError("entry count must be >= 1")
        pair_keys = self.doc_ids * self.vocab_size + self.word_ids
        if len(np.unique(pair_keys)) != len(pair_keys):
            raise CorpusFormatError("duplicate (doc, word) entry")
        if self.vocab is not None and len(self.vocab) != self.vocab_size:
            raise CorpusFormatError(
                f"vocabulary has {len(self.vocab)} entries, expected {self.vocab_size}"
            )
        if len(self.source_doc_ids) != self.num_docs:
            raise CorpusFormatError("source_doc_ids length must equal num_docs")
        if not self.allow_empty_docs:
            if len(np.unique(self.doc_ids)) != self.num_docs:
                raise CorpusFormatError("every document must have at least one token")

    @property
    def num_entries(self) -> int:
        return len(self.doc_ids)

    @property
    def entries(self) -> Iterator[tuple[int, int, int]]:
        """Yield (doc_id, word_id, count) triples in storage order."""
        for j, w, n in zip(self.doc_ids, self.word_ids, self.counts):
            yield int(j), int(w), int(n)

    def doc_lengths(self) -> np.ndarray:
        """Token count per document, shape (num_docs,)."""
        return np.bincount(self.doc_ids, weights=self.counts, minlength=self.num_docs).astype(
            np.int64
        )

    def tokens(self) -> tuple[np.ndarray, np.ndarray]:
        """Expand entries to one element per token.

        Returns (token_doc, token_word) in document-major order, within each
        document in entry order, with repeats of a word type consecutive.
        """
        token_doc = np.repeat(self.doc_ids, self.counts)
        token_word = np.repeat(self.word_ids, self.counts)
        return token_doc, token_word

    def subcorpus(self, docs: Sequence[int], allow_empty_docs: bool = False) -> "Corpus":
        """Corpus restricted to `docs`, re-indexed 0..len(docs)-1 in the given order."""
        docs = np.asarray(docs, dtype=np.int64)
        remap = np.full(self.num_docs, -1, dtype=np.int64)
        remap[docs] = np.arange(len(docs))
        keep = remap[self.doc_ids] >= 0
        return Corpus(
            num_docs=len(docs),
            vocab_size=self.vocab_size,
            doc_ids=remap[self.doc_ids[keep]],
            word_ids=self.word_ids[keep],
            counts=self.counts[keep],
            vocab=self.vocab,
            source_doc_ids=self.source_doc_ids[docs],
            allow_empty_docs=allow_empty_docs,
        )

    def same_shape_as(self, other: "Corpus") -> bool:
        return self.vocab_size == other.vocab_size and self.vocab == other.vocab


@dataclass(eq=False)
class SplitCorpus:
    train: Corpus
    validation: Corpus
    test: Corpus

    def __post_init__(self):
        if not (self.train.same_shape_as(self.validation) and self.train.same_shape_as(self.test)):
            raise ValueError("split parts must share vocab_size and vocabulary")


@dataclass(eq=False)
class FoldInSplit:
    """Per-document halving: observed trains theta, heldout scores perplexity.

    Both halves index the same documents; heldout documents that came from
    single-token originals are empty.
    """

    observed_half: Corpus
    heldout_half: Corpus

    def __post_init__(self):
        if self.observed_half.num_docs != self.heldout_half.num_docs:
            raise ValueError("fold-in halves must cover the same documents")


def _read_header_int(line: str, lineno: int, name: str) -> int:
    try:
        value = int(line.strip())
    except ValueError:
        raise CorpusFormatError(f"line {lineno}: malformed header, expected integer {name}")
    if value < 0:
        raise CorpusFormatError(f"line {lineno}: header {name} must be non-negative")
    return value


def _as_text_stream(source) -> IO[str]:
    if isinstance(source, (str, Path)):
        return open(source, "r")
    if isinstance(source, io.TextIOBase):
        return source
    return io.TextIOWrapper(source)


def load_uci_bow(docword_stream, vocab_stream=None) -> Corpus:
    """Parse a UCI bag-of-words docword stream (and optional vocab stream).

    Format: three header lines D, W, NNZ followed by NNZ lines of
    whitespace-separated `docID wordID count` with 1-based ids. Errors carry
    the offending line number.
    """
    stream = _as_text_stream(docword_stream)
    close = stream is not docword_stream
    try:
        lines = stream.read().splitlines()
    finally:
        if close:
            stream.close()
    if len(lines) < 3:
        raise CorpusFormatError("line 1: malformed header, need three header lines D, W, NNZ")
    num_docs = _read_header_int(lines[0], 1, "D")
    vocab_size = _read_header_int(lines[1], 2, "W")
    nnz = _read_header_int(lines[2], 3, "NNZ")

    doc_ids = np.empty(nnz, dtype=np.int64)
    word_ids = np.empty(nnz, dtype=np.int64)
    counts = np.empty(nnz, dtype=np.int64)
    n_seen = 0
    for offset, line in enumerate(lines[3:]):
        lineno = offset + 4
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CorpusFormatError(f"line {lineno}: expected 'docID wordID count' triple")
        try:
            j, w, n = (int(p) for p in parts)
        except ValueError:
            raise CorpusFormatError(f"line {lineno}: non-integer entry")
        if not (1 <= j <= num_docs):
            raise CorpusFormatError(f"line {lineno}: doc id {j} out of range [1, {num_docs}]")
        if not (1 <= w <= vocab_size):
            raise CorpusFormatError(f"line {lineno}: word id {w} out of range [1, {vocab_size}]")
        if n < 1:
            raise CorpusFormatError(f"line {lineno}: count {n} < 1")
        if n_seen >= nnz:
            raise CorpusFormatError(f"line {lineno}: entry count mismatch, header says NNZ={nnz}")
        doc_ids[n_seen] = j - 1
        word_ids[n_seen] = w - 1
        counts[n_seen] = n
        n_seen += 1
    if n_seen != nnz:
        raise CorpusFormatError(
            f"line {len(lines)}: entry count mismatch, header says NNZ={nnz} but found {n_seen}"
        )

    vocab = None
    if vocab_stream is not None:
        vstream = _as_text_stream(vocab_stream)
        vclose = vstream is not vocab_stream
        try:
            vocab = [line.strip() for line in vstream.read().splitlines() if line.strip()]
        finally:
            if vclose:
                vstream.close()

    return Corpus(
        num_docs=num_docs,
        vocab_size=vocab_size,
        doc_ids=doc_ids,
        word_ids=word_ids,
        counts=counts,
        vocab=vocab,
    )


def dump_uci_bow(corpus: Corpus, docword_stream, vocab_stream=None) -> None:
    """Write `corpus` in UCI bag-of-words format (1-based ids)."""
    stream = _as_text_stream(docword_stream)
    stream.write(f"{corpus.num_docs}\n{corpus.vocab_size}\n{corpus.num_entries}\n")
    for j, w, n in zip(corpus.doc_ids, corpus.word_ids, corpus.counts):
        stream.write(f"{j + 1} {w + 1} {n}\n")
    if vocab_stream is not None and corpus.vocab is not None:
        vstream = _as_text_stream(vocab_stream)
        for word in corpus.vocab:
            vstream.write(f"{word}\n")


def split_corpus(c: Corpus, test_docs: int, validation_docs: int, seed: int) -> SplitCorpus:
    """Partition documents into train/validation/test by a seeded shuffle.

    Document assignment is deterministic given the seed; each part is
    re-indexed with its documents in ascending original order.
    """
    if test_docs < 0 or validation_docs < 0:
        raise ValueError("split sizes must be non-negative")
    if test_docs + validation_docs >= c.num_docs:
        raise ValueError(
            f"requested test={test_docs} + validation={validation_docs} documents "
            f"exceed corpus size {c.num_docs} (train split would be empty)"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(c.num_docs)
    test = np.sort(perm[:test_docs])
    validation = np.sort(perm[test_docs : test_docs + validation_docs])
    train = np.sort(perm[test_docs + validation_docs :])
    return SplitCorpus(
        train=c.subcorpus(train),
        validation=c.subcorpus(validation),
        test=c.subcorpus(test),
    )


def fold_in_split(c: Corpus, seed: int) -> FoldInSplit:
    """Halve every document at token level.

    Tokens of each document are shuffled with the seed and the first
    ceil(N_j / 2) of them form the observed half; both halves are
    re-aggregated to counts. A single-token document keeps its token in the
    observed half and contributes nothing to the heldout half.
    """
    rng = np.random.default_rng(seed)
    token_doc, token_word = c.tokens()
    doc_starts = np.searchsorted(token_doc, np.arange(c.num_docs))
    doc_ends = np.searchsorted(token_doc, np.arange(c.num_docs), side="right")

    obs_docs, obs_words, obs_counts = [], [], []
    held_docs, held_words, held_counts = [], [], []
    for j in range(c.num_docs):
        words = token_word[doc_starts[j] : doc_ends[j]].copy()
        rng.shuffle(words)
        n_obs = (len(words) + 1) // 2
        for dest_docs, dest_words, dest_counts, part in (
            (obs_docs, obs_words, obs_counts, words[:n_obs]),
            (held_docs, held_words, held_counts, words[n_obs:]),
        ):
            if len(part) == 0:
                continue
            uniq, cnt = np.unique(part, return_counts=True)
            dest_docs.append(np.full(len(uniq), j, dtype=np.int64))
            dest_words.append(uniq)
            dest_counts.append(cnt)

    def build(docs, words, counts):
        if docs:
            d = np.concatenate(docs)
            w = np.concatenate(words)
            n = np.concatenate(counts)
        else:
            d = w = n = np.empty(0, dtype=np.int64)
        return Corpus(
            num_docs=c.num_docs,
            vocab_size=c.vocab_size,
            doc_ids=d,
            word_ids=w,
            counts=n,
            vocab=c.vocab,
            source_doc_ids=c.source_doc_ids,
            allow_empty_docs=True,
        )

    return FoldInSplit(
        observed_half=build(obs_docs, obs_words, obs_counts),
        heldout_half=build(held_docs, held_words, held_counts),
    )


def synthetic_corpus(
    num_docs: int,
    vocab_size: int,
    num_topics: int,
    alpha: float,
    eta: float,
    doc_length: int,
    seed: int,
    poisson_lengths: bool = True,
) -> Corpus:
    """Sample a corpus from the smoothed topic-mixture generative process.

    Word distributions are drawn per topic from a symmetric Dirichlet(eta),
    document mixtures from a symmetric Dirichlet(alpha); document lengths are
    Poisson(doc_length) clipped to at least one token, or exactly doc_length
    when poisson_lengths is False. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    phi = rng.dirichlet(np.full(vocab_size, eta), size=num_topics)  # K x W
    theta = rng.dirichlet(np.full(num_topics, alpha), size=num_docs)  # D x K
    if poisson_lengths:
        lengths = np.maximum(rng.poisson(doc_length, size=num_docs), 1)
    else:
        lengths = np.full(num_docs, doc_length, dtype=np.int64)

    doc_ids, word_ids, counts = [], [], []
    for j in range(num_docs):
        topic_counts = rng.multinomial(lengths[j], theta[j])
        word_counts = np.zeros(vocab_size, dtype=np.int64)
        for k in np.flatnonzero(topic_counts):
            word_counts += rng.multinomial(topic_counts[k], phi[k])
        nz = np.flatnonzero(word_counts)
        doc_ids.append(np.full(len(nz), j, dtype=np.int64))
        word_ids.append(nz)
        counts.append(word_counts[nz])
    return Corpus(
        num_docs=num_docs,
        vocab_size=vocab_size,
        doc_ids=np.concatenate(doc_ids),
        word_ids=np.concatenate(word_ids),
        counts=np.concatenate(counts),
    )
