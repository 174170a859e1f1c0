"""Text ingestion: tokenizer, vocabulary, embeddings, corpus files, batching."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import Document

log = logging.getLogger(__name__)

UNK = "<unk>"
SENTENCE_END = frozenset(".!?")
MAX_MALFORMED_FRACTION = 0.01

_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusError(ValueError):
    """A corpus or embedding file cannot be used."""


@dataclass
class Vocabulary:
    """Token -> id map with one embedding row per id; lookups never fail."""

    index: dict
    vectors: np.ndarray
    unk_id: int
    skipped: int = 0

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vectors)

    def lookup(self, token: str) -> int:
        return self.index.get(token, self.unk_id)

    def vector(self, token: str) -> np.ndarray:
        return self.vectors[self.lookup(token)]


def load_embeddings(path, d_emb: int) -> Vocabulary:
    """Read ``token v1 ... vd`` lines; the UNK row is the zero vector.

    Lines with the wrong number of fields are skipped; more than 1% of them
    is treated as a format error.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read embeddings {path}: {exc}") from exc
    tokens, rows, bad, total = [], [], 0, 0
    seen = set()
    for line in lines:
        if not line.strip():
            continue
        total += 1
        parts = line.rstrip().split(" ")
        if len(parts) != d_emb + 1:
            bad += 1
            continue
        try:
            vec = np.array([float(x) for x in parts[1:]])
        except ValueError:
            bad += 1
            continue
        if parts[0] in seen:
            continue
        seen.add(parts[0])
        tokens.append(parts[0])
        rows.append(vec)
    if total and bad / total > MAX_MALFORMED_FRACTION:
        raise CorpusError(f"{path}: {bad} of {total} lines malformed (expected {d_emb} floats)")
    if bad:
        log.warning("%s: skipped %d malformed lines", path, bad)
    index = {t: i for i, t in enumerate(tokens)}
    unk_id = len(tokens)
    vectors = np.vstack(rows + [np.zeros(d_emb)]) if rows else np.zeros((1, d_emb))
    return Vocabulary(index, vectors, unk_id, skipped=bad)


def save_embeddings(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for token, i in vocab.index.items():
            fh.write(token + " " + " ".join(repr(float(x)) for x in vocab.vectors[i]) + "\n")


def split_sentences_tokenize(text: str) -> list[list[str]]:
    """Lowercase, detach punctuation, split after every ``.``, ``!`` or ``?``."""
    tokens = _TOKEN.findall(text.lower())
    if not tokens:
        raise CorpusError("text has no tokens")
    sentences, current = [], []
    for tok in tokens:
        current.append(tok)
        if tok in SENTENCE_END:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


def encode(text: str, vocab: Vocabulary, label: int = 0) -> Document:
    sents = split_sentences_tokenize(text)
    return Document([vocab.vectors[[vocab.lookup(t) for t in s]] for s in sents], label)


@dataclass
class RawCorpus:
    """Texts with 1-based labels in ``[1, class_count]``."""

    records: list = field(default_factory=list)
    class_count: int = 0

    def __post_init__(self):
        if not self.class_count and self.records:
            self.class_count = max(r["label"] for r in self.records)
        for r in self.records:
            if not 1 <= r["label"] <= self.class_count:
                raise CorpusError(f"label {r['label']} outside 1..{self.class_count}")
            if not str(r["text"]).strip():
                raise CorpusError("empty text record")

    def documents(self, vocab: Vocabulary) -> list[Document]:
        return [encode(r["text"], vocab, r["label"] - 1) for r in self.records]


def read_jsonl(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: bad record ({exc})") from exc


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_text_corpus(path, class_count: int = 0) -> RawCorpus:
    records = read_jsonl(path)
    for r in records:
        if "text" not in r or "label" not in r:
            raise CorpusError(f"{path}: text records need 'text' and 'label'")
    return RawCorpus(records, class_count)


def batch_by_length(docs: Sequence[Document], batch_size: int,
                    rng: np.random.Generator | None = None) -> list[list[int]]:
    """Index batches of documents with similar token counts.

    Stable sort by length, cut into consecutive slices (the last one may be
    short), then shuffle the order of the slices when ``rng`` is given.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = sorted(range(len(docs)), key=lambda i: docs[i].n)
    batches = [order[i: i + batch_size] for i in range(0, len(order), batch_size)]
    if rng is not None:
        batches = [batches[i] for i in rng.permutation(len(batches))]
    return batches
