"""Synthetic documents with known phrase boundaries.

Every document has two sentences of five 50-dim token vectors.  The last
token of each sentence is one shared end-of-sentence vector and its
indicator is 1.  The other indicators are either independent fair coins
(``indicator_mode="independent"``) or read off the token itself,
``z_t = 1[a . x_t > 0]`` for a fixed random direction ``a``
(``indicator_mode="cued"``).  Labels come from a frozen teacher network run
on the true indicators.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import Document, ModelParams, Plan, evaluate, impute, indicator_probs_batch

log = logging.getLogger(__name__)

SENTENCES = 2
TOKENS = 5
DIM = 50
N_CLASSES = 5
MIN_CLASS_SHARE = 0.02
MAX_REDRAWS = 10
MODES = ("independent", "cued")

_TRAIN, _TEST, _EOS, _CUE = 0, 1, 2, 3


@dataclass
class SyntheticCorpus:
    docs: list
    true_z: list | None
    teacher_seed: int
    data_seed: int
    indicator_mode: str = "independent"
    doc_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.true_z is not None and len(self.docs) != len(self.true_z):
            raise ValueError("one true assignment per document is required")
        if not self.doc_ids:
            self.doc_ids = list(range(len(self.docs)))

    def __len__(self) -> int:
        return len(self.docs)

    @property
    def labels(self) -> np.ndarray:
        """1-based class labels."""
        return np.array([d.label + 1 for d in self.docs])


def make_teacher(teacher_seed: int, d_h: int = DIM) -> ModelParams:
    return ModelParams.init(np.random.default_rng(teacher_seed), d_emb=DIM, d_h=d_h, d_a=d_h,
                            n_classes=N_CLASSES)


def teacher_labels(teacher: ModelParams, docs: Sequence[Document], true_z: Sequence[np.ndarray],
                   chunk: int = 4096) -> np.ndarray:
    """Teacher argmax classes (1-based) under the true indicators."""
    out = []
    for a in range(0, len(docs), chunk):
        plan = Plan(docs[a: a + chunk], [np.asarray(z)[None, :] for z in true_z[a: a + chunk]])
        with ad.no_grad():
            lp = evaluate(teacher, plan).log_probs.value
        out.extend(int(np.argmax(lp[plan.config_combo[j][0]])) + 1 for j in range(len(plan.docs)))
    return np.array(out, dtype=np.int64)


def teacher_label(doc: Document, true_z, teacher: ModelParams) -> int:
    return int(teacher_labels(teacher, [doc], [true_z])[0])


def _shared_vectors(data_seed: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    eos = np.random.default_rng([data_seed, _EOS]).standard_normal(DIM)
    cue = np.random.default_rng([data_seed, _CUE]).standard_normal(DIM)
    if mode == "cued" and eos @ cue <= 0:
        # keep the end-of-sentence token consistent with its forced bit
        eos = -eos
    return eos, cue


def _draw_doc(data_seed: int, split: int, i: int, eos, cue, mode: str) -> tuple[list, np.ndarray]:
    rng = np.random.default_rng([data_seed, split, i])
    sents, z = [], []
    for _ in range(SENTENCES):
        x = rng.standard_normal((TOKENS, DIM))
        x[-1] = eos
        if mode == "cued":
            bits = (x[:-1] @ cue > 0).astype(np.int8)
        else:
            bits = rng.integers(0, 2, TOKENS - 1).astype(np.int8)
        sents.append(x)
        z.extend(list(bits) + [1])
    return sents, np.array(z, dtype=np.int8)


def _draw_split(n: int, data_seed: int, split: int, mode: str):
    eos, cue = _shared_vectors(data_seed, mode)
    sents, zs = [], []
    for i in range(n):
        s, z = _draw_doc(data_seed, split, i, eos, cue, mode)
        sents.append(s)
        zs.append(z)
    return sents, zs


def generate_corpus(n_train: int = 10000, n_test: int = 1000, data_seed: int = 0,
                    teacher_seed: int = 0, indicator_mode: str = "independent",
                    teacher_d_h: int = DIM) -> tuple[SyntheticCorpus, SyntheticCorpus]:
    """Train and test corpora from disjoint per-document seed streams.

    If the teacher leaves any class with under 2% of the training labels it
    is redrawn from ``teacher_seed + 1`` (at most ten times); the seed used
    is stored on the corpora.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError("document counts must be >= 1")
    if indicator_mode not in MODES:
        raise ValueError(f"indicator_mode must be one of {MODES}")
    tr_s, tr_z = _draw_split(n_train, data_seed, _TRAIN, indicator_mode)
    te_s, te_z = _draw_split(n_test, data_seed, _TEST, indicator_mode)
    tr_docs = [Document(s) for s in tr_s]
    te_docs = [Document(s) for s in te_s]
    seed = teacher_seed
    for attempt in range(MAX_REDRAWS + 1):
        teacher = make_teacher(seed, teacher_d_h)
        y = teacher_labels(teacher, tr_docs, tr_z)
        share = np.bincount(y, minlength=N_CLASSES + 1)[1:] / len(y)
        if share.min() >= MIN_CLASS_SHARE or attempt == MAX_REDRAWS:
            break
        log.info("teacher seed %d gives class shares %s; redrawing", seed, np.round(share, 3))
        seed += 1
    if share.min() < MIN_CLASS_SHARE:
        log.warning("teacher still degenerate after %d redraws: shares %s", MAX_REDRAWS, share)
    y_te = teacher_labels(teacher, te_docs, te_z)
    for d, label in zip(tr_docs, y):
        d.label = int(label) - 1
    for d, label in zip(te_docs, y_te):
        d.label = int(label) - 1
    return (SyntheticCorpus(tr_docs, tr_z, seed, data_seed, indicator_mode),
            SyntheticCorpus(te_docs, te_z, seed, data_seed, indicator_mode))


def recovery_counts(z_hat: Sequence[np.ndarray], true_z: Sequence[np.ndarray]) -> dict:
    """Correct and total counts over all positions and over sentence ends."""
    hit = tot = f_hit = f_tot = 0
    for zh, zt in zip(z_hat, true_z):
        zh, zt = np.asarray(zh), np.asarray(zt)
        ok = zh == zt
        hit += int(ok.sum())
        tot += len(zt)
        forced = np.zeros(len(zt), dtype=bool)
        forced[TOKENS - 1:: TOKENS] = True
        f_hit += int(ok[forced].sum())
        f_tot += int(forced.sum())
    return {"correct": hit, "total": tot, "forced_correct": f_hit, "forced_total": f_tot}


def recovery_accuracy(params: ModelParams, corpus: SyntheticCorpus, forced: bool = False) -> float:
    """Share of indicators whose imputed value matches the truth.

    With ``forced=True`` only the sentence-final positions are scored.
    """
    z_hat = [impute(p) for p in indicator_probs_batch(params, corpus.docs)]
    c = recovery_counts(z_hat, corpus.true_z)
    if forced:
        return c["forced_correct"] / c["forced_total"]
    return c["correct"] / c["total"]


def recovery_monitor(corpus: SyntheticCorpus, prefix: str = "") -> callable:
    """History hook adding recovery on ``corpus`` to every epoch record."""
    def monitor(params):
        z_hat = [impute(p) for p in indicator_probs_batch(params, corpus.docs)]
        c = recovery_counts(z_hat, corpus.true_z)
        return {f"{prefix}recovery": c["correct"] / c["total"],
                f"{prefix}forced_recovery": c["forced_correct"] / c["forced_total"]}
    return monitor


# ---------------------------------------------------------------------------
# files

def corpus_records(corpus: SyntheticCorpus) -> list[dict]:
    return [{"doc_id": i, "sentences": [s.tolist() for s in d.sentences],
             "true_z": [int(b) for b in z], "label": d.label + 1}
            for i, d, z in zip(corpus.doc_ids, corpus.docs, corpus.true_z)]


def write_corpus(path, corpus: SyntheticCorpus) -> None:
    # json writes the shortest repr that round-trips each float64 exactly
    with open(path, "w", encoding="utf-8") as fh:
        for r in corpus_records(corpus):
            fh.write(json.dumps(r) + "\n")


def read_corpus(path, teacher_seed: int = -1, data_seed: int = -1) -> SyntheticCorpus:
    docs, zs, ids = [], [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            r = json.loads(line)
            docs.append(Document([np.array(s, dtype=np.float64) for s in r["sentences"]], int(r["label"]) - 1))
            zs.append(np.array(r["true_z"], dtype=np.int8) if "true_z" in r else None)
            ids.append(r.get("doc_id", len(ids)))
    has_z = all(z is not None for z in zs)
    return SyntheticCorpus(docs, zs if has_z else None, teacher_seed, data_seed, doc_ids=ids)
