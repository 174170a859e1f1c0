"""The EM-HRNN network: word LSTM, indicator head, three attention levels.

Documents are evaluated in batches.  A batch pairs every document with a set
of indicator configurations; the engine shares work across configurations
wherever the computation cannot differ:

* the word layer and the indicator head do not depend on ``z`` at all;
* a sentence's phrase segmentation depends only on the bits at its own
  non-final positions, so each distinct segmentation of each sentence is
  encoded once;
* the sentence BiLSTM and the classifier run once per distinct tuple of
  sentence segmentations in a document.

Positions are 0-based and segments are half-open ``(start, stop)`` ranges in
document token coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import (
    AttentionParams,
    LstmParams,
    attention_pool,
    attention_scores,
    lstm_encode,
    uniform_init,
)

log = logging.getLogger(__name__)

PI_CLAMP = 1e-12

LSTM_GROUPS = ("word_lstm", "phrase_lstm", "sent_fwd", "sent_bwd")
ATTN_GROUPS = ("attn_word", "attn_phrase", "attn_sent")
HEAD_NAMES = ("W_pi", "b_pi")


@dataclass
class ModelParams:
    word_lstm: LstmParams
    phrase_lstm: LstmParams
    sent_fwd: LstmParams
    sent_bwd: LstmParams
    attn_word: AttentionParams
    attn_phrase: AttentionParams
    attn_sent: AttentionParams
    W_pi: Tensor
    b_pi: Tensor
    W_c: Tensor
    b_c: Tensor

    def __post_init__(self):
        d_h = self.word_lstm.d_h
        checks = [
            (self.phrase_lstm.d_in, d_h, "phrase_lstm input"),
            (self.sent_fwd.d_in, self.phrase_lstm.d_h, "sent_fwd input"),
            (self.sent_bwd.d_in, self.phrase_lstm.d_h, "sent_bwd input"),
            (self.attn_word.W.shape[1], d_h, "attn_word width"),
            (self.attn_phrase.W.shape[1], self.phrase_lstm.d_h, "attn_phrase width"),
            (self.attn_sent.W.shape[1], self.sent_fwd.d_h + self.sent_bwd.d_h, "attn_sent width"),
            (self.W_pi.shape, (1, d_h), "W_pi"),
            (self.b_pi.shape, (1,), "b_pi"),
            (self.W_c.shape[1], self.sent_fwd.d_h + self.sent_bwd.d_h, "W_c width"),
            (self.b_c.shape, (self.W_c.shape[0],), "b_c"),
        ]
        for got, want, what in checks:
            if got != want:
                raise ShapeError(f"ModelParams: {what} is {got}, expected {want}")

    @classmethod
    def init(cls, rng, d_emb: int = 100, d_h: int = 50, d_a: int = 50,
             n_classes: int = 5) -> "ModelParams":
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(rng)
        return cls(
            word_lstm=LstmParams.init(rng, d_emb, d_h, "word_lstm."),
            phrase_lstm=LstmParams.init(rng, d_h, d_h, "phrase_lstm."),
            sent_fwd=LstmParams.init(rng, d_h, d_h, "sent_fwd."),
            sent_bwd=LstmParams.init(rng, d_h, d_h, "sent_bwd."),
            attn_word=AttentionParams.init(rng, d_h, d_a, "attn_word."),
            attn_phrase=AttentionParams.init(rng, d_h, d_a, "attn_phrase."),
            attn_sent=AttentionParams.init(rng, 2 * d_h, d_a, "attn_sent."),
            W_pi=Tensor(uniform_init(rng, (1, d_h), d_h), True, "W_pi"),
            b_pi=Tensor(np.zeros(1), True, "b_pi"),
            W_c=Tensor(uniform_init(rng, (n_classes, 2 * d_h), 2 * d_h), True, "W_c"),
            b_c=Tensor(np.zeros(n_classes), True, "b_c"),
        )

    @property
    def d_emb(self) -> int:
        return self.word_lstm.d_in

    @property
    def d_h(self) -> int:
        return self.word_lstm.d_h

    @property
    def d_a(self) -> int:
        return self.attn_word.W.shape[0]

    @property
    def n_classes(self) -> int:
        return self.W_c.shape[0]

    def named_tensors(self) -> dict[str, Tensor]:
        out = {}
        for f in fields(self):
            obj = getattr(self, f.name)
            if isinstance(obj, Tensor):
                out[f.name] = obj
            else:
                for k, t in obj.tensors().items():
                    out[f"{f.name}.{k}"] = t
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.value.copy() for k, t in self.named_tensors().items()}

    @classmethod
    def from_state_dict(cls, state: dict) -> "ModelParams":
        groups: dict[str, dict] = {}
        top = {}
        for key, value in state.items():
            t = Tensor(np.array(value, dtype=np.float64), True, key)
            if "." in key:
                g, k = key.split(".", 1)
                groups.setdefault(g, {})[k] = t
            else:
                top[key] = t
        kw = dict(top)
        for g in LSTM_GROUPS:
            kw[g] = LstmParams(**groups[g])
        for g in ATTN_GROUPS:
            kw[g] = AttentionParams(**groups[g])
        return cls(**kw)

    def copy(self) -> "ModelParams":
        return ModelParams.from_state_dict(self.state_dict())

    def set_trainable(self, names) -> None:
        """Track gradients only for the tensors named in ``names`` (None = all)."""
        for k, t in self.named_tensors().items():
            t.requires_grad = names is None or k in names
            t.zero_grad()


@dataclass
class Document:
    """A labelled document: sentences of token vectors, label is 0-based."""

    sentences: list
    label: int = 0

    def __post_init__(self):
        if not self.sentences:
            raise ValueError("a document needs at least one sentence")
        sents = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in self.sentences]
        widths = {s.shape[1] for s in sents}
        if any(len(s) == 0 for s in sents):
            raise ValueError("empty sentence")
        if len(widths) != 1:
            raise ShapeError(f"token vectors of mixed width {sorted(widths)}")
        self.sentences = sents

    @property
    def n(self) -> int:
        return sum(len(s) for s in self.sentences)

    @property
    def d_emb(self) -> int:
        return self.sentences[0].shape[1]

    @property
    def sentence_lengths(self) -> list[int]:
        return [len(s) for s in self.sentences]

    def spans(self) -> list[tuple[int, int]]:
        out, start = [], 0
        for s in self.sentences:
            out.append((start, start + len(s)))
            start += len(s)
        return out

    def sentence_final(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        for _, stop in self.spans():
            mask[stop - 1] = True
        return mask


def as_assignment(z, n: int) -> np.ndarray:
    z = np.asarray(z)
    if z.shape != (n,):
        raise ValueError(f"indicator assignment has shape {z.shape}, document has {n} tokens")
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("indicator bits must be 0 or 1")
    return z.astype(np.int8)


@lru_cache(maxsize=65536)
def _local_segments(length: int, bits: tuple) -> tuple:
    """Segments of one sentence from its non-final bits (static final close)."""
    ends = [t + 1 for t, b in enumerate(bits) if b] + [length]
    out, start = [], 0
    for e in ends:
        out.append((start, e))
        start = e
    return tuple(out)


def segments_from(doc: Document, z) -> list[list[tuple[int, int]]]:
    """Per-sentence phrase segments; a segment closes at every z=1 and at
    each sentence end whatever its bit says."""
    z = as_assignment(z, doc.n)
    out = []
    for start, stop in doc.spans():
        bits = tuple(int(b) for b in z[start: stop - 1])
        out.append([(start + a, start + b) for a, b in _local_segments(stop - start, bits)])
    return out


def phrase_lengths(doc: Document, z) -> list[int]:
    return [b - a for sent in segments_from(doc, z) for a, b in sent]


# ---------------------------------------------------------------------------
# batched engine

def _unique_rows(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distinct rows of a small non-negative int matrix and the inverse map."""
    if a.shape[1] == 0:
        return a[:1], np.zeros(len(a), dtype=np.intp)
    base = int(a.max()) + 1
    if base ** a.shape[1] < 2 ** 62:
        # mixed-radix code per row; order matches lexicographic row order
        code = np.zeros(len(a), dtype=np.int64)
        for col in range(a.shape[1]):
            code = code * base + a[:, col]
        _, first, inv = np.unique(code, return_index=True, return_inverse=True)
        return a[first], inv.reshape(-1)
    uniq, inv = np.unique(a, axis=0, return_inverse=True)
    return uniq, inv.reshape(-1)


class Plan:
    """Index structures for evaluating ``docs`` under ``configs``.

    Built from the documents and bit patterns alone, so it can be reused for
    any parameter values (the M-step line search evaluates one plan many
    times).
    """

    def __init__(self, docs: Sequence[Document], configs: Sequence[np.ndarray] | None = None):
        self.docs = list(docs)
        if not self.docs:
            raise ValueError("empty batch")
        d_emb = self.docs[0].d_emb
        sents = [s for d in self.docs for s in d.sentences]
        self.n_sent = len(sents)
        self.t_max = max(len(s) for s in sents)
        X = np.zeros((self.n_sent, self.t_max, d_emb))
        for g, s in enumerate(sents):
            if s.shape[1] != d_emb:
                raise ShapeError("documents in a batch must share the embedding width")
            X[g, : len(s)] = s
        self.X = X

        # flat token-table rows for each document, in document order
        self.doc_tokens: list[np.ndarray] = []
        self.doc_sent0: list[int] = []
        g = 0
        for d in self.docs:
            self.doc_sent0.append(g)
            rows = [gg * self.t_max + np.arange(len(s)) for gg, s in enumerate(d.sentences, start=g)]
            self.doc_tokens.append(np.concatenate(rows))
            g += len(d.sentences)
        self.tokens = np.concatenate(self.doc_tokens)
        self.doc_offsets = np.cumsum([0] + [d.n for d in self.docs])

        self.configs = None
        if configs is not None:
            self._build_segments(configs)

    def _build_segments(self, configs) -> None:
        if len(configs) != len(self.docs):
            raise ValueError("one configuration array per document is required")
        self.configs = []
        range_ids: dict = {}
        range_rows: list = []
        seg_ranges: list = []
        seg_sentence: list = []
        self.doc_seg_ids = []  # (K_j, L_j) segmentation id per sentence

        for j, (d, Z) in enumerate(zip(self.docs, configs)):
            Z = np.atleast_2d(np.asarray(Z, dtype=np.int8))
            if Z.shape[1] != d.n:
                raise ValueError(f"configs for document {j} have width {Z.shape[1]}, expected {d.n}")
            self.configs.append(Z)
            per_sent = np.empty((len(Z), len(d.sentences)), dtype=np.intp)
            for i, (start, stop) in enumerate(d.spans()):
                g = self.doc_sent0[j] + i
                T = stop - start
                keys, inv = _unique_rows(Z[:, start: stop - 1])
                ids = np.empty(len(keys), dtype=np.intp)
                for u, key in enumerate(keys):
                    rids = []
                    for a, b in _local_segments(T, tuple(int(x) for x in key)):
                        rk = (g, a, b)
                        rid = range_ids.get(rk)
                        if rid is None:
                            rid = range_ids[rk] = len(range_rows)
                            range_rows.append(g * self.t_max + np.arange(a, b))
                        rids.append(rid)
                    ids[u] = len(seg_ranges)
                    seg_ranges.append(rids)
                    seg_sentence.append(g)
                per_sent[:, i] = ids[inv]
            self.doc_seg_ids.append(per_sent)

        self.range_rows = range_rows
        lr = max(len(r) for r in range_rows)
        self.range_tok = np.zeros((len(range_rows), lr), dtype=np.intp)
        self.range_mask = np.zeros((len(range_rows), lr), dtype=bool)
        for r, rows in enumerate(range_rows):
            self.range_tok[r, : len(rows)] = rows
            self.range_mask[r, : len(rows)] = True

        self.seg_ranges = seg_ranges
        m = max(len(s) for s in seg_ranges)
        self.seg_rng = np.zeros((len(seg_ranges), m), dtype=np.intp)
        self.seg_mask = np.zeros((len(seg_ranges), m), dtype=bool)
        for s, rids in enumerate(seg_ranges):
            self.seg_rng[s, : len(rids)] = rids
            self.seg_mask[s, : len(rids)] = True

        combos, combo_doc, self.config_combo = [], [], []
        for j, per_sent in enumerate(self.doc_seg_ids):
            uniq, inv = _unique_rows(per_sent)
            self.config_combo.append(inv + len(combos))
            combos.extend(list(uniq))
            combo_doc.extend([j] * len(uniq))
        self.combos = combos
        self.combo_doc = np.asarray(combo_doc, dtype=np.intp)
        self.combo_label = np.array([self.docs[j].label for j in combo_doc], dtype=np.intp)
        V = len(combos)
        L = max(len(c) for c in combos)
        self.l_max = L
        self.combo_len = np.array([len(c) for c in combos], dtype=np.intp)
        self.combo_fwd = np.zeros((V, L), dtype=np.intp)
        self.combo_rev = np.zeros((V, L), dtype=np.intp)
        self.combo_mask = np.zeros((V, L), dtype=bool)
        self.bwd_gather = np.zeros((V, L), dtype=np.intp)
        for v, c in enumerate(combos):
            n = len(c)
            self.combo_fwd[v, :n] = c
            self.combo_rev[v, :n] = c[::-1]
            self.combo_mask[v, :n] = True
            # backward state for position p was produced at reversed step n-1-p
            self.bwd_gather[v] = v * L
            self.bwd_gather[v, :n] = v * L + (n - 1 - np.arange(n))

    @property
    def n_configs(self) -> int:
        return sum(len(Z) for Z in self.configs)


@dataclass
class Evaluation:
    plan: Plan
    pi: Tensor            # (N,) raw sigmoid over all document tokens
    log_pi: Tensor        # (N,) log of clamped pi
    log_1m_pi: Tensor     # (N,) log of clamped 1 - pi
    clamped: bool = False
    log_probs: Tensor | None = None   # (V, C) per distinct combination
    alpha: Tensor | None = None       # (R, Lr) word attention per range
    beta: Tensor | None = None        # (S, M) phrase attention per segmentation
    gamma: Tensor | None = None       # (V, Lmax) sentence attention
    word_states: np.ndarray | None = None

    def doc_slice(self, j: int) -> slice:
        o = self.plan.doc_offsets
        return slice(o[j], o[j + 1])

    def class_log_lik(self) -> list[np.ndarray]:
        """log p(y | Z, w) for every configuration of every document."""
        lp = self.log_probs.value
        out = []
        for j, d in enumerate(self.plan.docs):
            out.append(lp[self.plan.config_combo[j], d.label])
        return out

    def bernoulli_log_lik(self) -> list[np.ndarray]:
        lp, lq = self.log_pi.value, self.log_1m_pi.value
        out = []
        for j, Z in enumerate(self.plan.configs):
            s = self.doc_slice(j)
            out.append(Z @ lp[s] + (1 - Z) @ lq[s])
        return out

    def log_joint(self) -> list[np.ndarray]:
        return [a + b for a, b in zip(self.class_log_lik(), self.bernoulli_log_lik())]


def indicator_layer(params: ModelParams, H, plan: Plan) -> Evaluation:
    """pi_t = sigmoid(W_pi h_t + b_pi) for every document token of ``plan``.

    ``H`` is the flat (sentences * t_max, d_h) word-state table.
    """
    H = ad.as_tensor(H)
    logits = ad.take(ad.reshape(ad.affine(params.W_pi, H, params.b_pi), (-1,)), plan.tokens)
    pi = ad.sigmoid(logits)
    clamped = bool(np.any((pi.value < PI_CLAMP) | (pi.value > 1 - PI_CLAMP)))
    if clamped:
        log.debug("indicator intensities clamped to [%g, 1-%g]", PI_CLAMP, PI_CLAMP)
    pi_c = ad.clip(pi, PI_CLAMP, 1 - PI_CLAMP)
    ev = Evaluation(plan, pi, ad.log(pi_c), ad.log(ad.sub(1.0, pi_c)), clamped)
    ev.word_states = H.value
    return ev


def evaluate(params: ModelParams, plan: Plan) -> Evaluation:
    """Run the network for every (document, configuration) pair of ``plan``."""
    d_h = params.d_h
    if plan.X.shape[2] != params.d_emb:
        raise ShapeError(f"token width {plan.X.shape[2]} != model d_emb {params.d_emb}")
    steps = lstm_encode(params.word_lstm, [Tensor(plan.X[:, t]) for t in range(plan.t_max)])
    H = ad.reshape(ad.stack([s.h for s in steps], axis=1), (plan.n_sent * plan.t_max, d_h))

    ev = indicator_layer(params, H, plan)
    if plan.configs is None:
        return ev

    # word attention inside every distinct phrase range
    scores = attention_scores(params.attn_word, H)
    alpha = ad.softmax(ad.take(scores, plan.range_tok), axis=-1, mask=plan.range_mask)
    q = ad.weighted_sum(alpha, ad.take(H, plan.range_tok))

    # phrase layer per distinct segmentation, state reset per sentence
    m = plan.seg_rng.shape[1]
    p_steps = lstm_encode(params.phrase_lstm, [ad.take(q, plan.seg_rng[:, t]) for t in range(m)])
    H2 = ad.stack([s.h for s in p_steps], axis=1)
    sent_vec, beta = attention_pool(params.attn_phrase, H2, mask=plan.seg_mask)

    # sentence BiLSTM per distinct combination of sentence segmentations
    L = plan.l_max
    V = len(plan.combos)
    f_steps = lstm_encode(params.sent_fwd, [ad.take(sent_vec, plan.combo_fwd[:, t]) for t in range(L)])
    b_steps = lstm_encode(params.sent_bwd, [ad.take(sent_vec, plan.combo_rev[:, t]) for t in range(L)])
    F = ad.stack([s.h for s in f_steps], axis=1)
    B = ad.reshape(ad.stack([s.h for s in b_steps], axis=1), (V * L, params.sent_bwd.d_h))
    H3 = ad.concat([F, ad.take(B, plan.bwd_gather)], axis=-1)
    doc_vec, gamma = attention_pool(params.attn_sent, H3, mask=plan.combo_mask)
    ev.log_probs = ad.log_softmax(ad.affine(params.W_c, doc_vec, params.b_c), axis=-1)
    ev.alpha, ev.beta, ev.gamma = alpha, beta, gamma
    return ev


def expected_class_log_lik(ev: Evaluation, weights: Sequence[np.ndarray]) -> Tensor:
    """``sum_j sum_k w_jk log p(y_j | Z_jk, w_j)``, with weights pooled onto
    distinct segmentation combinations."""
    plan = ev.plan
    V = len(plan.combos)
    combo_w = np.zeros(V)
    for j, w in enumerate(weights):
        np.add.at(combo_w, plan.config_combo[j], w)
    picked = ev.log_probs[np.arange(V), plan.combo_label]
    return ad.tsum(ad.mul(picked, combo_w))


def expected_bernoulli_log_lik(ev: Evaluation, weights: Sequence[np.ndarray]) -> Tensor:
    """Bernoulli part of the expected log joint; linear in each bit, so only
    the weighted marginals of the configurations matter."""
    marg = np.empty(len(ev.plan.tokens))
    for j, (Z, w) in enumerate(zip(ev.plan.configs, weights)):
        marg[ev.doc_slice(j)] = w @ Z
    return ad.tsum(ad.add(ad.mul(ev.log_pi, marg), ad.mul(ev.log_1m_pi, 1.0 - marg)))


def expected_log_joint(ev: Evaluation, weights: Sequence[np.ndarray]) -> Tensor:
    """Differentiable ``sum_j sum_k w_jk log p(y_j, Z_jk | w_j)``."""
    return ad.add(expected_class_log_lik(ev, weights), expected_bernoulli_log_lik(ev, weights))


# ---------------------------------------------------------------------------
# single-document operations

@dataclass
class AttentionTrace:
    """Attention weights and segments of one forward pass.

    ``alpha[i][k]`` are word weights inside phrase ``k`` of sentence ``i``,
    ``beta[i]`` the phrase weights of sentence ``i``, ``gamma`` the sentence
    weights of the document.
    """

    segments: list
    alpha: list
    beta: list
    gamma: np.ndarray
    pi: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))


def trace_from(ev: Evaluation, j: int = 0, k: int = 0) -> AttentionTrace:
    plan = ev.plan
    doc = plan.docs[j]
    z = plan.configs[j][k]
    seg_ids = plan.doc_seg_ids[j][k]
    combo = plan.config_combo[j][k]
    segments, alpha, beta = [], [], []
    for i, (start, _) in enumerate(doc.spans()):
        rids = plan.seg_ranges[seg_ids[i]]
        segs, weights = [], []
        for rid in rids:
            rows = plan.range_rows[rid]
            a = int(rows[0] % plan.t_max)
            segs.append((start + a, start + a + len(rows)))
            weights.append(ev.alpha.value[rid, : len(rows)].copy())
        segments.append(segs)
        alpha.append(weights)
        beta.append(ev.beta.value[seg_ids[i], : len(rids)].copy())
    gamma = ev.gamma.value[combo, : len(doc.sentences)].copy()
    return AttentionTrace(segments, alpha, beta, gamma, ev.pi.value[ev.doc_slice(j)].copy(), z.copy())


def indicator_probs_batch(params: ModelParams, docs: Sequence[Document]) -> list[np.ndarray]:
    with ad.no_grad():
        ev = evaluate(params, Plan(docs))
    return [ev.pi.value[ev.doc_slice(j)].copy() for j in range(len(docs))]


def indicator_probs(params: ModelParams, doc: Document) -> np.ndarray:
    """Boundary intensity pi_t for every token (word layer reset per sentence)."""
    return indicator_probs_batch(params, [doc])[0]


def forward_given_z(params: ModelParams, doc: Document, z) -> tuple[Tensor, AttentionTrace]:
    z = as_assignment(z, doc.n)
    ev = evaluate(params, Plan([doc], [z[None, :]]))
    probs = ad.exp(ev.log_probs[ev.plan.config_combo[0][0]])
    return probs, trace_from(ev)


def complete_log_likelihood(params: ModelParams, doc: Document, z) -> Tensor:
    """log p(y | Z, w) + sum_t log Bernoulli(z_t; pi_t), differentiable."""
    z = as_assignment(z, doc.n)
    ev = evaluate(params, Plan([doc], [z[None, :]]))
    if ev.clamped:
        log.warning("complete_log_likelihood: pi clamped to [%g, 1-%g]", PI_CLAMP, PI_CLAMP)
    return expected_log_joint(ev, [np.ones(1)])


def impute(pi: np.ndarray) -> np.ndarray:
    """Hard assignment z_t = 1 iff pi_t > 0.5; ties go to 0."""
    return (np.asarray(pi) > 0.5).astype(np.int8)


def predict_batch(params: ModelParams, docs: Sequence[Document]) -> tuple[np.ndarray, list[np.ndarray], Evaluation]:
    with ad.no_grad():
        zs = [impute(p) for p in indicator_probs_batch(params, docs)]
        ev = evaluate(params, Plan(docs, [z[None, :] for z in zs]))
    lp = ev.log_probs.value
    labels = np.array([int(np.argmax(lp[ev.plan.config_combo[j][0]])) for j in range(len(docs))])
    return labels, zs, ev


def predict(params: ModelParams, doc: Document) -> tuple[int, np.ndarray, AttentionTrace]:
    labels, zs, ev = predict_batch(params, [doc])
    return int(labels[0]), zs[0], trace_from(ev)
