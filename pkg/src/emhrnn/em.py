"""Training by generalized EM over the latent boundary indicators.

Three schedules share one engine:

* exact EM enumerates all 2^n indicator configurations of a document;
* the non-overlapping block bootstrap enumerates one block of length ``l`` at
  a time with the other bits fixed at their imputed values;
* the local block bootstrap samples ten length-5 windows per document and
  enumerates each one, updating only the indicator head.

The M-step is a few momentum-SGD ascent passes on the expected complete-data
log-likelihood with backtracking, so each accepted step increases Q.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data_io import batch_by_length
from .model import (
    HEAD_NAMES,
    Document,
    Evaluation,
    ModelParams,
    Plan,
    evaluate,
    expected_bernoulli_log_lik,
    expected_class_log_lik,
    expected_log_joint,
    impute,
    indicator_layer,
    indicator_probs_batch,
    predict_batch,
)

log = logging.getLogger(__name__)

STRATEGIES = ("exact", "nonoverlap", "local")
LOCAL_WINDOW = 5
LOCAL_BLOCKS = 10
Q_SLACK = 1e-9


class TooLongError(ValueError):
    """Exact enumeration was asked for more free bits than allowed."""


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN or inf; the update is rejected."""


# ---------------------------------------------------------------------------
# configuration

@dataclass
class TrainConfig:
    strategy: str = "exact"
    block_length: int = 5
    learning_rate: float = 0.1
    momentum: float = 0.9
    batch_size: int = 64
    m_step_passes: int = 1
    epochs: int = 1
    K: int | None = None
    M: int = 1
    seed: int = 0
    max_exact_n: int = 16
    max_halvings: int = 8
    chunk_configs: int = 65536
    q_reduction: str = "sum"

    def __post_init__(self):
        if ":" in self.strategy:
            name, _, arg = self.strategy.partition(":")
            try:
                self.block_length = int(arg)
            except ValueError:
                raise ValueError(f"bad block length in strategy {self.strategy!r}") from None
            self.strategy = name
        aliases = {"exact_em": "exact", "local_bootstrap": "local"}
        self.strategy = aliases.get(self.strategy, self.strategy)
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; use exact, nonoverlap:<l> or local")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.block_length < 1:
            raise ValueError("block length must be >= 1")
        if self.strategy == "nonoverlap" and self.block_length > self.max_exact_n:
            raise ValueError(f"block length {self.block_length} exceeds max_exact_n {self.max_exact_n}")
        for name in ("batch_size", "m_step_passes", "M", "max_exact_n", "chunk_configs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.max_halvings < 0 or (self.K is not None and self.K < 0):
            raise ValueError("epochs, K and max_halvings must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.q_reduction not in ("sum", "mean"):
            raise ValueError("q_reduction must be 'sum' or 'mean'")

    def grad_scale(self, n_docs: int) -> float:
        """Factor on the batch Q gradient: 1 for the summed Q, 1/n for the mean."""
        return 1.0 if self.q_reduction == "sum" else 1.0 / n_docs

    @property
    def outer_iterations(self) -> int:
        return self.epochs if self.K is None else self.K

    @property
    def label(self) -> str:
        return f"nonoverlap:{self.block_length}" if self.strategy == "nonoverlap" else self.strategy

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# posterior tables and blocks

@dataclass
class PosteriorTable:
    """Posterior over the enumerated configurations of one document."""

    configs: np.ndarray      # (K, n) int8, distinct rows
    log_joint: np.ndarray    # (K,) log p(y, Z_k | w)
    weights: np.ndarray = None
    log_marginal: float = None

    def __post_init__(self):
        self.configs = np.atleast_2d(np.asarray(self.configs, dtype=np.int8))
        self.log_joint = np.asarray(self.log_joint, dtype=np.float64).reshape(-1)
        if len(self.configs) != len(self.log_joint):
            raise ValueError("one log-likelihood per configuration is required")
        if self.weights is None:
            m = self.log_joint.max()
            shifted = np.exp(self.log_joint - m)
            total = shifted.sum()
            self.weights = shifted / total
            self.log_marginal = float(m + np.log(total))

    def __len__(self) -> int:
        return len(self.configs)

    @property
    def marginals(self) -> np.ndarray:
        """P(z_t = 1 | y, w) for every position."""
        return self.weights @ self.configs

    @classmethod
    def single(cls, z) -> "PosteriorTable":
        """Point mass on one assignment (used by classification EM)."""
        return cls(np.asarray(z)[None, :], np.zeros(1), np.ones(1), 0.0)


@dataclass
class BlockSpec:
    """Blocks of free positions for one document.

    Blocks are 0-based half-open ranges.  ``fixed_z`` holds the value of
    every position outside ``free_positions``.
    """

    n: int
    blocks: list
    fixed_z: np.ndarray = None

    def __post_init__(self):
        self.blocks = [(int(a), int(b)) for a, b in self.blocks]
        for a, b in self.blocks:
            if not 0 <= a < b <= self.n:
                raise ValueError(f"block {(a, b)} outside document of {self.n} tokens")
        if self.fixed_z is None:
            self.fixed_z = np.zeros(self.n, dtype=np.int8)
        self.fixed_z = np.asarray(self.fixed_z, dtype=np.int8).copy()
        if self.fixed_z.shape != (self.n,):
            raise ValueError("fixed_z must cover the whole document")

    @property
    def free_positions(self) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        for a, b in self.blocks:
            mask[a:b] = True
        return np.flatnonzero(mask)

    def one_based(self) -> list[tuple[int, int]]:
        """Blocks as inclusive 1-based ranges ``[first..last]``."""
        return [(a + 1, b) for a, b in self.blocks]

    def block(self, k: int, fixed_z=None) -> "BlockSpec":
        return BlockSpec(self.n, [self.blocks[k]], self.fixed_z if fixed_z is None else fixed_z)

    @classmethod
    def full(cls, n: int) -> "BlockSpec":
        return cls(n, [(0, n)])


def all_bit_patterns(m: int) -> np.ndarray:
    """All 2^m rows of m bits; column 0 is the most significant bit."""
    codes = np.arange(2 ** m, dtype=np.int64)
    return ((codes[:, None] >> (m - 1 - np.arange(m))) & 1).astype(np.int8)


def block_configs(spec: BlockSpec) -> np.ndarray:
    free = spec.free_positions
    pats = all_bit_patterns(len(free))
    Z = np.repeat(spec.fixed_z[None, :], len(pats), axis=0)
    Z[:, free] = pats
    return Z


def partition_blocks(n: int, l: int, fixed_z=None) -> BlockSpec:
    """ceil(n / l) consecutive blocks of length ``l``; the last may be shorter."""
    if l < 1:
        raise ValueError("block length must be >= 1")
    return BlockSpec(n, [(a, min(a + l, n)) for a in range(0, n, l)], fixed_z)


def sample_local_blocks(n: int, rng: np.random.Generator, fixed_z=None) -> BlockSpec:
    """Ten length-5 windows around random centers, shifted inward at the edges."""
    if n < 1:
        raise ValueError("document must have at least one token")
    centers = rng.choice(n, size=LOCAL_BLOCKS, replace=n < LOCAL_BLOCKS)
    blocks = []
    for c in centers:
        if n <= LOCAL_WINDOW:
            blocks.append((0, n))
            continue
        a = min(max(int(c) - LOCAL_WINDOW // 2, 0), n - LOCAL_WINDOW)
        blocks.append((a, a + LOCAL_WINDOW))
    return BlockSpec(n, blocks, fixed_z)


# ---------------------------------------------------------------------------
# batched evaluation

@dataclass
class ConfigCounter:
    """Configuration evaluations spent on posterior enumeration."""

    total: int = 0
    per_doc: dict = field(default_factory=dict)

    def add(self, doc_id, k: int) -> None:
        self.total += k
        self.per_doc[doc_id] = self.per_doc.get(doc_id, 0) + k

    def reset(self) -> None:
        self.total = 0
        self.per_doc = {}


class Workload:
    """Documents paired with configuration sets, cut into plan-sized chunks."""

    def __init__(self, docs: Sequence[Document], configs: Sequence[np.ndarray], chunk_configs: int = 65536):
        self.docs = list(docs)
        self.configs = [np.atleast_2d(np.asarray(Z, dtype=np.int8)) for Z in configs]
        self.chunks: list[tuple[int, int, Plan]] = []
        start, size = 0, 0
        for j, Z in enumerate(self.configs):
            if j > start and size + len(Z) > chunk_configs:
                self.chunks.append((start, j, None))
                start, size = j, 0
            size += len(Z)
        self.chunks.append((start, len(self.docs), None))
        self.chunks = [(a, b, Plan(self.docs[a:b], self.configs[a:b])) for a, b, _ in self.chunks]


def _trainable(params: ModelParams, names) -> dict[str, Tensor]:
    tensors = params.named_tensors()
    return {k: t for k, t in tensors.items() if names is None or k in names}


def _objective(params: ModelParams, work: Workload, weights=None, *, grad_names=None,
               want_grad: bool = True, scale: float = 1.0):
    """Q over ``work`` and optionally its gradient (stored in ``.grad``).

    With ``weights=None`` the posterior is computed from the same forward pass
    (E-step), so Q(theta | theta) and its gradient cost one evaluation.
    Returns ``(Q, tables)``.
    """
    if want_grad:
        params.set_trainable(grad_names)
    tables: list[PosteriorTable] = []
    total = 0.0
    for a, b, plan in work.chunks:
        graph = ad.Graph(retain_grads=False)
        with graph:
            if want_grad:
                ev = evaluate(params, plan)
            else:
                with ad.no_grad():
                    ev = evaluate(params, plan)
            if weights is None:
                chunk_tables = [PosteriorTable(Z, lj) for Z, lj in zip(plan.configs, ev.log_joint())]
                tables.extend(chunk_tables)
                w = [t.weights for t in chunk_tables]
            else:
                w = weights[a:b]
            q = expected_log_joint(ev, w)
            if want_grad:
                graph.backward(ad.mul(q, -scale))
        graph.release()
        total += q.item()
    return total, tables


class _HeadObjective:
    """Q as a function of the indicator head only.

    The class term and the word states do not depend on (W_pi, b_pi), so they
    are computed once and Q is re-evaluated from the cached word states.
    """

    def __init__(self, params: ModelParams, work: Workload, weights):
        self.parts = []
        for a, b, plan in work.chunks:
            with ad.no_grad():
                ev = evaluate(params, plan)
                const = expected_class_log_lik(ev, weights[a:b]).item()
            self.parts.append((plan, ev.word_states, const, weights[a:b]))

    def __call__(self, params: ModelParams, want_grad: bool, scale: float = 1.0) -> float:
        if want_grad:
            params.set_trainable(HEAD_NAMES)
        total = 0.0
        for plan, H, const, w in self.parts:
            graph = ad.Graph(retain_grads=False)
            with graph:
                ev = indicator_layer(params, Tensor(H), plan)
                q = expected_bernoulli_log_lik(ev, w)
                if want_grad:
                    graph.backward(ad.mul(q, -scale))
            graph.release()
            total += const + q.item()
        return total


# ---------------------------------------------------------------------------
# E-step

def enumerate_posteriors(params: ModelParams, docs: Sequence[Document],
                         specs: Sequence[BlockSpec] | None = None, *,
                         max_exact_n: int = 16, counter: ConfigCounter | None = None,
                         doc_ids=None, chunk_configs: int = 65536) -> list[PosteriorTable]:
    configs = _enumeration_configs(docs, specs, max_exact_n)
    if counter is not None:
        ids = range(len(docs)) if doc_ids is None else doc_ids
        for i, Z in zip(ids, configs):
            counter.add(i, len(Z))
    work = Workload(docs, configs, chunk_configs)
    with ad.no_grad():
        _, tables = _objective(params, work, want_grad=False)
    return tables


def enumerate_posterior(params: ModelParams, doc: Document, spec: BlockSpec | None = None, *,
                        max_exact_n: int = 16, counter: ConfigCounter | None = None) -> PosteriorTable:
    """Posterior over every assignment of the free positions of ``spec``
    (all positions when ``spec`` is None)."""
    specs = None if spec is None else [spec]
    return enumerate_posteriors(params, [doc], specs, max_exact_n=max_exact_n, counter=counter)[0]


def _enumeration_configs(docs, specs, max_exact_n) -> list[np.ndarray]:
    out = []
    for j, d in enumerate(docs):
        spec = BlockSpec.full(d.n) if specs is None else specs[j]
        if spec.n != d.n:
            raise ValueError(f"block spec for {spec.n} tokens applied to a {d.n}-token document")
        m = len(spec.free_positions)
        if m > max_exact_n:
            raise TooLongError(
                f"{m} free indicator positions exceed max_exact_n={max_exact_n}; "
                "use a bootstrap strategy (nonoverlap:<l> or local)")
        out.append(block_configs(spec))
    return out


def q_value(params: ModelParams, doc: Document, table: PosteriorTable) -> Tensor:
    """sum_k w_k log p(y, Z_k | w) under ``params``; differentiable."""
    ev = evaluate(params, Plan([doc], [table.configs]))
    return expected_log_joint(ev, [table.weights])


def batch_q(params: ModelParams, docs: Sequence[Document], tables: Sequence[PosteriorTable]) -> float:
    work = Workload(docs, [t.configs for t in tables])
    with ad.no_grad():
        q, _ = _objective(params, work, [t.weights for t in tables], want_grad=False)
    return q


def cem_impute(params: ModelParams, doc: Document) -> np.ndarray:
    return impute(indicator_probs_batch(params, [doc])[0])


def cem_impute_batch(params: ModelParams, docs: Sequence[Document]) -> list[np.ndarray]:
    return [impute(p) for p in indicator_probs_batch(params, docs)]


# ---------------------------------------------------------------------------
# M-step

def sgd_momentum_update(values: dict, grads: dict, velocity: dict, lr: float, mu: float):
    """``v' = mu v + g``, ``p' = p - lr v'`` for every key of ``grads``.

    Pass the gradient of the quantity to minimize (here -Q).  Returns new
    dicts; the inputs are left untouched.
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {k}")
    new_v = {k: mu * velocity.get(k, 0.0) + g for k, g in grads.items()}
    new_p = {k: values[k] - lr * v for k, v in new_v.items()}
    return new_p, new_v


@dataclass
class GemRecord:
    q_before: float
    q_after: float
    accepted: bool
    halvings: int
    lr: float
    flagged: str = ""

    @property
    def delta(self) -> float:
        return self.q_after - self.q_before


def gem_step(params: ModelParams, docs: Sequence[Document], tables: Sequence[PosteriorTable],
             config: TrainConfig, velocity: dict | None = None, *, trainable=None,
             objective: Callable | None = None, initial: float | None = None) -> list[GemRecord]:
    """Ascent passes on sum_docs Q with backtracking; updates ``params`` in place.

    A step is taken only when Q does not decrease.  The learning rate is
    halved up to ``max_halvings`` times before the step is skipped.  The
    gradient is that of the batch Q summed over documents, or of its mean
    when ``config.q_reduction == "mean"``.  ``initial`` is Q at the current
    parameters when the caller already left its gradient in ``.grad``.
    """
    velocity = {} if velocity is None else velocity
    scale = config.grad_scale(len(docs))
    if objective is None:
        work = Workload(docs, [t.configs for t in tables], config.chunk_configs)
        weights = [t.weights for t in tables]

        def objective(p, want_grad):
            return _objective(p, work, weights, grad_names=trainable, want_grad=want_grad, scale=scale)[0]

    records = []
    for pas in range(config.m_step_passes):
        q_old = initial if (pas == 0 and initial is not None) else objective(params, True)
        live = _trainable(params, trainable)
        values = {k: t.value for k, t in live.items()}
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in live.items()}
        try:
            new_p, new_v = sgd_momentum_update(values, grads, velocity, config.learning_rate, config.momentum)
        except NonFiniteGradient as exc:
            log.warning("GEM step skipped: %s", exc)
            records.append(GemRecord(q_old, q_old, False, 0, 0.0, "nonfinite"))
            continue
        lr = config.learning_rate
        accepted = False
        for halving in range(config.max_halvings + 1):
            for k, t in live.items():
                t.value = values[k] - lr * new_v[k]
            with ad.no_grad():
                q_new = objective(params, False)
            if np.isfinite(q_new) and q_new >= q_old:
                accepted = True
                break
            lr *= 0.5
        if accepted:
            velocity.update(new_v)
            records.append(GemRecord(q_old, q_new, True, halving, lr))
        else:
            for k, t in live.items():
                t.value = values[k]
            for k in live:
                velocity.pop(k, None)
            log.info("GEM step skipped after %d halvings (Q=%.6g)", config.max_halvings, q_old)
            records.append(GemRecord(q_old, q_old, False, config.max_halvings, 0.0, "no_ascent"))
    params.set_trainable(None)
    return records


# ---------------------------------------------------------------------------
# trainers

@dataclass
class History:
    records: list = field(default_factory=list)
    gem: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _check_lengths(docs, limit: int) -> None:
    for i, d in enumerate(docs):
        if d.n > limit:
            raise TooLongError(
                f"document {i} has {d.n} tokens > max_exact_n={limit}; "
                "exact EM needs 2^n evaluations, use nonoverlap:<l> or local")


def _record(history: History, epoch: int, config: TrainConfig, params, docs, counter: ConfigCounter,
            q: float | None, marginal: float | None, monitor) -> dict:
    labels, _, _ = predict_batch(params, docs)
    acc = float(np.mean(labels == np.array([d.label for d in docs])))
    per_doc = sorted(set(counter.per_doc.values()))
    rec = {
        "epoch": epoch,
        "strategy": config.label,
        "Q": q,
        "marginal_ll": marginal,
        "config_evals": counter.total,
        "config_evals_per_doc": per_doc[0] if len(per_doc) == 1 else per_doc,
        "accuracy": acc,
    }
    if monitor is not None:
        rec.update(monitor(params))
    history.records.append(rec)
    log.info("epoch %d %s Q=%s marginal=%s acc=%.4f", epoch, config.label, q, marginal, acc)
    return rec


def _batches(docs, config: TrainConfig, rng) -> list[list[int]]:
    return batch_by_length(docs, config.batch_size, rng)


def train_exact_em(params: ModelParams, docs: Sequence[Document], config: TrainConfig,
                   monitor: Callable | None = None) -> tuple[ModelParams, History]:
    """Full-enumeration generalized EM.

    Each batch gets an E-step at the current parameters followed by a GEM
    step.  ``Q`` and ``marginal_ll`` in the history are summed over the
    batches of the epoch, each taken at the parameters its E-step saw.
    """
    _check_lengths(docs, config.max_exact_n)
    rng = np.random.default_rng(config.seed)
    history, velocity, counter = History(), {}, ConfigCounter()
    for epoch in range(1, config.epochs + 1):
        counter.reset()
        q_sum = marg_sum = 0.0
        for idx in _batches(docs, config, rng):
            batch = [docs[i] for i in idx]
            configs = _enumeration_configs(batch, None, config.max_exact_n)
            for i, Z in zip(idx, configs):
                counter.add(i, len(Z))
            work = Workload(batch, configs, config.chunk_configs)
            q0, tables = _objective(params, work, want_grad=True, scale=config.grad_scale(len(batch)))
            q_sum += q0
            marg_sum += sum(t.log_marginal for t in tables)
            history.gem.extend(gem_step(params, batch, tables, config, velocity, initial=q0))
        _record(history, epoch, config, params, docs, counter, q_sum, marg_sum, monitor)
    return params, history


def _initial_fixed(params, docs) -> list[np.ndarray]:
    return cem_impute_batch(params, docs)


def train_nonoverlap(params: ModelParams, docs: Sequence[Document], config: TrainConfig,
                     monitor: Callable | None = None) -> tuple[ModelParams, History]:
    """Block-by-block EM with the bits outside the active block held at
    their imputed values; the finished block is re-imputed before the next."""
    rng = np.random.default_rng(config.seed)
    l = config.block_length
    history, velocity, counter = History(), {}, ConfigCounter()
    for epoch in range(1, config.epochs + 1):
        counter.reset()
        q_sum = marg_sum = 0.0
        for idx in _batches(docs, config, rng):
            batch = [docs[i] for i in idx]
            fixed = _initial_fixed(params, batch)
            specs = [partition_blocks(d.n, l) for d in batch]
            n_blocks = max(len(s.blocks) for s in specs)
            for k in range(n_blocks):
                active = [j for j, s in enumerate(specs) if k < len(s.blocks)]
                sub = [batch[j] for j in active]
                bspecs = [specs[j].block(k, fixed[j]) for j in active]
                configs = _enumeration_configs(sub, bspecs, config.max_exact_n)
                for j, Z in zip(active, configs):
                    counter.add(idx[j], len(Z))
                work = Workload(sub, configs, config.chunk_configs)
                q0, tables = _objective(params, work, want_grad=True, scale=config.grad_scale(len(sub)))
                q_sum += q0
                marg_sum += sum(t.log_marginal for t in tables)
                history.gem.extend(gem_step(params, sub, tables, config, velocity, initial=q0))
                refreshed = cem_impute_batch(params, sub)
                for j, z in zip(active, refreshed):
                    a, b = specs[j].blocks[k]
                    fixed[j][a:b] = z[a:b]
        _record(history, epoch, config, params, docs, counter, q_sum, marg_sum, monitor)
    return params, history


def train_local_bootstrap(params: ModelParams, docs: Sequence[Document], config: TrainConfig,
                          monitor: Callable | None = None) -> tuple[ModelParams, History]:
    """Local block bootstrap.

    Per inner iteration and batch: (1) fit everything except the indicator
    head on the imputed assignments; (2) for each sampled window, enumerate
    its 2^5 configurations with the other bits fixed and fit the head alone.
    """
    rng = np.random.default_rng(config.seed)
    history, velocity, counter = History(), {}, ConfigCounter()
    body = tuple(k for k in params.named_tensors() if k not in HEAD_NAMES)
    for outer in range(1, config.outer_iterations + 1):
        counter.reset()
        q_sum = marg_sum = 0.0
        for _ in range(config.M):
            for idx in _batches(docs, config, rng):
                batch = [docs[i] for i in idx]
                specs = [sample_local_blocks(d.n, rng) for d in batch]

                # step 1: network parameters on hard assignments
                fixed = cem_impute_batch(params, batch)
                tables = [PosteriorTable.single(z) for z in fixed]
                history.gem.extend(gem_step(params, batch, tables, config, velocity, trainable=body))

                # step 2: indicator head on each window's posterior
                fixed = cem_impute_batch(params, batch)
                for k in range(LOCAL_BLOCKS):
                    bspecs = [s.block(k, fixed[j]) for j, s in enumerate(specs)]
                    configs = _enumeration_configs(batch, bspecs, config.max_exact_n)
                    for i, Z in zip(idx, configs):
                        counter.add(i, len(Z))
                    work = Workload(batch, configs, config.chunk_configs)
                    with ad.no_grad():
                        _, tables = _objective(params, work, want_grad=False)
                    q_sum += sum(float(t.weights @ t.log_joint) for t in tables)
                    marg_sum += sum(t.log_marginal for t in tables)
                    head = _HeadObjective(params, work, [t.weights for t in tables])
                    scale = config.grad_scale(len(batch))
                    history.gem.extend(gem_step(
                        params, batch, tables, config, velocity, trainable=HEAD_NAMES,
                        objective=lambda p, g: head(p, g, scale)))
                    refreshed = cem_impute_batch(params, batch)
                    for j, z in enumerate(refreshed):
                        a, b = bspecs[j].blocks[0]
                        fixed[j][a:b] = z[a:b]
        _record(history, outer, config, params, docs, counter, q_sum, marg_sum, monitor)
    return params, history


TRAINERS = {"exact": train_exact_em, "nonoverlap": train_nonoverlap, "local": train_local_bootstrap}


def train(params: ModelParams, docs: Sequence[Document], config: TrainConfig,
          monitor: Callable | None = None) -> tuple[ModelParams, History]:
    if not docs:
        raise ValueError("empty training corpus")
    return TRAINERS[config.strategy](params, docs, config, monitor)


def validation_score(params: ModelParams, docs: Sequence[Document]) -> float:
    """Mean log-probability of the true label under the imputed segmentation."""
    _, _, ev = predict_batch(params, docs)
    return float(np.mean(ev.class_log_lik()))


def select_learning_rate(params: ModelParams, docs: Sequence[Document], config: TrainConfig,
                         grid: Sequence[float] = (0.1, 0.05, 0.01), fraction: float = 0.1) -> float:
    """Pick the grid rate whose model scores best on a held-out split."""
    if len(docs) < 2:
        return config.learning_rate
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(docs))
    n_val = max(1, int(math.ceil(fraction * len(docs))))
    val = [docs[i] for i in perm[:n_val]]
    fit = [docs[i] for i in perm[n_val:]]
    best, best_score = config.learning_rate, -np.inf
    for lr in grid:
        trial = TrainConfig(**{**config.to_dict(), "learning_rate": lr})
        model, _ = train(params.copy(), fit, trial)
        score = validation_score(model, val)
        log.info("learning rate %g: validation score %.6f", lr, score)
        if score > best_score:
            best, best_score = lr, score
    return best
