"""LSTM encoders, attention pooling and the softmax classifier head."""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(value, name: str) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


@dataclass
class LstmParams:
    """Gate weights of one LSTM cell.

    ``W_*`` act on the previous hidden state (d_h x d_h), ``U_*`` on the
    input (d_h x d_in), ``b_*`` are the gate biases.
    """

    W_i: Tensor
    W_f: Tensor
    W_c: Tensor
    W_o: Tensor
    U_i: Tensor
    U_f: Tensor
    U_c: Tensor
    U_o: Tensor
    b_i: Tensor
    b_f: Tensor
    b_c: Tensor
    b_o: Tensor

    def __post_init__(self):
        d_h, d_in = self.U_i.shape
        for f in fields(self):
            t = getattr(self, f.name)
            want = {"W": (d_h, d_h), "U": (d_h, d_in), "b": (d_h,)}[f.name[0]]
            if t.shape != want:
                raise ShapeError(f"LstmParams.{f.name}: expected {want}, got {t.shape}")

    @property
    def d_h(self) -> int:
        return self.U_i.shape[0]

    @property
    def d_in(self) -> int:
        return self.U_i.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_h: int, prefix: str = "") -> "LstmParams":
        kw = {}
        for g in "ifco":
            kw[f"W_{g}"] = _param(uniform_init(rng, (d_h, d_h), d_h), f"{prefix}W_{g}")
            kw[f"U_{g}"] = _param(uniform_init(rng, (d_h, d_in), d_in), f"{prefix}U_{g}")
            kw[f"b_{g}"] = _param(np.zeros(d_h), f"{prefix}b_{g}")
        return cls(**kw)

    @classmethod
    def zeros(cls, d_in: int, d_h: int) -> "LstmParams":
        kw = {}
        for g in "ifco":
            kw[f"W_{g}"] = _param(np.zeros((d_h, d_h)), f"W_{g}")
            kw[f"U_{g}"] = _param(np.zeros((d_h, d_in)), f"U_{g}")
            kw[f"b_{g}"] = _param(np.zeros(d_h), f"b_{g}")
        return cls(**kw)

    def tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, d_h: int, batch: tuple = ()) -> "LstmState":
        z = np.zeros(batch + (d_h,))
        return cls(Tensor(z), Tensor(z.copy()))


@dataclass
class AttentionParams:
    """Single-layer perceptron ``tanh(W s + b)`` scored against context ``u``."""

    W: Tensor
    b: Tensor
    u: Tensor

    def __post_init__(self):
        d_a = self.W.shape[0]
        if self.b.shape != (d_a,) or self.u.shape != (d_a,):
            raise ShapeError(f"AttentionParams: W {self.W.shape}, b {self.b.shape}, u {self.u.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_a: int, prefix: str = "") -> "AttentionParams":
        return cls(
            W=_param(uniform_init(rng, (d_a, d_in), d_in), f"{prefix}W"),
            b=_param(np.zeros(d_a), f"{prefix}b"),
            # context vector drawn like one row of a (1 x d_a) projection
            u=_param(uniform_init(rng, (d_a,), d_a), f"{prefix}u"),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"W": self.W, "b": self.b, "u": self.u}


class _FusedLstm:
    """Gate matrices concatenated once per encode, in (i, f, o, c) order."""

    def __init__(self, p: LstmParams):
        self.d_h = p.d_h
        self.d_in = p.d_in
        self.W = ad.concat([p.W_i, p.W_f, p.W_o, p.W_c], axis=0).T
        self.U = ad.concat([p.U_i, p.U_f, p.U_o, p.U_c], axis=0).T
        self.b = ad.concat([p.b_i, p.b_f, p.b_o, p.b_c], axis=0)

    def step(self, prev: LstmState, x_proj: Tensor) -> LstmState:
        d = self.d_h
        pre = ad.add(ad.matmul(prev.h, self.W), x_proj)
        i, f, o, c_tilde = ad.split(pre, [d, d, d, d], axis=-1)
        i, f, o, c_tilde = ad.sigmoid(i), ad.sigmoid(f), ad.sigmoid(o), ad.tanh(c_tilde)
        c = ad.add(ad.mul(i, c_tilde), ad.mul(f, prev.c))
        h = ad.mul(o, ad.tanh(c))
        return LstmState(h, c)

    def project(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"LSTM input has width {x.shape[-1]}, expected {self.d_in}")
        return ad.add(ad.matmul(x, self.U), self.b)


def lstm_cell_step(params: LstmParams, prev: LstmState, x) -> LstmState:
    x = ad.as_tensor(x)
    if prev.h.shape[-1] != params.d_h or prev.c.shape[-1] != params.d_h:
        raise ShapeError(f"LSTM state width {prev.h.shape[-1]} != d_h {params.d_h}")
    fused = _FusedLstm(params)
    return fused.step(prev, fused.project(x))


def lstm_encode(params: LstmParams, inputs, init: LstmState | None = None) -> list[LstmState]:
    """Run the cell over ``inputs`` (a sequence of (..., d_in) tensors)."""
    if len(inputs) == 0:
        raise ValueError("lstm_encode needs at least one input")
    inputs = [ad.as_tensor(x) for x in inputs]
    fused = _FusedLstm(params)
    state = init or LstmState.zeros(params.d_h, inputs[0].shape[:-1])
    states = []
    for x in inputs:
        state = fused.step(state, fused.project(x))
        states.append(state)
    return states


def bilstm_encode(fwd: LstmParams, bwd: LstmParams, inputs) -> list[Tensor]:
    """Concatenate [forward state, backward state] at every position."""
    if len(inputs) == 0:
        raise ValueError("bilstm_encode needs at least one input")
    f_states = lstm_encode(fwd, inputs)
    b_states = lstm_encode(bwd, list(reversed(inputs)))[::-1]
    return [ad.concat([f.h, b.h], axis=-1) for f, b in zip(f_states, b_states)]


def attention_scores(params: AttentionParams, states) -> Tensor:
    """``tanh(W s_t + b)^T u`` for each state row; shape ``states.shape[:-1]``."""
    states = ad.as_tensor(states)
    u = ad.tanh(ad.affine(params.W, states, params.b))
    return ad.matmul(u, params.u)


def attention_pool(params: AttentionParams, states, mask=None) -> tuple[Tensor, Tensor]:
    """Softmax-weighted sum of ``states`` (..., T, d) over the T axis.

    Returns ``(pooled, weights)``; ``mask`` (..., T) drops padded positions.
    """
    if isinstance(states, (list, tuple)):
        if not states:
            raise ValueError("attention_pool needs at least one state")
        states = ad.stack(states, axis=-2)
    states = ad.as_tensor(states)
    if states.ndim < 2 or states.shape[-2] == 0:
        raise ValueError("attention_pool needs at least one state")
    weights = ad.softmax(attention_scores(params, states), axis=-1, mask=mask)
    return ad.weighted_sum(weights, states), weights


def classify(W_c, b_c, v) -> Tensor:
    W_c = ad.as_tensor(W_c)
    if W_c.shape[0] < 2:
        raise ShapeError("classifier needs at least two classes")
    return ad.softmax(ad.affine(W_c, v, b_c), axis=-1)


def nll_loss(p, label) -> Tensor:
    """``-log p[label]``; a batch of rows with a label array sums the losses."""
    p = ad.as_tensor(p)
    labels = np.atleast_1d(np.asarray(label))
    C = p.shape[-1]
    if np.any(labels < 0) or np.any(labels >= C):
        raise IndexError(f"label {label} out of range for {C} classes")
    if p.ndim == 1:
        picked = p[int(labels[0])]
    else:
        picked = p[np.arange(p.shape[0]), labels]
    if np.any(picked.value < PROB_FLOOR):
        log.warning("nll_loss: probability of the true label below %g, clamped", PROB_FLOOR)
        picked = ad.clip(picked, PROB_FLOOR, 1.0)
    return ad.neg(ad.tsum(ad.log(picked)))
