"""Neural building blocks on top of :mod:`cmdrnn.tensor`.

Every layer accepts a single example or a batch with a leading batch axis:
``conv1d`` and ``maxpool1d`` take ``[C, L]`` or ``[B, C, L]``; ``dense`` and
the recurrent steps take ``[F]`` or ``[B, F]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .tensor import Node, ShapeError


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


@dataclass
class Conv1dParams:
    kernels: Node  # [out_channels, in_channels, width]
    bias: Node  # [out_channels]
    stride: int = 2

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.kernels.ndim != 3 or self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(f"kernels {self.kernels.shape} and bias {self.bias.shape} are inconsistent")

    @property
    def width(self) -> int:
        return self.kernels.shape[2]

    @classmethod
    def init(cls, rng, in_channels: int, out_channels: int, width: int, stride: int = 2, prefix: str = "conv"):
        w = glorot(rng, (out_channels, in_channels, width), in_channels * width, out_channels * width)
        return cls(T.parameter(w, f"{prefix}.kernels"), T.parameter(np.zeros(out_channels), f"{prefix}.bias"), stride)


def conv_output_length(length: int, width: int, stride: int) -> int:
    if length < width:
        raise ShapeError(f"input length {length} is shorter than window {width}")
    return (length - width) // stride + 1


def _conv1d_raw(x: Node, w: Node, b: Node, stride: int) -> Node:
    n_out = conv_output_length(x.shape[2], w.shape[2], stride)
    width = w.shape[2]
    patches = sliding_window_view(x.value, width, axis=2)[:, :, ::stride, :]  # [B, C, L_out, k]
    out = np.tensordot(patches, w.value, axes=([1, 3], [1, 2]))  # [B, L_out, O]
    out = out.transpose(0, 2, 1) + b.value[None, :, None]
    span = stride * (n_out - 1) + 1

    def backward_fn(g):
        gw = np.tensordot(g, patches, axes=([0, 2], [0, 2])) if w.requires_grad else None
        gb = g.sum(axis=(0, 2)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = np.zeros(x.shape)
            for j in range(width):
                gx[:, :, j:j + span:stride] += np.einsum("bol,oc->bcl", g, w.value[:, :, j])
        return gx, gw, gb

    return T.make_node("conv1d", np.ascontiguousarray(out), (x, w, b), backward_fn)


def _maxpool1d_raw(x: Node, window: int, stride: int) -> Node:
    n_out = conv_output_length(x.shape[2], window, stride)
    span = stride * (n_out - 1) + 1
    out = x.value[:, :, 0:span:stride].copy()
    arg = np.zeros(out.shape, dtype=np.intp)
    for j in range(1, window):
        cand = x.value[:, :, j:j + span:stride]
        # strict > keeps the first maximum, so ties route to the lowest index
        better = cand > out
        out = np.where(better, cand, out)
        arg[better] = j

    def backward_fn(g):
        gx = np.zeros(x.shape)
        for j in range(window):
            gx[:, :, j:j + span:stride] += np.where(arg == j, g, 0.0)
        return (gx,)

    return T.make_node("maxpool1d", np.ascontiguousarray(out), (x,), backward_fn)


def _batched3(x: Node, name: str) -> tuple[Node, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"{name} expects [C, L] or [B, C, L], got {x.shape}")


def conv1d(x, p: Conv1dParams, activation: str = "sigmoid") -> Node:
    """Valid cross-correlation with stride, then the activation."""
    x, single = _batched3(T.lift(x), "conv1d")
    if x.shape[1] != p.kernels.shape[1]:
        raise ShapeError(f"conv1d: input has {x.shape[1]} channels, kernels expect {p.kernels.shape[1]}")
    out = T.activation(activation)(_conv1d_raw(x, p.kernels, p.bias, p.stride))
    return T.reshape(out, out.shape[1:]) if single else out


def maxpool1d(x, window: int = 2, stride: int = 2, activation: str = "relu") -> Node:
    x, single = _batched3(T.lift(x), "maxpool1d")
    out = T.activation(activation)(_maxpool1d_raw(x, window, stride))
    return T.reshape(out, out.shape[1:]) if single else out


def flatten(x, batched: bool = False) -> Node:
    """Row-major flatten; with ``batched`` the leading axis is kept."""
    x = T.lift(x)
    if batched:
        return T.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
    return T.reshape(x, (x.value.size,))


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------


def _affine(x: Node, w: Node, b: Optional[Node]) -> Node:
    """``x @ w.T (+ b)`` for ``x`` of shape [F] or [B, F]."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"input of width {x.shape[-1]} does not match weight {w.shape}")
    if x.ndim == 1:
        return T.reshape(T.linear(T.reshape(x, (1, x.shape[0])), w, b), (w.shape[0],))
    if x.ndim == 2:
        return T.linear(x, w, b)
    raise ShapeError(f"expected [F] or [B, F], got {x.shape}")


@dataclass
class DenseParams:
    weight: Node  # [out, in]
    bias: Node  # [out]
    activation: str = "linear"

    @classmethod
    def init(cls, rng, n_in: int, n_out: int, activation: str = "linear", prefix: str = "dense"):
        w = glorot(rng, (n_out, n_in), n_in, n_out)
        return cls(T.parameter(w, f"{prefix}.weight"), T.parameter(np.zeros(n_out), f"{prefix}.bias"), activation)


def dense(h, p: DenseParams) -> Node:
    return T.activation(p.activation)(_affine(T.lift(h), p.weight, p.bias))


# ---------------------------------------------------------------------------
# recurrent cells
# ---------------------------------------------------------------------------


class LSTMState(NamedTuple):
    h: Node
    c: Node


def _zeros_state(batch: Optional[int], hidden: int) -> Node:
    shape = (hidden,) if batch is None else (batch, hidden)
    return T.constant(np.zeros(shape))


@dataclass
class RecurrentCellParams:
    """Elman cell: ``h_t = act(W x_t + U h_{t-1} + b)``."""

    w: Node  # [hidden, in]
    u: Node  # [hidden, hidden]
    b: Node  # [hidden]
    activation: str = "sigmoid"

    def __post_init__(self):
        n = self.w.shape[0]
        if self.u.shape != (n, n) or self.b.shape != (n,):
            raise ShapeError("vanilla cell: W, U and b disagree on the hidden size")

    @property
    def hidden(self) -> int:
        return self.w.shape[0]

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, activation: str = "sigmoid", prefix: str = "rnn"):
        return cls(
            T.parameter(glorot(rng, (hidden, n_in), n_in, hidden), f"{prefix}.W"),
            T.parameter(glorot(rng, (hidden, hidden), hidden, hidden), f"{prefix}.U"),
            T.parameter(np.zeros(hidden), f"{prefix}.b"),
            activation,
        )

    def zero_state(self, batch: Optional[int] = None) -> Node:
        return _zeros_state(batch, self.hidden)

    def step(self, x_t, state: Node) -> Node:
        return rnn_step(x_t, state, self)

    @staticmethod
    def output(state: Node) -> Node:
        return state


@dataclass
class LSTMParams:
    """Input, forget, output and candidate gates; no peepholes."""

    w: dict  # gate -> Node [hidden, in]
    u: dict  # gate -> Node [hidden, hidden]
    b: dict  # gate -> Node [hidden]

    GATES = ("i", "f", "o", "g")

    def __post_init__(self):
        n = self.w["i"].shape[0]
        for k in self.GATES:
            if self.w[k].shape[0] != n or self.u[k].shape != (n, n) or self.b[k].shape != (n,):
                raise ShapeError(f"LSTM gate {k!r} has shapes inconsistent with hidden size {n}")

    @property
    def hidden(self) -> int:
        return self.w["i"].shape[0]

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, forget_bias: float = 1.0, prefix: str = "lstm"):
        w, u, b = {}, {}, {}
        for k in cls.GATES:
            w[k] = T.parameter(glorot(rng, (hidden, n_in), n_in, hidden), f"{prefix}.W_{k}")
            u[k] = T.parameter(glorot(rng, (hidden, hidden), hidden, hidden), f"{prefix}.U_{k}")
            b[k] = T.parameter(np.full(hidden, forget_bias if k == "f" else 0.0), f"{prefix}.b_{k}")
        return cls(w, u, b)

    def zero_state(self, batch: Optional[int] = None) -> LSTMState:
        return LSTMState(_zeros_state(batch, self.hidden), _zeros_state(batch, self.hidden))

    def step(self, x_t, state: LSTMState) -> LSTMState:
        return lstm_step(x_t, state, self)

    @staticmethod
    def output(state: LSTMState) -> Node:
        return state.h


@dataclass
class GRUParams:
    """Update gate ``z``, reset gate ``r``, candidate ``n`` (reset applied before U)."""

    w: dict
    u: dict
    b: dict

    GATES = ("z", "r", "n")

    def __post_init__(self):
        n = self.w["z"].shape[0]
        for k in self.GATES:
            if self.w[k].shape[0] != n or self.u[k].shape != (n, n) or self.b[k].shape != (n,):
                raise ShapeError(f"GRU gate {k!r} has shapes inconsistent with hidden size {n}")

    @property
    def hidden(self) -> int:
        return self.w["z"].shape[0]

    @classmethod
    def init(cls, rng, n_in: int, hidden: int, prefix: str = "gru"):
        w, u, b = {}, {}, {}
        for k in cls.GATES:
            w[k] = T.parameter(glorot(rng, (hidden, n_in), n_in, hidden), f"{prefix}.W_{k}")
            u[k] = T.parameter(glorot(rng, (hidden, hidden), hidden, hidden), f"{prefix}.U_{k}")
            b[k] = T.parameter(np.zeros(hidden), f"{prefix}.b_{k}")
        return cls(w, u, b)

    def zero_state(self, batch: Optional[int] = None) -> Node:
        return _zeros_state(batch, self.hidden)

    def step(self, x_t, state: Node) -> Node:
        return gru_step(x_t, state, self)

    @staticmethod
    def output(state: Node) -> Node:
        return state


CellParams = Union[RecurrentCellParams, LSTMParams, GRUParams]


def _check_state(x_t: Node, h: Node, hidden: int) -> None:
    if h.shape[-1] != hidden or h.ndim != x_t.ndim or (h.ndim == 2 and h.shape[0] != x_t.shape[0]):
        raise ShapeError(f"state {h.shape} does not match input {x_t.shape} and hidden size {hidden}")


def _gate(x_t: Node, h: Node, w: Node, u: Node, b: Node) -> Node:
    return T.add(_affine(x_t, w, b), _affine(h, u, None))


def rnn_step(x_t, h_prev, p: RecurrentCellParams) -> Node:
    x_t, h_prev = T.lift(x_t), T.lift(h_prev)
    _check_state(x_t, h_prev, p.hidden)
    return T.activation(p.activation)(_gate(x_t, h_prev, p.w, p.u, p.b))


def lstm_step(x_t, state: LSTMState, p: LSTMParams) -> LSTMState:
    x_t = T.lift(x_t)
    h, c = state
    _check_state(x_t, h, p.hidden)
    i = T.sigmoid(_gate(x_t, h, p.w["i"], p.u["i"], p.b["i"]))
    f = T.sigmoid(_gate(x_t, h, p.w["f"], p.u["f"], p.b["f"]))
    o = T.sigmoid(_gate(x_t, h, p.w["o"], p.u["o"], p.b["o"]))
    g = T.tanh(_gate(x_t, h, p.w["g"], p.u["g"], p.b["g"]))
    c_new = f * c + i * g
    return LSTMState(o * T.tanh(c_new), c_new)


def gru_step(x_t, h_prev, p: GRUParams) -> Node:
    x_t, h_prev = T.lift(x_t), T.lift(h_prev)
    _check_state(x_t, h_prev, p.hidden)
    z = T.sigmoid(_gate(x_t, h_prev, p.w["z"], p.u["z"], p.b["z"]))
    r = T.sigmoid(_gate(x_t, h_prev, p.w["r"], p.u["r"], p.b["r"]))
    cand = T.tanh(_gate(x_t, r * h_prev, p.w["n"], p.u["n"], p.b["n"]))
    return (1.0 - z) * h_prev + z * cand


def unroll(cell: CellParams, frames) -> Node:
    """Run ``cell`` over ``frames`` ([T, F] or [B, T, F]) from a zero state.

    Returns the final hidden state.
    """
    frames = T.lift(frames)
    if frames.ndim == 2:
        steps, batch, time_axis = frames.shape[0], None, 0
    elif frames.ndim == 3:
        steps, batch, time_axis = frames.shape[1], frames.shape[0], 1
    else:
        raise ShapeError(f"unroll expects [T, F] or [B, T, F], got {frames.shape}")
    if steps == 0:
        raise ShapeError("cannot unroll over zero steps")
    state = cell.zero_state(batch)
    for t in range(steps):
        state = cell.step(T.select(frames, time_axis, t), state)
    return cell.output(state)


def cell_parameters(cell: CellParams) -> dict[str, Node]:
    if isinstance(cell, RecurrentCellParams):
        nodes = [cell.w, cell.u, cell.b]
    else:
        nodes = [group[k] for k in cell.GATES for group in (cell.w, cell.u, cell.b)]
    return {n.name: n for n in nodes}
