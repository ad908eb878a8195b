"""Recurrent cells: the classic LSTM (optionally with a capped input gate) and
a rewired variant whose forget gate is computed from the proposed update and
whose output gate reads the cell state only.

Forward passes return a cache of intermediate activations; backward passes are
hand-derived and checked against central finite differences in the test suite.
All state arrays are batched row-wise: c and h have shape (B, n), inputs (B, m).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DivergenceError, Rng, dsigmoid_from_value, dtanh_from_value, gemm, sigmoid


@dataclass
class CellState:
    c: np.ndarray
    h: np.ndarray

    def copy(self) -> "CellState":
        return CellState(self.c.copy(), self.h.copy())

    @classmethod
    def zeros(cls, batch: int, size: int, dtype=np.float64) -> "CellState":
        return cls(np.zeros((batch, size), dtype=dtype), np.zeros((batch, size), dtype=dtype))


@dataclass
class LstmParams:
    w_ix: np.ndarray  # (n, m)
    w_ih: np.ndarray  # (n, n)
    w_jx: np.ndarray
    w_jh: np.ndarray
    w_fx: np.ndarray
    w_fh: np.ndarray
    w_ox: np.ndarray
    w_oh: np.ndarray
    b_i: np.ndarray  # (n,)
    b_j: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray

    @property
    def state_size(self) -> int:
        return self.w_ih.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ix.shape[1]


@dataclass
class RlstmParams:
    w_ix: np.ndarray  # (n, m)
    w_ih: np.ndarray  # (n, n)
    w_jx: np.ndarray
    w_jh: np.ndarray
    w_fu: np.ndarray  # (n, n), applied to i*j
    w_fh: np.ndarray  # (n, n)
    w_oc: np.ndarray  # (n, n), output gate reads the cell state
    b_i: np.ndarray
    b_j: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray

    @property
    def state_size(self) -> int:
        return self.w_ih.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ix.shape[1]


@dataclass
class LstmCache:
    x: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    i: np.ndarray
    j: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    capped: bool


@dataclass
class RlstmCache:
    x: np.ndarray
    c_prev: np.ndarray
    h_prev: np.ndarray
    i: np.ndarray
    j: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    u: np.ndarray  # i * j, input of the forget gate
    cm: np.ndarray  # c * state_mask, input of the output gate
    state_mask: np.ndarray | None


def _check_finite(state: CellState):
    if not (np.all(np.isfinite(state.c)) and np.all(np.isfinite(state.h))):
        raise DivergenceError("non-finite cell activations")


def lstm_forward(p: LstmParams, state: CellState, x: np.ndarray, cap_input_gate: bool = True):
    """One LSTM step. With the cap enabled the effective input gate is
    min(i, 1 - f), which keeps |c| bounded by 1 when it starts there."""
    c_prev, h_prev = state.c, state.h
    i = sigmoid(gemm(x, p.w_ix.T) + gemm(h_prev, p.w_ih.T) + p.b_i)
    j = np.tanh(gemm(x, p.w_jx.T) + gemm(h_prev, p.w_jh.T) + p.b_j)
    f = sigmoid(gemm(x, p.w_fx.T) + gemm(h_prev, p.w_fh.T) + p.b_f)
    o = sigmoid(gemm(x, p.w_ox.T) + gemm(h_prev, p.w_oh.T) + p.b_o)
    g = np.minimum(i, 1.0 - f) if cap_input_gate else i
    c = f * c_prev + g * j
    tanh_c = np.tanh(c)
    h = o * tanh_c
    new_state = CellState(c, h)
    _check_finite(new_state)
    cache = LstmCache(x, c_prev, h_prev, i, j, f, o, g, c, tanh_c, cap_input_gate)
    return new_state, cache


def rlstm_forward(p: RlstmParams, state: CellState, x: np.ndarray, state_mask=None):
    """One rewired-LSTM step: f is computed from i*j and h_prev, the input
    gate is capped at 1 - f, and o reads the (optionally masked) cell state."""
    c_prev, h_prev = state.c, state.h
    i = sigmoid(gemm(x, p.w_ix.T) + gemm(h_prev, p.w_ih.T) + p.b_i)
    j = np.tanh(gemm(x, p.w_jx.T) + gemm(h_prev, p.w_jh.T) + p.b_j)
    u = i * j
    f = sigmoid(gemm(u, p.w_fu.T) + gemm(h_prev, p.w_fh.T) + p.b_f)
    g = np.minimum(i, 1.0 - f)
    c = f * c_prev + g * j
    cm = c if state_mask is None else c * state_mask
    o = sigmoid(gemm(cm, p.w_oc.T) + p.b_o)
    tanh_c = np.tanh(c)
    h = o * tanh_c
    new_state = CellState(c, h)
    _check_finite(new_state)
    cache = RlstmCache(x, c_prev, h_prev, i, j, f, o, g, c, tanh_c, u, cm, state_mask)
    return new_state, cache


def lstm_backward(p: LstmParams, cache: LstmCache, grad_c, grad_h):
    """Gradients of a scalar loss through one LSTM step.

    min(i, 1 - f) routes its subgradient to the smaller argument; on ties the
    input-gate branch wins (fixed for determinism).
    """
    do = grad_h * cache.tanh_c
    dc = grad_c + grad_h * cache.o * dtanh_from_value(cache.tanh_c)

    df = dc * cache.c_prev
    dg = dc * cache.j
    dj = dc * cache.g
    dc_prev = dc * cache.f
    if cache.capped:
        take_i = cache.i <= 1.0 - cache.f
        di = dg * take_i
        df = df - dg * (~take_i)
    else:
        di = dg

    dpre_i = di * dsigmoid_from_value(cache.i)
    dpre_j = dj * dtanh_from_value(cache.j)
    dpre_f = df * dsigmoid_from_value(cache.f)
    dpre_o = do * dsigmoid_from_value(cache.o)

    grads = LstmParams(
        w_ix=gemm(dpre_i.T, cache.x),
        w_ih=gemm(dpre_i.T, cache.h_prev),
        w_jx=gemm(dpre_j.T, cache.x),
        w_jh=gemm(dpre_j.T, cache.h_prev),
        w_fx=gemm(dpre_f.T, cache.x),
        w_fh=gemm(dpre_f.T, cache.h_prev),
        w_ox=gemm(dpre_o.T, cache.x),
        w_oh=gemm(dpre_o.T, cache.h_prev),
        b_i=dpre_i.sum(axis=0),
        b_j=dpre_j.sum(axis=0),
        b_f=dpre_f.sum(axis=0),
        b_o=dpre_o.sum(axis=0),
    )
    dx = gemm(dpre_i, p.w_ix) + gemm(dpre_j, p.w_jx) + gemm(dpre_f, p.w_fx) + gemm(dpre_o, p.w_ox)
    dh_prev = (
        gemm(dpre_i, p.w_ih)
        + gemm(dpre_j, p.w_jh)
        + gemm(dpre_f, p.w_fh)
        + gemm(dpre_o, p.w_oh)
    )
    return grads, dc_prev, dh_prev, dx


def rlstm_backward(p: RlstmParams, cache: RlstmCache, grad_c, grad_h):
    do = grad_h * cache.tanh_c
    dc = grad_c + grad_h * cache.o * dtanh_from_value(cache.tanh_c)

    dpre_o = do * dsigmoid_from_value(cache.o)
    dcm = gemm(dpre_o, p.w_oc)
    dc = dc + (dcm if cache.state_mask is None else dcm * cache.state_mask)

    df = dc * cache.c_prev
    dg = dc * cache.j
    dj = dc * cache.g
    dc_prev = dc * cache.f
    take_i = cache.i <= 1.0 - cache.f
    di = dg * take_i
    df = df - dg * (~take_i)

    dpre_f = df * dsigmoid_from_value(cache.f)
    du = gemm(dpre_f, p.w_fu)
    di = di + du * cache.j
    dj = dj + du * cache.i

    dpre_i = di * dsigmoid_from_value(cache.i)
    dpre_j = dj * dtanh_from_value(cache.j)

    grads = RlstmParams(
        w_ix=gemm(dpre_i.T, cache.x),
        w_ih=gemm(dpre_i.T, cache.h_prev),
        w_jx=gemm(dpre_j.T, cache.x),
        w_jh=gemm(dpre_j.T, cache.h_prev),
        w_fu=gemm(dpre_f.T, cache.u),
        w_fh=gemm(dpre_f.T, cache.h_prev),
        w_oc=gemm(dpre_o.T, cache.cm),
        b_i=dpre_i.sum(axis=0),
        b_j=dpre_j.sum(axis=0),
        b_f=dpre_f.sum(axis=0),
        b_o=dpre_o.sum(axis=0),
    )
    dx = gemm(dpre_i, p.w_ix) + gemm(dpre_j, p.w_jx)
    dh_prev = gemm(dpre_i, p.w_ih) + gemm(dpre_j, p.w_jh) + gemm(dpre_f, p.w_fh)
    return grads, dc_prev, dh_prev, dx


def cell_backward(p, cache, grad_c, grad_h):
    """Dispatch on the cache type produced by the matching forward."""
    if isinstance(cache, RlstmCache):
        return rlstm_backward(p, cache, grad_c, grad_h)
    if isinstance(cache, LstmCache):
        return lstm_backward(p, cache, grad_c, grad_h)
    raise TypeError(f"unknown cache type {type(cache)}")


def _uniform_matrix(rng: Rng, rows: int, cols: int, scale: float, dtype):
    return rng.uniform(-scale, scale, (rows, cols)).astype(dtype)


def _chrono_forget_bias(rng: Rng, n: int, t_max: float, dtype):
    # b_f ~ ln(U(1, t_max - 1)) spreads initial memory timescales up to t_max.
    if not t_max > 2.0:
        raise ValueError(f"t_max must exceed 2 (empty init range), got {t_max}")
    return np.log(rng.uniform(1.0, t_max - 1.0, n)).astype(dtype)


def init_lstm_params(rng: Rng, m: int, n: int, t_max: float, dtype=np.float64) -> LstmParams:
    scale = 1.0 / np.sqrt(n)
    weights = {
        name: _uniform_matrix(rng, n, m if name.endswith("x") else n, scale, dtype)
        for name in ("w_ix", "w_ih", "w_jx", "w_jh", "w_fx", "w_fh", "w_ox", "w_oh")
    }
    zeros = lambda: np.zeros(n, dtype=dtype)
    return LstmParams(
        **weights,
        b_i=zeros(),
        b_j=zeros(),
        b_f=_chrono_forget_bias(rng, n, t_max, dtype),
        b_o=zeros(),
    )


def init_rlstm_params(rng: Rng, m: int, n: int, t_max: float, dtype=np.float64) -> RlstmParams:
    scale = 1.0 / np.sqrt(n)
    weights = {
        name: _uniform_matrix(rng, n, m if name.endswith("x") else n, scale, dtype)
        for name in ("w_ix", "w_ih", "w_jx", "w_jh", "w_fu", "w_fh", "w_oc")
    }
    zeros = lambda: np.zeros(n, dtype=dtype)
    return RlstmParams(
        **weights,
        b_i=zeros(),
        b_j=zeros(),
        b_f=_chrono_forget_bias(rng, n, t_max, dtype),
        b_o=zeros(),
    )


def init_cell_params(rng: Rng, m: int, n: int, kind: str, t_max: float, dtype=np.float64):
    if kind == "lstm":
        return init_lstm_params(rng, m, n, t_max, dtype)
    if kind == "rlstm":
        return init_rlstm_params(rng, m, n, t_max, dtype)
    raise ValueError(f"unknown cell kind '{kind}' (expected 'lstm' or 'rlstm')")
