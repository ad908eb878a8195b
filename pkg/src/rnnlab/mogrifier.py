"""Mutual gating between the recurrent state and the cell input.

For round counts r >= 1 the input and state take turns rescaling each other
through 2*sigmoid gates; zero weights make every gate the identity.  Gate
matrices may be full or low-rank factored.  The returned pair is the top of
each ladder, which coincides with indices 2*floor(r/2) for the state and
2*floor((r+1)/2) - 1 for the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng, gemm, sigmoid


@dataclass
class LowRank:
    """Factored matrix u @ v with u: (d_out, k), v: (k, d_in)."""

    u: np.ndarray
    v: np.ndarray


@dataclass
class MogrifierParams:
    rounds: int
    x_gates: list = field(default_factory=list)  # odd rounds: gate x from h, (m, n) each
    h_gates: list = field(default_factory=list)  # even rounds: gate h from x, (n, m) each

    def validate(self):
        if self.rounds < 0:
            raise ValueError(f"rounds must be >= 0, got {self.rounds}")
        want_x = (self.rounds + 1) // 2
        want_h = self.rounds // 2
        if len(self.x_gates) != want_x or len(self.h_gates) != want_h:
            raise ValueError(
                f"rounds={self.rounds} needs {want_x} x-gates and {want_h} h-gates, "
                f"got {len(self.x_gates)} and {len(self.h_gates)}"
            )


@dataclass
class MogrifyCache:
    x_ladder: list  # x^-1, x^1, x^3, ...
    h_ladder: list  # h^0, h^2, h^4, ...
    gates: list  # per round: the 2*sigmoid gate values
    lowrank_mids: list  # per round: v-projected input for factored gates, else None


def _apply_gate_matrix(w, vec):
    """Return (pre_activation, lowrank_mid) for w @ vec with batched rows."""
    if isinstance(w, LowRank):
        mid = gemm(vec, w.v.T)
        return gemm(mid, w.u.T), mid
    return gemm(vec, w.T), None


def mogrify_forward(p: MogrifierParams, h: np.ndarray, x: np.ndarray):
    p.validate()
    x_ladder = [x]
    h_ladder = [h]
    gates = []
    mids = []
    for index in range(1, p.rounds + 1):
        if index % 2 == 1:
            pre, mid = _apply_gate_matrix(p.x_gates[index // 2], h_ladder[-1])
            gate = 2.0 * sigmoid(pre)
            x_ladder.append(gate * x_ladder[-1])
        else:
            pre, mid = _apply_gate_matrix(p.h_gates[index // 2 - 1], x_ladder[-1])
            gate = 2.0 * sigmoid(pre)
            h_ladder.append(gate * h_ladder[-1])
        gates.append(gate)
        mids.append(mid)
    cache = MogrifyCache(x_ladder, h_ladder, gates, mids)
    return h_ladder[-1], x_ladder[-1], cache


def _gate_backward(w, dpre, applied_to):
    """Gradients of pre = w(applied_to): returns (w-shaped grads, d_applied_to)."""
    if isinstance(w, LowRank):
        mid_grad = gemm(dpre, w.u)
        grads = LowRank(u=gemm(dpre.T, gemm(applied_to, w.v.T)), v=gemm(mid_grad.T, applied_to))
        return grads, gemm(mid_grad, w.v)
    return gemm(dpre.T, applied_to), gemm(dpre, w)


def mogrify_backward(p: MogrifierParams, cache: MogrifyCache, grad_h_out, grad_x_out):
    """Exact gradients through the gating ladder.

    d(2*sigmoid)/dpre written via the gate value g: g * (1 - g/2).
    """
    x_grads = [None] * len(p.x_gates)
    h_grads = [None] * len(p.h_gates)
    dh = grad_h_out
    dx = grad_x_out
    x_top = len(cache.x_ladder) - 1
    h_top = len(cache.h_ladder) - 1
    for index in range(p.rounds, 0, -1):
        gate = cache.gates[index - 1]
        if index % 2 == 1:
            x_old = cache.x_ladder[x_top - 1]
            h_cur = cache.h_ladder[h_top]
            dgate = dx * x_old
            dx = dx * gate
            dpre = dgate * gate * (1.0 - 0.5 * gate)
            w_grad, dh_extra = _gate_backward(p.x_gates[index // 2], dpre, h_cur)
            x_grads[index // 2] = w_grad
            dh = dh + dh_extra
            x_top -= 1
        else:
            h_old = cache.h_ladder[h_top - 1]
            x_cur = cache.x_ladder[x_top]
            dgate = dh * h_old
            dh = dh * gate
            dpre = dgate * gate * (1.0 - 0.5 * gate)
            w_grad, dx_extra = _gate_backward(p.h_gates[index // 2 - 1], dpre, x_cur)
            h_grads[index // 2 - 1] = w_grad
            dx = dx + dx_extra
            h_top -= 1
    grads = MogrifierParams(rounds=p.rounds, x_gates=x_grads, h_gates=h_grads)
    return grads, dh, dx


def _init_gate(rng: Rng, d_out: int, d_in: int, rank: int, scale: float, dtype):
    if rank > 0:
        return LowRank(
            u=rng.uniform(-scale, scale, (d_out, rank)).astype(dtype),
            v=rng.uniform(-scale, scale, (rank, d_in)).astype(dtype),
        )
    return rng.uniform(-scale, scale, (d_out, d_in)).astype(dtype)


def init_mogrifier_params(
    rng: Rng, m: int, n: int, rounds: int, rank: int = 0, dtype=np.float64
) -> MogrifierParams:
    """Gates drawn like cell weights; rank 0 means full matrices."""
    if rounds < 0:
        raise ValueError(f"rounds must be >= 0, got {rounds}")
    scale = 1.0 / np.sqrt(n)
    x_gates = []
    h_gates = []
    for index in range(1, rounds + 1):
        if index % 2 == 1:
            x_gates.append(_init_gate(rng, m, n, rank, scale, dtype))
        else:
            h_gates.append(_init_gate(rng, n, m, rank, scale, dtype))
    return MogrifierParams(rounds=rounds, x_gates=x_gates, h_gates=h_gates)
