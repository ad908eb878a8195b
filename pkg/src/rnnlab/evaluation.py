"""Deterministic evaluation, metric conversion, softmax-temperature tuning,
and dynamic evaluation (test-time adaptation of fast weights by gradient
steps on already-scored text).

All scoring uses deterministic dropout (masks at their expectation).  With
batch size 1 the per-token negative log-likelihoods are accumulated one by
one in stream order, so totals do not depend on how the stream is chunked
into windows; dynamic evaluation with learning rate 0 is then bitwise equal
to static evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import model
from .numerics import DivergenceError
from .ptree import copy_tree, flatten, unflatten_into


def convert_metrics(nats_per_token: float):
    """(perplexity, bits per token) from a mean negative log-likelihood.

    Perplexity saturates to inf when exp overflows (diverged adaptation can
    produce finite but astronomical losses)."""
    try:
        perplexity = math.exp(nats_per_token)
    except OverflowError:
        perplexity = float("inf")
    return perplexity, nats_per_token / math.log(2.0)


@dataclass
class DynevalConfig:
    segment: int = 100  # tokens scored (then adapted on) per update
    lr: float = 0.0  # 0 disables adaptation entirely
    decay: float = 0.0  # pull toward the slow weights, in [0, 1)
    norm_mode: str = "none"  # none | global (g / max(1, ||g||))

    def validate(self):
        if self.segment < 1:
            raise ValueError(f"segment must be >= 1, got {self.segment}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.decay < 1.0:
            raise ValueError(f"decay must be in [0, 1), got {self.decay}")
        if self.norm_mode not in ("none", "global"):
            raise ValueError(f"norm_mode must be 'none' or 'global', got '{self.norm_mode}'")
        return self


@dataclass
class EvalReport:
    total_nats: float
    token_count: int
    nats_per_token: float
    perplexity: float
    bpc: float
    temperature: float
    dyneval: DynevalConfig | None = None
    partial: bool = False  # dynamic evaluation aborted by non-finite fast weights


def make_report(total_nats, token_count, temperature, dyneval=None, partial=False) -> EvalReport:
    nats = total_nats / token_count if token_count else float("nan")
    ppl, bpc = convert_metrics(nats)
    return EvalReport(
        total_nats=total_nats,
        token_count=token_count,
        nats_per_token=nats,
        perplexity=ppl,
        bpc=bpc,
        temperature=temperature,
        dyneval=dyneval,
        partial=partial,
    )


def format_report(report: EvalReport) -> str:
    parts = [
        f"nats_per_token={report.nats_per_token!r}",
        f"perplexity={report.perplexity!r}",
        f"bpc={report.bpc!r}",
        f"tokens={report.token_count}",
        f"temperature={report.temperature!r}",
    ]
    if report.dyneval is not None:
        d = report.dyneval
        parts.append(
            f"dyn_segment={d.segment} dyn_lr={d.lr!r} dyn_decay={d.decay!r} dyn_norm={d.norm_mode}"
        )
    if report.partial:
        parts.append("partial=true")
    return " ".join(parts)


def _picked_log_probs(log_probs, targets):
    bsz, horizon = targets.shape
    rows = np.arange(bsz)[:, None]
    cols = np.arange(horizon)[None, :]
    return log_probs[rows, cols, targets]


def evaluate_static(
    params, config, stream, temperature=1.0, batch_size=1, window=128
) -> EvalReport:
    """One deterministic pass over the stream with carried state.

    batch_size > 1 lays the stream out as contiguous rows (dropping the
    remainder) for speed; batch_size 1 scores every target token exactly.
    """
    stream = np.asarray(stream)
    if stream.size < 2:
        raise ValueError("evaluation stream needs at least two tokens")
    rows = stream[None, :] if batch_size == 1 else data_mod.batchify(stream, batch_size)
    states = None
    total = 0.0
    count = 0
    for batch in data_mod.windows(rows, window):
        log_probs, states = model.predict_deterministic(
            params, config, batch.inputs, temperature, states
        )
        picked = _picked_log_probs(log_probs, batch.targets)
        if batch_size == 1:
            for value in picked[0]:
                total -= float(value)
        else:
            total -= float(np.sum(picked))
        count += picked.size
    return make_report(total, count, temperature)


def default_temperature_grid():
    return [round(0.70 + 0.02 * k, 2) for k in range(31)]


def temperature_sweep(params, config, stream, grid=None, batch_size=1, window=128):
    """Validation nats/token at every grid temperature, in grid order."""
    grid = default_temperature_grid() if grid is None else list(grid)
    if not grid:
        raise ValueError("temperature grid must be non-empty")
    if any(t <= 0 for t in grid):
        raise ValueError("temperatures must be positive")
    results = []
    for temp in grid:
        report = evaluate_static(params, config, stream, temp, batch_size, window)
        results.append((temp, report.nats_per_token))
    return results


def tune_temperature(params, config, stream, grid=None, batch_size=1, window=128) -> float:
    """Grid temperature maximizing validation log-likelihood; exact ties go to
    the temperature closest to 1 (then the smaller one)."""
    results = temperature_sweep(params, config, stream, grid, batch_size, window)
    best_nats = min(nats for _, nats in results)
    contenders = [temp for temp, nats in results if nats == best_nats]
    return min(contenders, key=lambda t: (abs(t - 1.0), t))


def evaluate_dynamic(
    params, config, stream, dcfg: DynevalConfig, temperature=1.0, on_event=None
) -> EvalReport:
    """Score the stream in segments, adapting a copy of the weights after each
    segment has been scored: theta <- theta - lr * g_hat + decay * (theta0 - theta).

    Every token is predicted by weights that never saw it.  A non-finite
    forward pass aborts adaptation and returns the report for the tokens
    scored so far, flagged partial.  on_event, if given, receives
    ("score", k) and ("update", k) callbacks in execution order.
    """
    dcfg.validate()
    stream = np.asarray(stream)
    if stream.size < 2:
        raise ValueError("evaluation stream needs at least two tokens")
    adapting = dcfg.lr > 0.0 or dcfg.decay > 0.0
    fast = copy_tree(params)
    theta0 = flatten(params)
    rows = stream[None, :]
    states = None
    total = 0.0
    count = 0
    partial = False
    for k, batch in enumerate(data_mod.windows(rows, dcfg.segment)):
        if on_event is not None:
            on_event(("score", k))
        try:
            masks = model.ones_masks(config, *batch.inputs.shape)
            log_probs, cache, states = model.forward_window(
                fast, config, batch.inputs, masks, states, temperature
            )
        except DivergenceError:
            partial = True
            break
        picked = _picked_log_probs(log_probs, batch.targets)
        for value in picked[0]:
            total -= float(value)
        count += picked.size
        if adapting:
            if on_event is not None:
                on_event(("update", k))
            _, grad_lp = model.nll_from_log_probs(log_probs, batch.targets)
            grads = model.backward_window(fast, config, cache, grad_lp)
            g = flatten(grads)
            if dcfg.norm_mode == "global":
                g = g / max(1.0, float(np.linalg.norm(g)))
            theta = flatten(fast)
            unflatten_into(fast, theta - dcfg.lr * g + dcfg.decay * (theta0 - theta))
    return make_report(total, count, temperature, dyneval=dcfg, partial=partial)


def default_dyneval_grid(segment: int):
    """Candidate adaptation settings; the first entry disables adaptation, so
    tuning can never do worse than static evaluation."""
    grid = [DynevalConfig(segment=segment, lr=0.0, decay=0.0, norm_mode="none")]
    for lr in (1e-4, 3e-4, 1e-3, 3e-3, 1e-2):
        for decay in (0.0, 0.02):
            grid.append(DynevalConfig(segment=segment, lr=lr, decay=decay, norm_mode="global"))
    return grid


def tune_dyneval(params, config, stream, grid, temperature=1.0):
    """Pick the grid entry with the lowest nats/token on the tuning stream;
    exact ties keep the earliest entry (grids put the static setting first)."""
    if not grid:
        raise ValueError("dyneval grid must be non-empty")
    best = None
    best_nats = math.inf
    for dcfg in grid:
        report = evaluate_dynamic(params, config, stream, dcfg, temperature)
        nats = report.nats_per_token if not report.partial else math.inf
        if nats < best_nats:
            best = dcfg
            best_nats = nats
    return best, best_nats
