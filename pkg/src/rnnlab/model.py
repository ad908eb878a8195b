"""The full language model: embedding, per-layer mogrified recurrent cells with
residual input sums, four dropout-mask families, tied output embedding, and the
multi-sample training objective over truncated-BPTT windows.

Layer wiring per timestep:
  x0      = embed(token) * mask_in
  layer 1 consumes mogrify(h1_masked_prev, x0)
  layer l>1 consumes mogrify(hl_masked_prev, sum of lower layers' masked outputs)
  logits  = (sum over layers of masked outputs) * mask_out @ e_out + b_out
The state mask is sampled once per window and reused at every timestep
(variational dropout); for rewired cells it is also applied to the cell state
inside the output gate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import cells, mogrifier
from .cells import CellState
from .numerics import DivergenceError, Rng, bernoulli_mask, log_softmax, log_sum_exp
from .numerics import gemm
from .ptree import accumulate, zeros_like_tree


@dataclass
class ModelConfig:
    layers: int
    state_size: int  # shared input/state width; residual sums need them equal
    vocab_size: int
    cell: str = "rlstm"  # "lstm" | "rlstm"
    cap_input_gate: bool = True  # lstm only; rlstm caps by construction
    mogrifier_rounds: int = 4
    mogrifier_rank: int = 0  # 0 = full matrices
    keep_in: float = 1.0
    keep_cell: float = 1.0
    keep_state: float = 1.0
    keep_out: float = 1.0
    tie_embeddings: bool = False
    dropout_samples: int = 1
    residual_includes_embedding: bool = False
    input_mask_rows: bool = False  # drop whole embedding vectors instead of elements
    t_max: float = math.e**3
    dtype: str = "float64"

    def validate(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.dropout_samples < 1:
            raise ValueError(f"dropout_samples must be >= 1, got {self.dropout_samples}")
        if self.cell not in ("lstm", "rlstm"):
            raise ValueError(f"cell must be 'lstm' or 'rlstm', got '{self.cell}'")
        for name in ("keep_in", "keep_cell", "keep_state", "keep_out"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ValueError(f"{name} must be in (0, 1], got {value}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got '{self.dtype}'")
        return self

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32


@dataclass
class LayerParams:
    cell: object  # LstmParams | RlstmParams
    mog: mogrifier.MogrifierParams


@dataclass
class ModelParams:
    e_in: np.ndarray  # (V, n)
    b_out: np.ndarray  # (V,)
    layers: list  # LayerParams per layer
    e_out_untied: np.ndarray | None = None  # (n, V) when not tied
    tied: bool = True

    @property
    def e_out(self) -> np.ndarray:
        # Tied mode shares storage: this is a transpose view of e_in.
        return self.e_in.T if self.tied else self.e_out_untied


@dataclass
class MaskSet:
    m_in: np.ndarray  # (T, B, n)
    m_cell: np.ndarray  # (L, T, B, n)
    m_state: np.ndarray  # (L, B, n); reused at every timestep of the window
    m_out: np.ndarray  # (T, B, n)


@dataclass
class WindowBatch:
    inputs: np.ndarray  # (B, T) token ids
    targets: np.ndarray  # (B, T) token ids, inputs shifted by one
    states: list | None = None  # per-layer CellState, None = zeros


def init_model_params(rng: Rng, config: ModelConfig) -> ModelParams:
    config.validate()
    n = config.state_size
    dtype = config.np_dtype
    scale = 1.0 / np.sqrt(n)
    e_in = rng.uniform(-scale, scale, (config.vocab_size, n)).astype(dtype)
    e_out_untied = None
    if not config.tie_embeddings:
        e_out_untied = rng.uniform(-scale, scale, (n, config.vocab_size)).astype(dtype)
    layers = []
    for _ in range(config.layers):
        cell = cells.init_cell_params(rng, n, n, config.cell, config.t_max, dtype)
        mog = mogrifier.init_mogrifier_params(
            rng, n, n, config.mogrifier_rounds, config.mogrifier_rank, dtype
        )
        layers.append(LayerParams(cell=cell, mog=mog))
    return ModelParams(
        e_in=e_in,
        b_out=np.zeros(config.vocab_size, dtype=dtype),
        layers=layers,
        e_out_untied=e_out_untied,
        tied=config.tie_embeddings,
    )


def empty_model_params(config: ModelConfig) -> ModelParams:
    """Zero-filled parameters with the exact structure init_model_params would
    produce for this config; checkpoint loading writes a flat vector into it."""
    return zeros_like_tree(init_model_params(Rng(0), config))


def zero_states(config: ModelConfig, batch: int) -> list:
    return [
        CellState.zeros(batch, config.state_size, config.np_dtype) for _ in range(config.layers)
    ]


def sample_masks(rng: Rng, config: ModelConfig, batch: int, horizon: int) -> MaskSet:
    """Fresh input/cell/output masks per timestep; one state mask per layer
    shared across the whole window."""
    n = config.state_size
    dtype = config.np_dtype
    if config.input_mask_rows:
        m_in = bernoulli_mask(rng, (horizon, batch, 1), config.keep_in)
        m_in = np.broadcast_to(m_in, (horizon, batch, n)).copy()
    else:
        m_in = bernoulli_mask(rng, (horizon, batch, n), config.keep_in)
    m_cell = bernoulli_mask(rng, (config.layers, horizon, batch, n), config.keep_cell)
    m_state = bernoulli_mask(rng, (config.layers, batch, n), config.keep_state)
    m_out = bernoulli_mask(rng, (horizon, batch, n), config.keep_out)
    return MaskSet(
        m_in.astype(dtype), m_cell.astype(dtype), m_state.astype(dtype), m_out.astype(dtype)
    )


def ones_masks(config: ModelConfig, batch: int, horizon: int) -> MaskSet:
    """Expectation of inverted dropout: deterministic evaluation masks."""
    n = config.state_size
    dtype = config.np_dtype
    return MaskSet(
        m_in=np.ones((horizon, batch, n), dtype=dtype),
        m_cell=np.ones((config.layers, horizon, batch, n), dtype=dtype),
        m_state=np.ones((config.layers, batch, n), dtype=dtype),
        m_out=np.ones((horizon, batch, n), dtype=dtype),
    )


@dataclass
class WindowCache:
    inputs: np.ndarray
    masks: MaskSet
    mog_caches: list  # [t][l]
    cell_caches: list  # [t][l]
    layer_sums: list  # [t] -> (B, n) sum of masked layer outputs
    probs: np.ndarray  # (B, T, V)
    temperature: float


def forward_window(
    params: ModelParams,
    config: ModelConfig,
    inputs: np.ndarray,
    masks: MaskSet,
    states: list | None = None,
    temperature: float = 1.0,
):
    """Run one BPTT window. Returns (log_probs (B,T,V), cache, final states)."""
    inputs = np.asarray(inputs)
    batch, horizon = inputs.shape
    if inputs.min() < 0 or inputs.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    if states is None:
        states = zero_states(config, batch)
    states = [s.copy() for s in states]
    e_out = params.e_out

    mog_caches = []
    cell_caches = []
    layer_sums = []
    all_logits = np.empty((batch, horizon, config.vocab_size), dtype=np.float64)
    for t in range(horizon):
        ids = inputs[:, t]
        x0 = params.e_in[ids] * masks.m_in[t]
        mog_t = []
        cell_t = []
        xhats = []
        for l, layer in enumerate(params.layers):
            if l == 0:
                x_in = x0
            else:
                x_in = xhats[0].copy()
                for xh in xhats[1:]:
                    x_in += xh
                if config.residual_includes_embedding:
                    x_in += x0
            h_masked_prev = states[l].h * masks.m_state[l]
            mog_h, mog_x, mog_cache = mogrifier.mogrify_forward(layer.mog, h_masked_prev, x_in)
            entry_state = CellState(states[l].c, mog_h)
            if config.cell == "rlstm":
                new_state, cell_cache = cells.rlstm_forward(
                    layer.cell, entry_state, mog_x, state_mask=masks.m_state[l]
                )
            else:
                new_state, cell_cache = cells.lstm_forward(
                    layer.cell, entry_state, mog_x, cap_input_gate=config.cap_input_gate
                )
            states[l] = new_state
            xhats.append(new_state.h * masks.m_cell[l, t])
            mog_t.append(mog_cache)
            cell_t.append(cell_cache)
        total = xhats[0].copy()
        for xh in xhats[1:]:
            total += xh
        logits = gemm(total * masks.m_out[t], e_out) + params.b_out
        if not np.all(np.isfinite(logits)):
            raise DivergenceError("non-finite logits")
        all_logits[:, t, :] = logits
        mog_caches.append(mog_t)
        cell_caches.append(cell_t)
        layer_sums.append(total)

    log_probs = log_softmax(all_logits, temperature)
    cache = WindowCache(
        inputs=inputs,
        masks=masks,
        mog_caches=mog_caches,
        cell_caches=cell_caches,
        layer_sums=layer_sums,
        probs=np.exp(log_probs),
        temperature=temperature,
    )
    return log_probs, cache, states


def backward_window(params: ModelParams, config: ModelConfig, cache: WindowCache, grad_log_probs):
    """Gradients of a scalar loss given its gradient on the log-probs.

    Backpropagation is truncated at the window start: no gradient flows into
    the carried-in states.  Tied embeddings accumulate both the input-side and
    the output-side contribution into the single e_in gradient.
    """
    batch, horizon = cache.inputs.shape
    masks = cache.masks
    grads = zeros_like_tree(params)
    e_out = params.e_out
    e_out_grad = grads.e_in.T if params.tied else grads.e_out_untied

    # d log_softmax: dlogit = (dlogp - p * sum(dlogp)) / temperature
    row_sums = np.sum(grad_log_probs, axis=-1, keepdims=True)
    dlogits = (grad_log_probs - cache.probs * row_sums) / cache.temperature

    grad_c = [np.zeros((batch, config.state_size)) for _ in range(config.layers)]
    grad_h_masked = [np.zeros((batch, config.state_size)) for _ in range(config.layers)]
    for t in range(horizon - 1, -1, -1):
        dlog_t = np.ascontiguousarray(dlogits[:, t, :])
        masked_sum = cache.layer_sums[t] * masks.m_out[t]
        e_out_grad += gemm(masked_sum.T, dlog_t)
        grads.b_out += dlog_t.sum(axis=0)
        dsum = gemm(dlog_t, e_out.T) * masks.m_out[t]

        dx_residual = np.zeros((batch, config.state_size))  # grad flowing into lower xhats
        dx0 = np.zeros((batch, config.state_size))
        for l in range(config.layers - 1, -1, -1):
            dxhat = dsum + dx_residual
            dh = dxhat * masks.m_cell[l, t] + grad_h_masked[l] * masks.m_state[l]
            cell_grads, dc_prev, dmog_h, dmog_x = cells.cell_backward(
                params.layers[l].cell, cache.cell_caches[t][l], grad_c[l], dh
            )
            accumulate(grads.layers[l].cell, cell_grads)
            mog_grads, dh_masked_prev, dx_in = mogrifier.mogrify_backward(
                params.layers[l].mog, cache.mog_caches[t][l], dmog_h, dmog_x
            )
            accumulate(grads.layers[l].mog, mog_grads)
            grad_c[l] = dc_prev
            grad_h_masked[l] = dh_masked_prev
            if l == 0:
                dx0 += dx_in
            else:
                dx_residual += dx_in
                if config.residual_includes_embedding:
                    dx0 += dx_in
        dx0_masked = dx0 * masks.m_in[t]
        np.add.at(grads.e_in, cache.inputs[:, t], dx0_masked)
    return grads


def nll_from_log_probs(log_probs, targets):
    """Mean negative log-likelihood (nats/token) and its log-prob gradient."""
    batch, horizon, _ = log_probs.shape
    rows = np.arange(batch)[:, None]
    cols = np.arange(horizon)[None, :]
    picked = log_probs[rows, cols, targets]
    count = batch * horizon
    loss = -float(np.sum(picked)) / count
    grad = np.zeros_like(log_probs)
    grad[rows, cols, targets] = -1.0 / count
    return loss, grad


def mix_sample_log_probs(sample_log_probs):
    """Combine per-sample log-probabilities of the same event by averaging the
    probabilities: log((1/D) * sum_d p_d) = logsumexp_d(log p_d) - log D."""
    stacked = np.asarray(sample_log_probs)
    return log_sum_exp(stacked, axis=0) - np.log(stacked.shape[0])


def window_loss_with_masks(params, config, batch: WindowBatch, mask_sets: list):
    """Multi-sample loss over explicit mask draws; gradients flow through all
    samples.  Carried-out states come from the first sample."""
    num_samples = len(mask_sets)
    log_probs = []
    caches = []
    final_states = None
    for masks in mask_sets:
        lp, cache, states = forward_window(params, config, batch.inputs, masks, batch.states)
        log_probs.append(lp)
        caches.append(cache)
        if final_states is None:
            final_states = states

    bsz, horizon = batch.inputs.shape
    rows = np.arange(bsz)[:, None]
    cols = np.arange(horizon)[None, :]
    picked = np.stack([lp[rows, cols, batch.targets] for lp in log_probs])  # (D, B, T)
    mixed = mix_sample_log_probs(picked)
    count = bsz * horizon
    loss = -float(np.sum(mixed)) / count

    # Weight of sample d at each token: p_d / sum_d' p_d'; sums to 1 over d.
    weights = np.exp(picked - log_sum_exp(picked, axis=0)[None, :, :])
    grads = zeros_like_tree(params)
    for d in range(num_samples):
        grad_lp = np.zeros_like(log_probs[d])
        grad_lp[rows, cols, batch.targets] = -weights[d] / count
        accumulate(grads, backward_window(params, config, caches[d], grad_lp))
    return loss, grads, final_states


def loss_multisample(params, config, batch: WindowBatch, rng: Rng, num_samples: int):
    """Average predicted probabilities over independent dropout draws.
    num_samples == 1 is exactly the standard single-sample objective."""
    if num_samples < 1:
        raise ValueError(f"num_samples must be >= 1, got {num_samples}")
    bsz, horizon = batch.inputs.shape
    mask_sets = [sample_masks(rng, config, bsz, horizon) for _ in range(num_samples)]
    return window_loss_with_masks(params, config, batch, mask_sets)


def predict_deterministic(params, config, inputs, temperature=1.0, states=None):
    """Evaluation-time forward: every mask replaced by its expectation (ones),
    logits divided by the softmax temperature.  Returns (log_probs, states)."""
    inputs = np.asarray(inputs)
    masks = ones_masks(config, *inputs.shape)
    log_probs, _, final_states = forward_window(
        params, config, inputs, masks, states, temperature
    )
    return log_probs, final_states
