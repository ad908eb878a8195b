import numpy as np
import pytest

from rnnlab import cells
from rnnlab.cells import CellState, LstmCache
from rnnlab.numerics import DivergenceError, Rng, sigmoid


def random_lstm(rng, m=6, n=5, t_max=8.0):
    return cells.init_lstm_params(rng, m, n, t_max)


def random_rlstm(rng, m=6, n=5, t_max=8.0):
    return cells.init_rlstm_params(rng, m, n, t_max)


def random_state(rng, batch, n, bounded=True):
    c = rng.uniform(-1, 1, (batch, n)) if bounded else rng.uniform(-3, 3, (batch, n))
    h = rng.uniform(-1, 1, (batch, n))
    return CellState(c, h)


class TestLstmForward:
    def test_equations_recomputed_inline(self):
        rng = Rng(100)
        p = random_lstm(rng)
        state = random_state(rng, 3, 5)
        x = rng.uniform(-1, 1, (3, 6))
        new, cache = cells.lstm_forward(p, state, x, cap_input_gate=True)

        i = sigmoid(x @ p.w_ix.T + state.h @ p.w_ih.T + p.b_i)
        j = np.tanh(x @ p.w_jx.T + state.h @ p.w_jh.T + p.b_j)
        f = sigmoid(x @ p.w_fx.T + state.h @ p.w_fh.T + p.b_f)
        o = sigmoid(x @ p.w_ox.T + state.h @ p.w_oh.T + p.b_o)
        g = np.minimum(i, 1 - f)
        c = f * state.c + g * j
        assert np.allclose(new.c, c, atol=1e-13)
        assert np.allclose(new.h, o * np.tanh(c), atol=1e-13)
        assert np.allclose(cache.g, g, atol=1e-13)

    def test_uncapped_uses_raw_input_gate(self):
        rng = Rng(101)
        p = random_lstm(rng)
        state = random_state(rng, 2, 5)
        x = rng.uniform(-1, 1, (2, 6))
        _, cache = cells.lstm_forward(p, state, x, cap_input_gate=False)
        assert np.array_equal(cache.g, cache.i)

    def test_capped_state_stays_bounded(self):
        rng = Rng(102)
        p = random_lstm(rng)
        state = CellState.zeros(4, 5)
        for _ in range(200):
            x = rng.uniform(-4, 4, (4, 6))
            state, _ = cells.lstm_forward(p, state, x, cap_input_gate=True)
            assert np.max(np.abs(state.c)) <= 1.0 + 1e-12

    def test_uncapped_state_can_exceed_one(self):
        # Push i and f toward 1 so c accumulates: the cap is what bounds it.
        rng = Rng(103)
        p = random_lstm(rng)
        p.b_i[:] = 10.0
        p.b_f[:] = 10.0
        p.b_j[:] = 3.0
        state = CellState.zeros(1, 5)
        for _ in range(10):
            x = rng.uniform(-0.1, 0.1, (1, 6))
            state, _ = cells.lstm_forward(p, state, x, cap_input_gate=False)
        assert np.max(np.abs(state.c)) > 1.0

    def test_non_finite_state_raises(self):
        rng = Rng(104)
        p = random_lstm(rng)
        p.w_jx[:] = np.nan
        with pytest.raises(DivergenceError):
            cells.lstm_forward(p, CellState.zeros(1, 5), np.ones((1, 6)))


class TestRlstmForward:
    def test_equations_recomputed_inline(self):
        rng = Rng(110)
        p = random_rlstm(rng)
        state = random_state(rng, 3, 5)
        x = rng.uniform(-1, 1, (3, 6))
        mask = 0.5 + rng.random((3, 5))
        new, cache = cells.rlstm_forward(p, state, x, state_mask=mask)

        i = sigmoid(x @ p.w_ix.T + state.h @ p.w_ih.T + p.b_i)
        j = np.tanh(x @ p.w_jx.T + state.h @ p.w_jh.T + p.b_j)
        f = sigmoid((i * j) @ p.w_fu.T + state.h @ p.w_fh.T + p.b_f)
        g = np.minimum(i, 1 - f)
        c = f * state.c + g * j
        o = sigmoid((c * mask) @ p.w_oc.T + p.b_o)
        assert np.allclose(new.c, c, atol=1e-13)
        assert np.allclose(new.h, o * np.tanh(c), atol=1e-13)

    def test_forget_gate_has_no_direct_input_path(self):
        # f depends on x only through i*j; with w_fu zero, f ignores x entirely.
        rng = Rng(111)
        p = random_rlstm(rng)
        p.w_fu[:] = 0.0
        state = random_state(rng, 2, 5)
        x1 = rng.uniform(-1, 1, (2, 6))
        x2 = rng.uniform(-1, 1, (2, 6))
        _, cache1 = cells.rlstm_forward(p, state.copy(), x1)
        _, cache2 = cells.rlstm_forward(p, state.copy(), x2)
        assert np.array_equal(cache1.f, cache2.f)

    def test_output_gate_reads_masked_cell_state(self):
        rng = Rng(112)
        p = random_rlstm(rng)
        state = random_state(rng, 2, 5)
        x = rng.uniform(-1, 1, (2, 6))
        ones = np.ones((2, 5))
        mask = np.zeros((2, 5))
        no_mask, _ = cells.rlstm_forward(p, state.copy(), x, state_mask=None)
        with_ones, _ = cells.rlstm_forward(p, state.copy(), x, state_mask=ones)
        assert np.array_equal(no_mask.h, with_ones.h)
        zeroed, cache = cells.rlstm_forward(p, state.copy(), x, state_mask=mask)
        assert np.allclose(cache.o, sigmoid(np.broadcast_to(p.b_o, (2, 5))), atol=1e-14)
        assert not np.array_equal(zeroed.h, no_mask.h)

    def test_state_always_bounded(self):
        rng = Rng(113)
        p = random_rlstm(rng)
        state = CellState.zeros(4, 5)
        for _ in range(200):
            x = rng.uniform(-4, 4, (4, 6))
            state, _ = cells.rlstm_forward(p, state, x)
            assert np.max(np.abs(state.c)) <= 1.0 + 1e-12


class TestBackward:
    def _single_step_check(self, kind, cap):
        # One-step finite-difference probe; multi-step rollouts live in the
        # gradcheck suite.
        from rnnlab.numerics import finite_difference_gradient, max_relative_error
        from rnnlab.ptree import flatten, unflatten_into, zeros_like_tree

        rng = Rng(120)
        p = (random_rlstm if kind == "rlstm" else random_lstm)(rng)
        state0 = random_state(rng, 2, 5)
        x = rng.uniform(-1, 1, (2, 6))
        probe_h = rng.uniform(-1, 1, (2, 5))
        probe_c = rng.uniform(-1, 1, (2, 5))
        mask = 0.5 + rng.random((2, 5)) if kind == "rlstm" else None
        theta0 = flatten(p)

        def run():
            if kind == "rlstm":
                return cells.rlstm_forward(p, state0, x, state_mask=mask)
            return cells.lstm_forward(p, state0, x, cap_input_gate=cap)

        def loss(theta):
            unflatten_into(p, theta)
            new, _ = run()
            return float(np.sum(new.h * probe_h) + np.sum(new.c * probe_c))

        numeric = finite_difference_gradient(loss, theta0)
        unflatten_into(p, theta0)
        _, cache = run()
        grads, _, _, _ = cells.cell_backward(p, cache, probe_c, probe_h)
        assert max_relative_error(flatten(grads), numeric) < 1e-6

    def test_lstm_capped_gradients(self):
        self._single_step_check("lstm", True)

    def test_lstm_uncapped_gradients(self):
        self._single_step_check("lstm", False)

    def test_rlstm_gradients(self):
        self._single_step_check("rlstm", True)

    def test_min_subgradient_tie_goes_to_input_gate(self):
        # Doctor a cache where i == 1 - f exactly; the tie must route the
        # gate gradient to i and leave f's capping contribution at zero.
        n = 3
        i = np.full((1, n), 0.25)
        f = np.full((1, n), 0.75)
        cache = LstmCache(
            x=np.zeros((1, 2)),
            c_prev=np.zeros((1, n)),
            h_prev=np.zeros((1, n)),
            i=i,
            j=np.full((1, n), 0.5),
            f=f,
            o=np.full((1, n), 0.5),
            g=np.minimum(i, 1 - f),
            c=np.zeros((1, n)),
            tanh_c=np.zeros((1, n)),
            capped=True,
        )
        p = cells.init_lstm_params(Rng(0), 2, n, 4.0)
        grads, _, _, _ = cells.lstm_backward(p, cache, np.ones((1, n)), np.zeros((1, n)))
        # dg = c_prev-free path: dc * j = 1 * 0.5; routed to i means b_i grad
        # is nonzero and the -dg part of b_f grad is absent (df = dc*c_prev = 0).
        assert np.all(grads.b_i != 0.0)
        assert np.all(grads.b_f == 0.0)

    def test_unknown_cache_type_rejected(self):
        with pytest.raises(TypeError):
            cells.cell_backward(None, object(), None, None)


class TestInit:
    def test_chrono_forget_bias_range(self):
        rng = Rng(130)
        t_max = 50.0
        p = cells.init_lstm_params(rng, 4, 64, t_max)
        assert np.all(p.b_f >= np.log(1.0) - 1e-12)
        assert np.all(p.b_f <= np.log(t_max - 1.0) + 1e-12)
        assert np.all(p.b_i == 0) and np.all(p.b_j == 0) and np.all(p.b_o == 0)

    def test_t_max_must_exceed_two(self):
        with pytest.raises(ValueError):
            cells.init_lstm_params(Rng(0), 4, 4, 2.0)
        with pytest.raises(ValueError):
            cells.init_rlstm_params(Rng(0), 4, 4, 1.5)

    def test_weight_scale(self):
        rng = Rng(131)
        n = 100
        p = cells.init_rlstm_params(rng, n, n, 8.0)
        bound = 1.0 / np.sqrt(n)
        for w in (p.w_ix, p.w_ih, p.w_fu, p.w_oc):
            assert np.max(np.abs(w)) <= bound

    def test_dispatch(self):
        assert isinstance(cells.init_cell_params(Rng(0), 3, 3, "lstm", 5.0), cells.LstmParams)
        assert isinstance(cells.init_cell_params(Rng(0), 3, 3, "rlstm", 5.0), cells.RlstmParams)
        with pytest.raises(ValueError):
            cells.init_cell_params(Rng(0), 3, 3, "gru", 5.0)
