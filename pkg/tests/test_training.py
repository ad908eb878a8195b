import math
import re

import numpy as np
import pytest

from rnnlab import cells, training
from rnnlab.model import ModelConfig
from rnnlab.numerics import DivergenceError, Rng
from rnnlab.ptree import flatten, global_norm, unflatten_into, zeros_like_tree
from rnnlab.training import (
    Tail,
    TrainingDiverged,
    TrainOptions,
    TtaState,
    clip_global_norm,
    radam_init,
    radam_step,
    rectification_term,
    tta_evaluate_and_swap,
    tta_init,
    tta_update,
    train,
)


def small_tree():
    return cells.init_lstm_params(Rng(42), 2, 2, 4.0)


def radam_reference(theta0, grad_seq, lr, beta1, beta2, eps):
    """Textbook form of the update, kept separate from the implementation:
    explicit exponential moving averages and the closed-form rectifier."""
    theta = theta0.copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    trajectory = []
    for t, g in enumerate(grad_seq, start=1):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        rho = rho_inf - 2.0 * t * beta2**t / (1.0 - beta2**t)
        if rho > 4.0:
            r = math.sqrt(
                (rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)
            )
            v_hat = np.sqrt(v / (1.0 - beta2**t))
            theta = theta - lr * r * m_hat / (v_hat + eps)
        else:
            theta = theta - lr * m_hat
        trajectory.append(theta.copy())
    return trajectory


class TestRAdam:
    @pytest.mark.parametrize("beta2", [0.999, 0.9])
    def test_matches_reference_trajectory(self, beta2):
        params = small_tree()
        theta0 = flatten(params)
        rng = Rng(400)
        grad_seq = [rng.uniform(-1, 1, theta0.size) for _ in range(12)]
        reference = radam_reference(theta0, grad_seq, 0.05, 0.9, beta2, 1e-8)

        state = radam_init(params, lr=0.05, beta2=beta2)
        grads = zeros_like_tree(params)
        for g, ref in zip(grad_seq, reference):
            unflatten_into(grads, g)
            radam_step(state, params, grads)
            assert np.max(np.abs(flatten(params) - ref)) < 1e-12

    def test_warmup_boundary_at_beta2_default(self):
        # With beta2 = 0.999 the rectifier stays off through step 4 and
        # switches on at step 5.
        for t in (1, 2, 3, 4):
            assert rectification_term(t, 0.999) is None
        assert rectification_term(5, 0.999) is not None

    def test_first_step_is_pure_momentum(self):
        params = small_tree()
        theta0 = flatten(params)
        g = Rng(401).uniform(-1, 1, theta0.size)
        grads = zeros_like_tree(params)
        unflatten_into(grads, g)
        state = radam_init(params, lr=0.1)
        radam_step(state, params, grads)
        assert np.allclose(flatten(params), theta0 - 0.1 * g, rtol=1e-14, atol=0)

    def test_zero_gradient_is_a_no_op_on_params(self):
        params = small_tree()
        theta0 = flatten(params)
        state = radam_init(params, lr=0.1)
        radam_step(state, params, zeros_like_tree(params))
        assert np.array_equal(flatten(params), theta0)
        assert state.step == 1
        assert np.all(state.m == 0.0) and np.all(state.v == 0.0)

    def test_non_finite_gradient_leaves_state_untouched(self):
        params = small_tree()
        theta0 = flatten(params)
        state = radam_init(params, lr=0.1)
        good = zeros_like_tree(params)
        unflatten_into(good, Rng(402).uniform(-1, 1, theta0.size))
        radam_step(state, params, good)
        m_before = state.m.copy()
        v_before = state.v.copy()
        theta_before = flatten(params)

        bad = zeros_like_tree(params)
        bad_vec = np.ones(theta0.size)
        bad_vec[3] = np.nan
        unflatten_into(bad, bad_vec)
        with pytest.raises(DivergenceError):
            radam_step(state, params, bad)
        assert state.step == 1
        assert np.array_equal(state.m, m_before)
        assert np.array_equal(state.v, v_before)
        assert np.array_equal(flatten(params), theta_before)

        bad_vec[3] = np.inf
        unflatten_into(bad, bad_vec)
        with pytest.raises(DivergenceError):
            radam_step(state, params, bad)
        assert state.step == 1


class TestClip:
    def test_below_threshold_unchanged(self):
        grads = small_tree()
        before = flatten(grads)
        norm = clip_global_norm(grads, max_norm=1e9)
        assert norm == pytest.approx(float(np.linalg.norm(before)), rel=1e-12)
        assert np.array_equal(flatten(grads), before)

    def test_above_threshold_scaled_to_max(self):
        grads = small_tree()
        before = flatten(grads)
        target = 0.25 * float(np.linalg.norm(before))
        returned = clip_global_norm(grads, max_norm=target)
        assert returned == pytest.approx(float(np.linalg.norm(before)), rel=1e-12)
        assert global_norm(grads) == pytest.approx(target, rel=1e-12)
        # Direction preserved: scaled vector is parallel to the original.
        after = flatten(grads)
        assert np.allclose(after / target, before / returned, rtol=1e-10, atol=1e-15)

    def test_zero_max_norm_disables(self):
        grads = small_tree()
        before = flatten(grads)
        clip_global_norm(grads, max_norm=0.0)
        assert np.array_equal(flatten(grads), before)


class TestTailAveraging:
    def test_running_means_match_brute_force(self):
        params = small_tree()
        state = tta_init(params)
        rng = Rng(410)
        seen = []
        for _ in range(7):
            unflatten_into(params, rng.uniform(-1, 1, flatten(params).size))
            seen.append(flatten(params))
            tta_update(state, params)
        stack = np.stack(seen)
        assert np.allclose(state.long.mean, stack.mean(axis=0), atol=1e-14)
        assert np.allclose(state.short.mean, stack.mean(axis=0), atol=1e-14)
        assert state.long.count == state.short.count == 7
        assert state.step == 7

    def test_swap_promotes_improving_short_tail(self):
        size = flatten(small_tree()).size
        target = np.ones(size)
        params = small_tree()
        state = tta_init(params)
        # Early iterates far from the target, later ones close: make the two
        # tails differ by swapping once in between.
        iterates = [np.full(size, 10.0), np.full(size, 8.0), np.full(size, 0.9), target.copy()]
        loss = lambda w: float(np.sum((w - target) ** 2))

        for w in iterates[:2]:
            unflatten_into(params, w)
            tta_update(state, params)
        tta_evaluate_and_swap(state, loss)  # equal tails: promote + reset short
        assert state.short.count == 0 and state.short.start == 2
        for w in iterates[2:]:
            unflatten_into(params, w)
            tta_update(state, params)

        # short now averages the last two iterates only; long all four.
        assert np.allclose(state.short.mean, np.stack(iterates[2:]).mean(axis=0), atol=1e-14)
        assert np.allclose(state.long.mean, np.stack(iterates).mean(axis=0), atol=1e-14)

        best, best_loss, state = tta_evaluate_and_swap(state, loss)
        expect_short = np.stack(iterates[2:]).mean(axis=0)
        assert np.allclose(best, expect_short, atol=1e-14)
        assert best_loss == pytest.approx(loss(expect_short), rel=1e-12)
        # Promotion: long inherits the short tail, short restarts empty.
        assert np.allclose(state.long.mean, expect_short, atol=1e-14)
        assert state.long.start == 2 and state.long.count == 2
        assert state.short.count == 0 and state.short.start == 4
        assert np.all(state.short.mean == 0.0)

    def test_worse_short_tail_keeps_long(self):
        size = flatten(small_tree()).size
        target = np.zeros(size)
        params = small_tree()
        state = tta_init(params)
        loss = lambda w: float(np.sum((w - target) ** 2))
        unflatten_into(params, np.zeros(size))
        tta_update(state, params)
        tta_evaluate_and_swap(state, loss)
        # Post-swap iterates drift away from the target: short is worse.
        for value in (5.0, 7.0):
            unflatten_into(params, np.full(size, value))
            tta_update(state, params)
        best, best_loss, state = tta_evaluate_and_swap(state, loss)
        long_before_mean = state.long.mean.copy()
        assert best_loss == pytest.approx(loss(state.long.mean), rel=1e-12)
        assert np.allclose(best, long_before_mean, atol=1e-14)
        # No promotion: the short tail keeps accumulating.
        assert state.short.count == 2

    def test_tie_counts_as_swap(self):
        params = small_tree()
        state = tta_init(params)
        tta_update(state, params)
        _, _, state = tta_evaluate_and_swap(state, lambda w: 1.0)
        assert state.short.count == 0 and state.long.count == 1

    def test_empty_tail_rejected(self):
        params = small_tree()
        state = tta_init(params)
        with pytest.raises(ValueError):
            tta_evaluate_and_swap(state, lambda w: 0.0)
        tta_update(state, params)
        _, _, state = tta_evaluate_and_swap(state, lambda w: 0.0)
        with pytest.raises(ValueError):
            tta_evaluate_and_swap(state, lambda w: 0.0)

    def test_averaging_beats_last_iterate_on_noisy_sequence(self):
        # Iterates hover around an optimum with persistent noise; the tail
        # mean lands closer to the optimum than any single late iterate.
        size = 20
        target = np.linspace(-1, 1, size)
        rng = Rng(411)
        params = small_tree()
        state = TtaState(
            long=Tail(np.zeros(size), 0, 0), short=Tail(np.zeros(size), 0, 0), step=0
        )
        last = None
        for _ in range(64):
            last = target + 0.5 * rng.uniform(-1, 1, size)
            state.step += 1
            for tail in (state.long, state.short):
                tail.count += 1
                tail.mean += (last - tail.mean) / tail.count
        dist_mean = np.linalg.norm(state.long.mean - target)
        dist_last = np.linalg.norm(last - target)
        assert dist_mean < dist_last


def pattern_stream(length, period=4):
    return np.arange(length) % period


def tiny_train_config(**overrides):
    base = dict(layers=1, state_size=8, vocab_size=4, cell="rlstm", mogrifier_rounds=2)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_train_opts(**overrides):
    base = dict(
        lr=5e-3,
        batch_size=2,
        window=4,
        epochs=1,
        val_batch_size=2,
        val_window=8,
    )
    base.update(overrides)
    return TrainOptions(**base)


class TestTrainLoop:
    def test_same_seed_bitwise_identical(self):
        def run():
            result = train(
                tiny_train_config(),
                tiny_train_opts(epochs=2, val_interval=5),
                pattern_stream(120),
                pattern_stream(40),
                Rng(500),
            )
            return flatten(result.params), result.metrics_lines, result.best_val_nats

        p1, lines1, best1 = run()
        p2, lines2, best2 = run()
        assert np.array_equal(p1, p2)
        assert lines1 == lines2
        assert best1 == best2

    def test_learns_predictable_stream(self):
        result = train(
            tiny_train_config(),
            tiny_train_opts(epochs=6, lr=1e-2),
            pattern_stream(240),
            pattern_stream(80),
            Rng(501),
        )
        assert result.best_val_nats < np.log(4)
        assert result.stop_reason == "completed"
        assert result.steps > 0

    def test_metrics_line_format(self):
        result = train(
            tiny_train_config(),
            tiny_train_opts(epochs=1, val_interval=4),
            pattern_stream(80),
            pattern_stream(40),
            Rng(502),
        )
        val_lines = [l for l in result.metrics_lines if l.startswith("event=val ")]
        assert val_lines
        pattern = re.compile(
            r"^event=val step=(\d+) epoch=(\d+) train_nats=(\S+) val_nats=(\S+) "
            r"tta_nats=(\S+) lr=(\S+) restarts=(\d+)$"
        )
        for line in val_lines:
            match = pattern.match(line)
            assert match is not None, line
            # repr round-trips: every float field parses back.
            for idx in (3, 4, 5, 6):
                float(match.group(idx))

    def test_nan_loss_restores_best_bitwise_and_decays_lr(self):
        opts = tiny_train_opts(epochs=1, val_interval=3, lr=4e-3)
        # Stream sized for exactly 6 windows per epoch at window=4, batch=2:
        # rows length 26, (26 - 2) // 4 + 1 = 7 windows.
        stream = pattern_stream(52)

        def hook(step, loss):
            return float("nan") if step == 7 else loss

        result = train(
            tiny_train_config(),
            opts,
            stream,
            pattern_stream(40),
            Rng(503),
            loss_hook=hook,
        )
        assert result.restarts == 1
        restart_lines = [l for l in result.metrics_lines if l.startswith("event=restart ")]
        assert len(restart_lines) == 1 and "step=7" in restart_lines[0]
        assert result.radam.lr == pytest.approx(0.9 * 4e-3, rel=1e-15)
        # Step 7 was the last window, so the parameters at exit are exactly
        # the restored best snapshot.
        assert np.array_equal(flatten(result.params), result.best.params_flat)
        # Re-validating the restored weights reproduces the recorded best.
        final_val = [l for l in result.metrics_lines if " event=val" in l or l.startswith("event=val ")][-1]
        recorded = float(re.search(r"val_nats=(\S+)", final_val).group(1))
        assert recorded == result.best_val_nats

    def test_loss_spike_above_divergence_factor_restarts(self):
        def hook(step, loss):
            return 1e6 if step == 4 else loss

        result = train(
            tiny_train_config(),
            tiny_train_opts(epochs=1, val_interval=3),
            pattern_stream(80),
            pattern_stream(40),
            Rng(504),
            loss_hook=hook,
        )
        assert result.restarts == 1
        cause = [l for l in result.metrics_lines if l.startswith("event=restart ")][0]
        assert "above" in cause

    def test_repeated_divergence_raises(self):
        def hook(step, loss):
            return float("nan")

        with pytest.raises(TrainingDiverged, match="diverged 3 times"):
            train(
                tiny_train_config(),
                tiny_train_opts(max_restarts=2),
                pattern_stream(80),
                pattern_stream(40),
                Rng(505),
                loss_hook=hook,
            )

    def test_target_val_stops_early(self):
        result = train(
            tiny_train_config(),
            tiny_train_opts(epochs=50, val_interval=2, target_val_nats=10.0),
            pattern_stream(80),
            pattern_stream(40),
            Rng(506),
        )
        assert result.stop_reason == "early_stop"
        assert result.steps == 2

    def test_patience_stops_when_no_improvement(self):
        # A step too small to move any weight in float64 freezes validation
        # loss, so the second validation trips patience=1.
        result = train(
            tiny_train_config(),
            tiny_train_opts(epochs=50, val_interval=2, lr=1e-30, patience=1),
            pattern_stream(80),
            pattern_stream(40),
            Rng(507),
        )
        assert result.stop_reason == "early_stop"
        assert result.steps == 4

    def test_time_budget_stops(self):
        result = train(
            tiny_train_config(),
            tiny_train_opts(epochs=1000, max_train_seconds=1e-9),
            pattern_stream(80),
            pattern_stream(40),
            Rng(508),
        )
        assert result.stop_reason == "time_budget"
        assert result.steps == 1
        # The interrupted run still reports a final validation.
        assert any(l.startswith("event=val ") for l in result.metrics_lines)

    def test_stream_too_short(self):
        # Three tokens split over two rows leave single-column rows: no
        # window has both an input and a target.
        with pytest.raises(ValueError, match="too short"):
            train(
                tiny_train_config(),
                tiny_train_opts(),
                pattern_stream(3),
                pattern_stream(8),
                Rng(509),
            )

    def test_options_validation(self):
        with pytest.raises(ValueError):
            TrainOptions(lr=0.0).validate()
        with pytest.raises(ValueError):
            TrainOptions(epochs=0).validate()
        with pytest.raises(ValueError):
            TrainOptions(divergence_factor=1.0).validate()
        with pytest.raises(ValueError):
            TrainOptions(max_restarts=-1).validate()
