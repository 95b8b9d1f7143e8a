import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.ctrnn import (
    BaselineConfig,
    FeedforwardBaseline,
    NetworkState,
    OnlineTrainer,
    Prediction,
    RunningError,
    Topology,
    TrainConfig,
    Weights,
    bptt_gradient,
    feedforward_baseline,
    init_weights,
    load_checkpoint,
    loss,
    online_update,
    predict,
    save_checkpoint,
    step,
    train_online,
)
from flowcast.errors import ConfigError, WarmupError


def flatten(w: Weights) -> np.ndarray:
    return np.concatenate([getattr(w, f).ravel() for f in Weights.FIELDS])


def unflatten(vec: np.ndarray, template: Weights) -> Weights:
    out = template.copy()
    i = 0
    for f in Weights.FIELDS:
        arr = getattr(template, f)
        setattr(out, f, vec[i : i + arr.size].reshape(arr.shape).copy())
        i += arr.size
    return out


def unrolled_loss(vec, template, y0, inputs, targets, topo):
    """Independent forward pass used as the finite-difference oracle."""
    w = unflatten(vec, template)
    y = y0.copy()
    for x in inputs:
        y = y + topo.alpha * (np.tanh(w.w_rec @ y + w.w_in @ x + w.b_hidden) - y)
    d = w.w_out @ y + w.b_out - targets
    return float(d @ d) / len(d)


def random_instance(seed, n_in=2, n_hidden=5, k=2, steps=3):
    rng = np.random.default_rng(seed)
    topo = Topology(n_in=n_in, n_hidden=n_hidden, n_out=k, dt=0.5, tau=1.0)
    w = init_weights(topo, seed)
    y0 = rng.uniform(-0.5, 0.5, n_hidden)
    inputs = [rng.normal(0, 1, n_in) for _ in range(steps)]
    targets = rng.normal(0, 1, k)
    # reconstruct the pre-step state sequence the way a caller would hold it
    states = [NetworkState(y0)]
    y = y0
    for x in inputs[:-1]:
        y = y + topo.alpha * (np.tanh(w.w_rec @ y + w.w_in @ x + w.b_hidden) - y)
        states.append(NetworkState(y))
    return topo, w, y0, states, inputs, targets


class TestInitWeights:
    def test_deterministic(self):
        topo = Topology(3, 7, 4)
        a, b = init_weights(topo, 42), init_weights(topo, 42)
        assert a.equal(b)
        assert not a.equal(init_weights(topo, 43))

    def test_unit_fan_in_bound(self):
        topo = Topology(1, 1, 1)
        w = init_weights(topo, 0)
        assert abs(w.w_in[0, 0]) <= 1.0
        assert abs(w.w_rec[0, 0]) <= 1.0
        assert abs(w.w_out[0, 0]) <= 1.0

    def test_large_sample_mean_near_zero(self):
        topo = Topology(50, 200, 10)
        w = init_weights(topo, 7)
        s = 1.0 / np.sqrt(200)
        n = w.w_rec.size
        assert abs(w.w_rec.mean()) < 3 * s / np.sqrt(n)

    def test_biases_zero(self):
        w = init_weights(Topology(2, 3, 4), 0)
        assert np.all(w.b_hidden == 0) and np.all(w.b_out == 0)


class TestStep:
    def test_zero_fixed_point(self):
        topo = Topology(1, 4, 1)
        w = Weights.zeros(topo)
        out = step(NetworkState(np.zeros(4)), w, np.zeros(1), topo)
        assert np.all(out.y == 0)

    def test_full_relaxation_at_dt_equals_tau(self):
        topo = Topology(1, 3, 1, dt=1.0, tau=1.0)
        w = Weights.zeros(topo)
        y = np.array([0.9, -0.4, 0.1])
        out = step(NetworkState(y), w, np.zeros(1), topo)
        assert np.allclose(out.y, 0.0)

    def test_dimension_mismatch(self):
        topo = Topology(2, 3, 1)
        w = init_weights(topo, 0)
        with pytest.raises(ValueError):
            step(NetworkState(np.zeros(3)), w, np.zeros(5), topo)
        with pytest.raises(ValueError):
            step(NetworkState(np.zeros(4)), w, np.zeros(2), topo)

    def test_substep_error_shrinks_quadratically(self):
        # |1 step at dt - 2 steps at dt/2| is O(dt^2): quartering when dt halves
        rng = np.random.default_rng(2)
        w_topo = Topology(2, 6, 1, dt=0.4, tau=1.0)
        w = init_weights(w_topo, 2)
        y = NetworkState(rng.uniform(-0.5, 0.5, 6))
        x = rng.normal(0, 1, 2)

        def local_diff(dt):
            coarse = Topology(2, 6, 1, dt=dt, tau=1.0)
            fine = Topology(2, 6, 1, dt=dt / 2, tau=1.0)
            one = step(y, w, x, coarse)
            two = step(step(y, w, x, fine), w, x, fine)
            return np.linalg.norm(one.y - two.y)

        ratio = local_diff(0.4) / local_diff(0.2)
        assert 3.0 < ratio < 5.0

    def test_global_mesh_refinement_ratio(self):
        # fixed-horizon trajectory differences between successive refinements ~ 2
        rng = np.random.default_rng(3)
        n_steps, dt = 40, 0.4
        xs = [rng.normal(0, 1, 2) for _ in range(n_steps)]
        w = init_weights(Topology(2, 6, 1, dt=dt, tau=1.0), 5)

        def trajectory(substeps):
            topo = Topology(2, 6, 1, dt=dt / substeps, tau=1.0)
            y = NetworkState(np.zeros(6))
            for x in xs:
                for _ in range(substeps):
                    y = step(y, w, x, topo)
            return y.y

        t2, t4, t8 = trajectory(2), trajectory(4), trajectory(8)
        ratio = np.linalg.norm(t2 - t4) / np.linalg.norm(t4 - t8)
        assert 1.7 <= ratio <= 2.3

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), steps=st.integers(1, 50))
    def test_state_stays_bounded(self, seed, steps):
        rng = np.random.default_rng(seed)
        topo = Topology(1, 4, 1, dt=0.7, tau=1.0)
        w = init_weights(topo, seed)
        w.w_rec *= 5  # exaggerate drive; bound must still hold
        y = NetworkState(rng.uniform(-1, 1, 4))
        for _ in range(steps):
            y = step(y, w, rng.normal(0, 3, 1), topo)
            assert np.all(np.abs(y.y) <= 1.0 + 1e-12)


class TestPredict:
    def test_zero_readout(self):
        topo = Topology(1, 4, 3)
        w = Weights.zeros(topo)
        p = predict(NetworkState(np.ones(4) * 0.5), w, topo)
        assert np.all(p.values == 0)

    def test_horizon_ten(self):
        topo = Topology(1, 4, 10)
        p = predict(NetworkState(np.zeros(4)), init_weights(topo, 0), topo)
        assert p.horizon == 10 and len(p.values) == 10

    def test_bias_only_readout(self):
        topo = Topology(1, 4, 3)
        w = Weights.zeros(topo)
        w.b_out = np.array([1.5, -2.0, 0.25])
        p = predict(NetworkState(np.ones(4)), w, topo)
        assert np.array_equal(p.values, w.b_out)


class TestLoss:
    def test_perfect_fit(self):
        assert loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0

    def test_unit_offset(self):
        t = np.array([0.3, -0.1, 2.0])
        assert loss(t + 1.0, t) == pytest.approx(1.0)

    def test_matches_definitional_oracle(self):
        rng = np.random.default_rng(9)
        a, b = rng.normal(0, 1, 8), rng.normal(0, 1, 8)
        expected = sum((x - y) ** 2 for x, y in zip(a, b)) / 8
        assert loss(a, b) == pytest.approx(expected, rel=1e-14)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            loss(np.zeros(3), np.zeros(4))


class TestBpttGradient:
    def test_zero_residual_gives_zero_gradient(self):
        topo, w, y0, states, inputs, _ = random_instance(1)
        # targets = model output -> residual is exactly zero
        y = y0.copy()
        for x in inputs:
            y = y + topo.alpha * (np.tanh(w.w_rec @ y + w.w_in @ x + w.b_hidden) - y)
        targets = w.w_out @ y + w.b_out
        g = bptt_gradient(w, states, inputs, targets, topo)
        for f in Weights.FIELDS:
            assert np.all(np.abs(getattr(g, f)) < 1e-10)

    def test_readout_bias_gradient(self):
        topo, w, y0, states, inputs, targets = random_instance(4)
        y = y0.copy()
        for x in inputs:
            y = y + topo.alpha * (np.tanh(w.w_rec @ y + w.w_in @ x + w.b_hidden) - y)
        residual = w.w_out @ y + w.b_out - targets
        g = bptt_gradient(w, states, inputs, targets, topo)
        assert np.allclose(g.b_out, 2.0 / len(residual) * residual, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_finite_differences(self, seed):
        topo, w, y0, states, inputs, targets = random_instance(seed)
        g = bptt_gradient(w, states, inputs, targets, topo)
        gvec = flatten(g)
        wvec = flatten(w)
        fd = np.empty_like(wvec)
        eps = 1e-5
        for i in range(len(wvec)):
            up, dn = wvec.copy(), wvec.copy()
            up[i] += eps
            dn[i] -= eps
            fd[i] = (
                unrolled_loss(up, w, y0, inputs, targets, topo)
                - unrolled_loss(dn, w, y0, inputs, targets, topo)
            ) / (2 * eps)
        rel = np.abs(gvec - fd) / np.maximum(1e-8, np.maximum(np.abs(gvec), np.abs(fd)))
        assert rel.max() < 1e-4

    def test_insufficient_history(self):
        topo, w, _, states, inputs, targets = random_instance(0)
        with pytest.raises(WarmupError):
            bptt_gradient(w, states[:1], inputs[:1], targets, topo, depth=3)


class TestOnlineUpdate:
    def test_zero_gradient_noop(self):
        topo = Topology(1, 3, 2)
        w = init_weights(topo, 0)
        stats = Weights.zeros(topo)
        stats.w_in += 1.0
        cfg = TrainConfig()
        new_w, new_stats = online_update(w, Weights.zeros(topo), stats, cfg)
        assert new_w.equal(w)
        assert np.allclose(new_stats.w_in, cfg.adapt_decay)  # decayed toward 0

    def test_first_update_arithmetic(self):
        topo = Topology(1, 1, 1)
        w = Weights.zeros(topo)
        g = Weights.zeros(topo)
        g.w_in[0, 0] = 1.0
        cfg = TrainConfig(base_rate=0.5, adapt_decay=0.9, epsilon=0.0)
        new_w, new_stats = online_update(w, g, Weights.zeros(topo), cfg)
        assert new_stats.w_in[0, 0] == pytest.approx(0.1)
        assert new_w.w_in[0, 0] == pytest.approx(-0.5 / np.sqrt(0.1))

    def test_repeated_gradient_step_converges_to_base_rate(self):
        # scalar recurrence: stats -> g^2, step size -> base_rate
        topo = Topology(1, 1, 1)
        cfg = TrainConfig(base_rate=0.01, adapt_decay=0.9, epsilon=0.0)
        g = Weights.zeros(topo)
        g.w_in[0, 0] = 0.37
        w, stats = Weights.zeros(topo), Weights.zeros(topo)
        prev = w.w_in[0, 0]
        for i in range(200):
            w, stats = online_update(w, g, stats, cfg)
            step_size = prev - w.w_in[0, 0]
            prev = w.w_in[0, 0]
        assert step_size == pytest.approx(cfg.base_rate, rel=0.01)


class TestTrainOnline:
    def test_empty_stream(self):
        topo = Topology(1, 4, 2)
        cfg = TrainConfig(seed=5)
        result = train_online(iter(()), topo, cfg)
        assert result.error.n_terms == 0
        assert result.weights.equal(init_weights(topo, 5))

    def test_error_trace_non_decreasing(self):
        rng = np.random.default_rng(0)
        topo = Topology(1, 6, 3)
        stream = ((np.array([v]), v) for v in rng.normal(0, 1, 300))
        result = train_online(stream, topo, TrainConfig(truncation_depth=5))
        assert result.updates > 0
        assert np.all(np.diff(result.error_trace) >= 0)

    def test_deterministic_and_replay_equivalent(self):
        rng = np.random.default_rng(1)
        values = rng.normal(0, 1, 200)
        topo = Topology(1, 5, 2)
        cfg = TrainConfig(truncation_depth=4, seed=3)
        a = train_online(((np.array([v]), v) for v in values), topo, cfg)
        b = train_online(((np.array([v]), v) for v in values), topo, cfg)
        assert a.weights.equal(b.weights)
        # replaying through the trainer object step by step is the same run
        trainer = OnlineTrainer(topo, cfg)
        for v in values:
            trainer.observe(np.array([v]), v)
        assert trainer.weights.equal(a.weights)
        assert trainer.error.summed_sq_error == a.error.summed_sq_error

    def test_learns_sine_quickly(self):
        # short version of the predictive-skill run; the acceptance suite
        # exercises the full 20,000-bar configuration
        k, n = 10, 6000
        rets = np.sin(2 * np.pi * np.arange(n) / 40)
        topo = Topology(1, 16, k, dt=0.5, tau=1.0)
        trainer = OnlineTrainer(topo, TrainConfig(truncation_depth=20, base_rate=0.005, seed=1))
        preds = [trainer.observe(np.array([r]), r).values for r in rets]
        xs = np.concatenate([preds[t] for t in range(n - 2000, n - k)])
        ys = np.concatenate([rets[t + 1 : t + 1 + k] for t in range(n - 2000, n - k)])
        r = np.corrcoef(xs, ys)[0, 1]
        assert r > 0.9


class TestRunningError:
    def test_accumulates(self):
        e = RunningError()
        e.add(1.5)
        e.add(0.25)
        assert e.summed_sq_error == pytest.approx(1.75)
        assert e.n_terms == 2


class TestFeedforwardBaseline:
    def test_zero_weights_zero_prediction(self):
        model = FeedforwardBaseline(4, 3, 2, seed=0)
        model.w1[:] = 0
        model.w2[:] = 0
        assert np.allclose(model.predict(np.ones(4)), 0.0)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        model = FeedforwardBaseline(3, 4, 2, seed=8)
        X = rng.normal(0, 1, (6, 3))
        Y = rng.normal(0, 1, (6, 2))
        grads = model.gradients(X, Y)
        params = [model.w1, model.b1, model.w2, model.b2]
        eps = 1e-5
        for p, g in zip(params, grads):
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = p[idx]
                p[idx] = orig + eps
                up = model.batch_loss(X, Y)
                p[idx] = orig - eps
                dn = model.batch_loss(X, Y)
                p[idx] = orig
                fd = (up - dn) / (2 * eps)
                denom = max(1e-8, abs(fd), abs(g[idx]))
                assert abs(fd - g[idx]) / denom < 1e-4

    def test_improves_on_linear_targets(self):
        rng = np.random.default_rng(3)
        X = rng.normal(0, 1, (200, 4))
        A = rng.normal(0, 1, (2, 4))
        Y = X @ A.T
        cfg = BaselineConfig(n_hidden=12, learning_rate=0.1, epochs=400, seed=3)
        untrained = FeedforwardBaseline(4, cfg.n_hidden, 2, cfg.seed)
        before = untrained.batch_loss(X, Y)
        model = feedforward_baseline(X, Y, cfg)
        after = model.batch_loss(X, Y)
        assert after * 10 <= before


class TestCheckpoint:
    def test_round_trip_bit_exact(self):
        topo = Topology(3, 7, 4, dt=0.25, tau=(1.0, 0.5, 2.0, 1.0, 1.0, 0.7, 1.3))
        w = init_weights(topo, 11)
        w.b_hidden += np.pi  # irrational values must survive the round trip
        text = save_checkpoint(w, topo, seed=11, updates=123)
        w2, topo2, seed, updates = load_checkpoint(text)
        assert w2.equal(w)
        assert topo2 == topo
        assert (seed, updates) == (11, 123)
        # serializing again is byte-identical
        assert save_checkpoint(w2, topo2, seed, updates) == text

    def test_rejects_foreign_documents(self):
        with pytest.raises(ConfigError):
            load_checkpoint('{"format": "other"}')


class TestTopology:
    def test_invalid_dt(self):
        with pytest.raises(ConfigError):
            Topology(1, 2, 1, dt=1.5, tau=1.0)
        with pytest.raises(ConfigError):
            Topology(1, 2, 1, dt=0.0)

    def test_counts_validated(self):
        with pytest.raises(ConfigError):
            Topology(0, 2, 1)
