import numpy as np
import pytest

from keylift import _net_numpy, net


def finite_difference_grads(loss_fn, params, h=1e-5, coords=None, rng=None):
    """Central finite differences of loss_fn() wrt flat parameter coordinates.

    Returns a list of (layer_array_index, flat_index, fd_grad).
    """
    arrays = params.arrays()
    out = []
    for which, flat_idx in coords:
        a = arrays[which]
        orig = a.flat[flat_idx]
        a.flat[flat_idx] = orig + h
        plus = loss_fn()
        a.flat[flat_idx] = orig - h
        minus = loss_fn()
        a.flat[flat_idx] = orig
        out.append((which, flat_idx, (plus - minus) / (2 * h)))
    return out


def random_coords(params, n, rng):
    arrays = params.arrays()
    coords = []
    for _ in range(n):
        which = int(rng.integers(len(arrays)))
        coords.append((which, int(rng.integers(arrays[which].size))))
    return coords


class TestInit:
    def test_single_linear_layer(self):
        p = net.init_params([4, 4], np.random.default_rng(0))
        assert len(p.weights) == 1
        assert p.weights[0].shape == (4, 4)
        np.testing.assert_array_equal(p.biases[0], np.zeros(4))
        assert p.hidden_activations == ()

    def test_seed_determinism(self):
        a = net.init_params([8, 16, 2], np.random.default_rng(5))
        b = net.init_params([8, 16, 2], np.random.default_rng(5))
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_fan_in_scaling(self):
        p = net.init_params([64, 200], np.random.default_rng(2))
        # more draws for a tight std estimate
        draws = np.concatenate(
            [net.init_params([64, 200], np.random.default_rng(s)).weights[0].ravel() for s in range(2)]
        )
        assert abs(draws.std() - 1 / np.sqrt(64)) < 0.1 / np.sqrt(64)

    def test_too_few_dims(self):
        with pytest.raises(ValueError):
            net.init_params([4], np.random.default_rng(0))


class TestTimeEmbedding:
    def test_t_zero(self):
        emb = net.TimeEmbedding(16, 100.0)
        e = net.embed_time(0.0, emb)
        np.testing.assert_array_equal(e[:8], np.zeros(8))
        np.testing.assert_array_equal(e[8:], np.ones(8))

    def test_range(self):
        emb = net.TimeEmbedding(64, 1000.0)
        for t in np.linspace(0, 1, 13):
            assert np.all(np.abs(net.embed_time(t, emb)) <= 1.0)

    def test_frequencies_decreasing_geometric(self):
        emb = net.TimeEmbedding(32, 500.0)
        w = emb.frequencies
        assert np.all(np.diff(w) < 0)
        ratios = w[1:] / w[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-12)
        assert w[0] == pytest.approx(500.0)
        assert w[-1] == pytest.approx(1.0)

    def test_lipschitz_bound(self):
        emb = net.TimeEmbedding(64, 1000.0)
        delta = 1e-4
        bound = delta * emb.frequencies.sum()
        for t in np.linspace(0, 1 - delta, 11):
            diff = np.linalg.norm(net.embed_time(t + delta, emb) - net.embed_time(t, emb))
            assert diff <= bound

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            net.TimeEmbedding(7, 100.0)

    def test_batched(self):
        emb = net.TimeEmbedding(8, 50.0)
        ts = np.array([0.0, 0.5, 1.0])
        batch = net.embed_time(ts, emb)
        assert batch.shape == (3, 8)
        np.testing.assert_array_equal(batch[0], net.embed_time(0.0, emb))


class TestForward:
    def test_zero_params_zero_output(self):
        p = net.init_params([3, 5, 2], np.random.default_rng(0))
        for W in p.weights:
            W[:] = 0
        y, _ = net.forward(p, np.ones(3))
        np.testing.assert_array_equal(y, np.zeros(2))

    def test_single_linear_layer_is_affine(self):
        rng = np.random.default_rng(4)
        p = net.init_params([6, 3], rng)
        p.biases[0][:] = rng.standard_normal(3)
        x = rng.standard_normal(6)
        y, _ = net.forward(p, x)
        np.testing.assert_allclose(y, x @ p.weights[0] + p.biases[0], atol=1e-14)

    def test_against_straight_line_evaluator(self):
        # independently coded evaluation of a 3-layer tanh net
        rng = np.random.default_rng(8)
        p = net.init_params([5, 7, 6, 2], rng)
        for b in p.biases:
            b[:] = rng.standard_normal(b.shape)
        x = rng.standard_normal(5)
        y, _ = net.forward(p, x)
        h1 = np.tanh(x @ p.weights[0] + p.biases[0])
        h2 = np.tanh(h1 @ p.weights[1] + p.biases[1])
        expected = h2 @ p.weights[2] + p.biases[2]
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_relu_stack(self):
        p = net.init_params([2, 4, 1], np.random.default_rng(1), activation="relu")
        x = np.array([1.0, -2.0])
        y, _ = net.forward(p, x)
        h = np.maximum(x @ p.weights[0] + p.biases[0], 0)
        np.testing.assert_allclose(y, h @ p.weights[1] + p.biases[1], atol=1e-14)

    def test_shape_mismatch(self):
        p = net.init_params([3, 2], np.random.default_rng(0))
        with pytest.raises(ValueError):
            net.forward(p, np.ones(4))

    def test_determinism_bitwise(self):
        p = net.init_params([9, 32, 4], np.random.default_rng(3))
        x = np.random.default_rng(10).standard_normal((7, 9))
        y1, _ = net.forward(p, x)
        y2, _ = net.forward(p, x)
        np.testing.assert_array_equal(y1, y2)


class TestBackward:
    def test_linear_layer_chain_rule(self):
        rng = np.random.default_rng(2)
        p = net.init_params([4, 3], rng)
        x = rng.standard_normal(4)
        _, cache = net.forward(p, x)
        g = rng.standard_normal(3)
        grads, gx = net.backward(p, cache, g)
        np.testing.assert_allclose(grads[0][0], np.outer(x, g), atol=1e-14)
        np.testing.assert_allclose(grads[0][1], g, atol=1e-14)
        np.testing.assert_allclose(gx, p.weights[0] @ g, atol=1e-14)

    def test_zero_grad_output(self):
        p = net.init_params([4, 8, 3], np.random.default_rng(0))
        _, cache = net.forward(p, np.ones(4))
        grads, gx = net.backward(p, cache, np.zeros(3))
        for dW, db in grads:
            np.testing.assert_array_equal(dW, 0)
            np.testing.assert_array_equal(db, 0)
        np.testing.assert_array_equal(gx, 0)

    @pytest.mark.parametrize("activation", ["tanh", "relu"])
    def test_finite_differences(self, activation):
        rng = np.random.default_rng(6)
        p = net.init_params([5, 16, 16, 3], rng, activation)
        x = rng.standard_normal((11, 5))
        target = rng.standard_normal((11, 3))

        def loss_fn():
            y, _ = net.forward(p, x)
            return float(np.mean(np.sum((y - target) ** 2, axis=1)))

        def analytic():
            y, cache = net.forward(p, x)
            grads, _ = net.backward(p, cache, 2.0 * (y - target) / x.shape[0])
            flat = []
            for dW, db in grads:
                flat.extend((dW, db))
            return flat

        coords = random_coords(p, 120, rng)
        fd = finite_difference_grads(loss_fn, p, coords=coords)
        an = analytic()
        for which, flat_idx, fd_grad in fd:
            a_grad = an[which].flat[flat_idx]
            denom = max(abs(fd_grad), abs(a_grad), 1e-8)
            assert abs(fd_grad - a_grad) / denom < 1e-4

    def test_stale_cache_rejected(self):
        p = net.init_params([4, 8, 3], np.random.default_rng(0))
        _, cache = net.forward(p, np.ones((2, 4)))
        with pytest.raises(ValueError):
            net.backward(p, cache, np.zeros((5, 3)))


class TestAdam:
    def test_zero_grads_leave_params(self):
        p = net.init_params([3, 4, 2], np.random.default_rng(0))
        before = [a.copy() for a in p.arrays()]
        state = net.init_adam(p, lr=1e-3)
        grads = [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(p.weights, p.biases)]
        net.adam_step(p, grads, state)
        assert state.step == 1
        for a, b in zip(p.arrays(), before):
            np.testing.assert_array_equal(a, b)

    def test_first_step_magnitude(self):
        # bias correction makes the first update ~ lr * sign(g)
        p = net.init_params([2, 2], np.random.default_rng(0))
        p.weights[0][:] = 0.0
        state = net.init_adam(p, lr=1e-3)
        g = np.full((2, 2), 0.37)
        net.adam_step(p, [(g, np.zeros(2))], state)
        np.testing.assert_allclose(p.weights[0], -1e-3, rtol=1e-6)

    def test_trajectory_determinism(self):
        def run():
            rng = np.random.default_rng(17)
            p = net.init_params([4, 8, 2], rng)
            state = net.init_adam(p, lr=1e-3)
            x = rng.standard_normal((16, 4))
            t = rng.standard_normal((16, 2))
            for _ in range(20):
                y, cache = net.forward(p, x)
                grads, _ = net.backward(p, cache, 2 * (y - t) / 16)
                net.adam_step(p, grads, state)
            return p

        a, b = run(), run()
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_nan_grads_poison(self):
        p = net.init_params([2, 2], np.random.default_rng(0))
        state = net.init_adam(p, lr=1e-3)
        bad = np.array([[np.nan, 0.0], [0.0, 0.0]])
        with pytest.raises(net.GradientPoisonedError):
            net.adam_step(p, [(bad, np.zeros(2))], state)


class TestWeightFiles:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(12)
        p = net.init_params([6, 32, 32, 4], rng, "relu")
        for b in p.biases:
            b[:] = rng.standard_normal(b.shape)
        path = tmp_path / "w.bin"
        net.save_params(path, p, role="angles", extra={"n_joints": 4})
        q, role, extra = net.load_params(path)
        assert role == "angles"
        assert extra == {"n_joints": 4}
        assert q.hidden_activations == ("relu", "relu")
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)

    def test_truncated_body(self, tmp_path):
        p = net.init_params([3, 2], np.random.default_rng(0))
        path = tmp_path / "w.bin"
        net.save_params(path, p, role="score")
        data = path.read_bytes()
        path.write_bytes(data[:-8])
        with pytest.raises(ValueError, match="truncated"):
            net.load_params(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"not json\n\x00\x01")
        with pytest.raises(ValueError):
            net.load_params(path)


class TestTrainMse:
    def test_learns_linear_map(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((4, 2))
        x = rng.standard_normal((256, 4))
        y = x @ A
        p = net.init_params([4, 32, 2], rng)
        log = net.train_mse(p, x, y, epochs=800, batch_size=64, lr=1e-2, rng=rng)
        assert log.epoch_losses[-1] < 1e-3
        assert log.epoch_losses[-1] < log.epoch_losses[0]

    def test_lr_drops_applied_and_deterministic(self):
        def run():
            rng = np.random.default_rng(9)
            x = rng.standard_normal((64, 3))
            y = x[:, :1]
            p = net.init_params([3, 8, 1], rng)
            net.train_mse(
                p, x, y, epochs=10, batch_size=16, lr=1e-2, rng=rng, lr_drop_epochs=(5,)
            )
            return p

        a, b = run(), run()
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_empty_dataset(self):
        p = net.init_params([3, 1], np.random.default_rng(0))
        with pytest.raises(ValueError):
            net.train_mse(p, np.zeros((0, 3)), np.zeros((0, 1)), epochs=1, batch_size=4, lr=1e-3, rng=np.random.default_rng(0))


class TestBackendEquivalence:
    """The compiled kernels must match the numpy reference."""

    kernels = pytest.importorskip("keylift._kernels")

    def test_forward_backward_adam_agree(self):
        rng = np.random.default_rng(0)
        for activation in ("tanh", "relu"):
            p = net.init_params([9, 24, 24, 5], rng, activation)
            x = np.ascontiguousarray(rng.standard_normal((13, 9)))
            y1, acts1 = _net_numpy.mlp_forward(x, p.weights, p.biases, p.act_codes)
            y2, acts2 = self.kernels.mlp_forward(x, p.weights, p.biases, p.act_codes)
            np.testing.assert_allclose(y2, y1, rtol=1e-12, atol=1e-14)
            g = np.ascontiguousarray(rng.standard_normal(y1.shape))
            dW1, db1, gx1 = _net_numpy.mlp_backward(g, p.weights, p.act_codes, acts1)
            dW2, db2, gx2 = self.kernels.mlp_backward(g, p.weights, p.act_codes, acts2)
            for a, b in zip(dW1 + db1 + [gx1], dW2 + db2 + [gx2]):
                np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-14)

    def test_adam_agrees(self):
        rng = np.random.default_rng(5)
        shapes = [(6, 4), (4,), (4, 2), (2,)]
        arrays_a = [rng.standard_normal(s) for s in shapes]
        arrays_b = [a.copy() for a in arrays_a]
        grads = [rng.standard_normal(s) for s in shapes]
        ma = [np.zeros(s) for s in shapes]
        va = [np.zeros(s) for s in shapes]
        mb = [np.zeros(s) for s in shapes]
        vb = [np.zeros(s) for s in shapes]
        for step in (1, 2, 3):
            self.kernels.adam_update(arrays_a, grads, ma, va, step, 1e-3, 0.9, 0.999, 1e-8)
            _net_numpy.adam_update(arrays_b, grads, mb, vb, step, 1e-3, 0.9, 0.999, 1e-8)
        for a, b in zip(arrays_a, arrays_b):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)

    def test_backend_reported(self):
        assert net.BACKEND in ("numpy", "compiled")
