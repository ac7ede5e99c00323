import copy

import numpy as np
import pytest

from pfode.errors import FormatError, NumericError, ShapeError, StateError
from pfode.nn import AdamState, Mlp, TimeEmbedding, adam_step, load_params, save_params, snapshot


def random_net(rng, hidden=(32, 32, 32), data_dim=2, num_classes=2, n_freq=4):
    net = Mlp(data_dim, hidden, num_classes=num_classes, num_frequencies=n_freq, rng=rng,
              zero_final=False)
    for p in net.params:
        p[...] = rng.normal(0.0, 0.5, p.shape)
    return net


def fd_gradients(net, x, t, labels, upstream, h=1e-6):
    grads = []
    for p in net.params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = np.sum(upstream * net.predict(x, t, labels))
            p[i] = old - h
            dn = np.sum(upstream * net.predict(x, t, labels))
            p[i] = old
            g[i] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


class TestForward:
    def test_zero_final_layer(self):
        net = Mlp(2, (16, 16), num_classes=2, rng=np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((7, 2))
        assert np.array_equal(net(x, 0.3, np.zeros(7, int)), np.zeros((7, 2)))

    def test_deterministic(self):
        net = random_net(np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((5, 2))
        assert np.array_equal(net(x, 0.4, [0, 1, 2, 0, 1]), net(x, 0.4, [0, 1, 2, 0, 1]))

    def test_hand_computed_single_layer(self):
        # no hidden layer: out = [x, emb(t)] @ W + b
        net = Mlp(2, (), num_frequencies=1, rng=np.random.default_rng(0), zero_final=False)
        W = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [2.0, -1.0]])
        net.params[0][...] = W
        net.params[1][...] = [0.5, -0.5]
        # t = 0: sin(0) = 0, cos(0) = 1
        out = net(np.array([[3.0, 4.0]]), 0.0)
        np.testing.assert_allclose(out, [[3.0 + 2.0 + 0.5, 4.0 - 1.0 - 0.5]])

    def test_scalar_and_per_row_time_agree(self):
        net = random_net(np.random.default_rng(2))
        x = np.random.default_rng(3).standard_normal((4, 2))
        a = net(x, 0.25, 1)
        b = net(x, np.full(4, 0.25), 1)
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-14)

    def test_shape_and_numeric_errors(self):
        net = random_net(np.random.default_rng(0))
        with pytest.raises(ShapeError):
            net(np.zeros((3, 3)), 0.1)
        with pytest.raises(NumericError):
            net(np.array([[np.nan, 0.0]]), 0.1)

    def test_embedding_injective(self):
        emb = TimeEmbedding(8)
        t = np.linspace(0, 1, 1001)
        feats = emb(t, t.size)
        gaps = np.linalg.norm(np.diff(feats, axis=0), axis=1)
        assert gaps.min() > 0
        assert np.all(np.diff(feats[:, 8]) < 0)  # cos of the lowest frequency


class TestBackward:
    def test_scalar_linear_case(self):
        # f(w) = w * x with x = 3; no time features, no hidden layers
        net = Mlp(1, (), num_frequencies=0, rng=np.random.default_rng(0), zero_final=False)
        net.params[0][...] = 0.7
        net.forward(np.array([[3.0]]), 0.5)
        grads = net.backward(np.array([[1.0]]))
        assert grads[0][0, 0] == pytest.approx(3.0)
        assert grads[1][0] == pytest.approx(1.0)

    def test_requires_forward(self):
        net = random_net(np.random.default_rng(0))
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 2)))
        net.forward(np.zeros((1, 2)), 0.5, 0)
        net.backward(np.zeros((1, 2)))
        with pytest.raises(StateError):
            net.backward(np.zeros((1, 2)))

    def test_zero_upstream(self):
        net = random_net(np.random.default_rng(0))
        x = np.ones((3, 2))
        net.forward(x, 0.2, [0, 1, 2])
        for g in net.backward(np.zeros((3, 2))):
            assert not np.any(g)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        hidden = tuple(int(h) for h in rng.integers(3, 9, size=rng.integers(1, 4)))
        net = random_net(rng, hidden=hidden, n_freq=2)
        b = 4
        x = rng.standard_normal((b, 2))
        t = rng.uniform(0, 1, b)
        labels = rng.integers(0, 3, b)
        upstream = rng.standard_normal((b, 2))
        net.forward(x, t, labels)
        analytic = net.backward(upstream)
        numeric = fd_gradients(net, x, t, labels, upstream)
        for a, n in zip(analytic, numeric):
            assert rel_err(a, n) < 1e-5

    def test_input_gradient(self):
        rng = np.random.default_rng(5)
        net = random_net(rng)
        x = rng.standard_normal((3, 2))
        up = rng.standard_normal((3, 2))
        net.forward(x, 0.6, [0, 1, 2])
        _, dx = net.backward(up, wrt_input=True)
        h = 1e-6
        num = np.zeros_like(x)
        for i in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            num[i] = (np.sum(up * net(xp, 0.6, [0, 1, 2])) - np.sum(up * net(xm, 0.6, [0, 1, 2]))) / (2 * h)
        assert rel_err(dx, num) < 1e-6


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = [np.array([1.0, -2.0])]
        st = AdamState.for_params(p)
        adam_step(st, p, [np.zeros(2)])
        np.testing.assert_array_equal(p[0], [1.0, -2.0])
        assert st.step == 1

    def test_first_step_is_sign_step(self):
        g = np.array([0.3, -4.0, 1e-3])
        p = [np.zeros(3)]
        st = AdamState.for_params(p, lr=1e-4)
        adam_step(st, p, [g])
        expected = -1e-4 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p[0], expected, rtol=1e-12)
        np.testing.assert_allclose(p[0], -1e-4 * np.sign(g), rtol=1e-4)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        p0 = [rng.standard_normal(4)]
        g = [rng.standard_normal(4)]
        st0 = AdamState.for_params(p0)
        a_p, a_s = copy.deepcopy(p0), copy.deepcopy(st0)
        b_p, b_s = copy.deepcopy(p0), copy.deepcopy(st0)
        adam_step(a_s, a_p, g)
        adam_step(b_s, b_p, g)
        assert np.array_equal(a_p[0], b_p[0]) and np.array_equal(a_s.v[0], b_s.v[0])

    def test_shape_mismatch(self):
        p = [np.zeros(3)]
        with pytest.raises(ShapeError):
            adam_step(AdamState.for_params(p), p, [np.zeros(4)])

    def test_fits_random_target(self):
        rng = np.random.default_rng(0)
        net = Mlp(2, (64, 64), rng=rng)
        x = rng.standard_normal((32, 2))
        t = rng.uniform(0, 1, 32)
        y = rng.standard_normal((32, 2))
        st = AdamState.for_params(net.params, lr=1e-3)
        losses = []
        for _ in range(100):
            d = net.forward(x, t) - y
            losses.append(np.mean(np.sum(d * d, axis=1)))
            adam_step(st, net.params, net.backward(2 * d / 32))
        assert losses[-1] < 0.5 * losses[0]


class TestSnapshot:
    def test_isolation_and_fidelity(self):
        rng = np.random.default_rng(0)
        net = random_net(rng)
        x = rng.standard_normal((4, 2))
        snap = snapshot(net)
        before = snap(x, 0.5, 1)
        assert np.array_equal(before, net(x, 0.5, 1))
        for p in net.params:
            p += 1.0
        assert np.array_equal(snap(x, 0.5, 1), before)

    def test_idempotent(self):
        snap = snapshot(random_net(np.random.default_rng(0)))
        assert snapshot(snap) == snap

    def test_read_only(self):
        snap = snapshot(random_net(np.random.default_rng(0)))
        with pytest.raises(ValueError):
            snap.params[0][0, 0] = 1.0

    def test_blend(self):
        rng = np.random.default_rng(0)
        net = random_net(rng)
        snap = net.snapshot()
        for p in net.params:
            p += 2.0
        half = snap.blend(net, 0.5)
        np.testing.assert_allclose(half.params[0], snap.params[0] + 1.0)
        assert snap.blend(net, 0.0) == net.snapshot()


class TestSerialization:
    def test_round_trip(self, tmp_path):
        net = random_net(np.random.default_rng(0), hidden=(8, 5))
        path = tmp_path / "p.bin"
        save_params(net, path)
        blob = path.read_bytes()
        assert blob[:6] == b"PFODE1"
        widths = np.frombuffer(blob[10:10 + 4 * 4], dtype="<i4")
        assert list(widths) == [2 + 8, 8, 5, 2]
        back = load_params(path)
        x = np.random.default_rng(1).standard_normal((3, 2))
        assert np.array_equal(back(x, 0.3, 1), net(x, 0.3, 1))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.bin"
        path.write_bytes(b"NOTPF0" + b"\0" * 20)
        with pytest.raises(FormatError):
            load_params(path)

    def test_truncated(self, tmp_path):
        net = random_net(np.random.default_rng(0))
        path = tmp_path / "p.bin"
        save_params(net, path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError):
            load_params(path)
