import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from confae import net


def rel_err(a, b):
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / denom


def seeded_net(dims, activations, seed):
    return net.init(list(dims), list(activations), seed)


def fd_input_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian of a vector map, column by column."""
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((f(x + e) - f(x - e)) / (2 * step))
    return np.stack(cols, axis=1)


def fd_param_grad(scalar_of_net, network, step=1e-5):
    """Central-difference gradient of a scalar w.r.t. every network parameter."""
    gws, gbs = [], []
    for k, layer in enumerate(network.layers):
        gw = np.zeros_like(layer.weight)
        it = np.nditer(gw, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = layer.weight[idx]
            layer.weight[idx] = orig + step
            hi = scalar_of_net(network)
            layer.weight[idx] = orig - step
            lo = scalar_of_net(network)
            layer.weight[idx] = orig
            gw[idx] = (hi - lo) / (2 * step)
            it.iternext()
        gb = np.zeros_like(layer.bias)
        for i in range(layer.bias.size):
            orig = layer.bias[i]
            layer.bias[i] = orig + step
            hi = scalar_of_net(network)
            layer.bias[i] = orig - step
            lo = scalar_of_net(network)
            layer.bias[i] = orig
            gb[i] = (hi - lo) / (2 * step)
        gws.append(gw)
        gbs.append(gb)
    return gws, gbs


class TestForward:
    def test_identity_layer(self):
        n = net.Mlp([net.Layer(np.eye(2), np.zeros(2), "identity")])
        assert np.array_equal(net.forward(n, np.array([1.0, 2.0])), [1.0, 2.0])

    def test_relu_clipping(self):
        n = net.Mlp([net.Layer(np.eye(2), np.zeros(2), "relu")])
        assert np.array_equal(net.forward(n, np.array([-1.0, 3.0])), [0.0, 3.0])

    def test_fixed_tanh_net_matches_hand_composition(self):
        w1 = np.array([[0.2, -0.4], [0.7, 0.1], [-0.3, 0.5]])
        b1 = np.array([0.1, -0.2, 0.05])
        w2 = np.array([[0.6, -0.1, 0.3], [0.2, 0.4, -0.5]])
        b2 = np.array([-0.3, 0.2])
        n = net.Mlp([net.Layer(w1, b1, "tanh"), net.Layer(w2, b2, "tanh")])
        x = np.array([0.5, -0.5])
        # hand composition, spelled out
        h = np.tanh(w1 @ x + b1)
        want = np.tanh(w2 @ h + b2)
        assert rel_err(net.forward(n, x), want) < 1e-12

    def test_batched_matches_per_sample(self):
        n = seeded_net((3, 5, 2), ("relu", "identity"), 0)
        xs = np.random.default_rng(1).normal(size=(4, 3))
        batched = net.forward(n, xs)
        for i in range(4):
            assert rel_err(batched[i], net.forward(n, xs[i])) < 1e-15

    def test_dimension_mismatch(self):
        n = seeded_net((3, 2), ("identity",), 0)
        with pytest.raises(ValueError):
            net.forward(n, np.zeros(4))

    @given(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.floats(min_value=1e-3, max_value=1e3),
    )
    @settings(max_examples=30, deadline=None)
    def test_relu_positive_homogeneity_without_bias(self, seed, alpha):
        n = seeded_net((3, 6, 2), ("relu", "relu"), seed)
        for layer in n.layers:
            layer.bias[:] = 0.0
        z = np.random.default_rng(seed).normal(size=3)
        lhs = net.forward(n, alpha * z)
        rhs = alpha * net.forward(n, z)
        assert rel_err(lhs, rhs) < 1e-12


class TestJvp:
    def test_linear_net_is_exact(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(3, 2))
        n = net.Mlp([net.Layer(w, np.zeros(3), "identity")])
        z, v = rng.normal(size=2), rng.normal(size=2)
        res = net.jvp(n, z, v)
        assert np.allclose(res.jv, w @ v, atol=0)

    def test_zero_tangent(self):
        n = seeded_net((3, 4, 2), ("tanh", "identity"), 3)
        res = net.jvp(n, np.ones(3), np.zeros(3))
        assert np.array_equal(res.jv, np.zeros(2))

    @pytest.mark.parametrize("acts", [("relu", "relu", "identity"), ("tanh", "tanh", "tanh"), ("leaky_relu", "tanh", "identity")])
    def test_matches_finite_differences(self, acts):
        n = seeded_net((3, 8, 8, 2), acts, 7)
        rng = np.random.default_rng(8)
        z = rng.normal(size=3) + 0.05  # keep away from ReLU kinks
        v = rng.normal(size=3)
        res = net.jvp(n, z, v)
        want = fd_input_jacobian(lambda x: net.forward(n, x), z) @ v
        assert rel_err(res.jv, want) < 1e-5

    def test_primal_equals_forward(self):
        n = seeded_net((2, 5, 2), ("relu", "identity"), 11)
        z = np.array([0.3, -0.7])
        res = net.jvp(n, z, np.array([1.0, 0.0]))
        assert rel_err(res.y, net.forward(n, z)) == 0


class TestVjp:
    def test_linear_net_is_exact(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(3, 2))
        n = net.Mlp([net.Layer(w, np.zeros(3), "identity")])
        u = rng.normal(size=3)
        _, jtu = net.vjp(n, rng.normal(size=2), u)
        assert np.allclose(jtu, w.T @ u, atol=0)

    def test_zero_cotangent(self):
        n = seeded_net((2, 4, 3), ("tanh", "identity"), 5)
        _, jtu = net.vjp(n, np.ones(2), np.zeros(3))
        assert np.array_equal(jtu, np.zeros(2))

    @given(st.integers(min_value=0, max_value=2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_adjoint_identity(self, seed):
        n = seeded_net((3, 6, 4, 2), ("relu", "tanh", "identity"), seed)
        rng = np.random.default_rng(seed)
        z = rng.normal(size=3)
        v = rng.normal(size=3)
        u = rng.normal(size=2)
        jv = net.jvp(n, z, v).jv
        _, jtu = net.vjp(n, z, u)
        assert abs(u @ jv - jtu @ v) <= 1e-10 * max(abs(u @ jv), 1.0)


class TestJacobian:
    def test_linear_net(self):
        rng = np.random.default_rng(6)
        w = rng.normal(size=(4, 3))
        n = net.Mlp([net.Layer(w, np.zeros(4), "identity")])
        assert np.allclose(net.jacobian(n, rng.normal(size=3)), w, atol=0)

    def test_swiss_roll_tangent_map_gram(self):
        # Linear layer whose weight equals the analytic tangent map of the
        # roll parametrization at (xi, eta); its Gram is diag(1 + xi^2, 1).
        xi = 1.0
        w = np.array(
            [
                [np.cos(xi) - xi * np.sin(xi), 0.0],
                [0.0, 1.0],
                [np.sin(xi) + xi * np.cos(xi), 0.0],
            ]
        )
        n = net.Mlp([net.Layer(w, np.zeros(3), "identity")])
        j = net.jacobian(n, np.zeros(2))
        assert np.max(np.abs(j.T @ j - np.diag([2.0, 1.0]))) < 1e-10

    def test_columns_match_finite_differences(self):
        n = seeded_net((3, 10, 5), ("tanh", "identity"), 9)
        z = np.random.default_rng(10).normal(size=3)
        j = net.jacobian(n, z)
        want = fd_input_jacobian(lambda x: net.forward(n, x), z)
        assert rel_err(j, want) < 1e-5

    def test_consistency_with_jvp(self):
        n = seeded_net((4, 7, 3), ("relu", "identity"), 12)
        rng = np.random.default_rng(13)
        z, v = rng.normal(size=4) + 0.05, rng.normal(size=4)
        j = net.jacobian(n, z)
        jv = net.jvp(n, z, v).jv
        assert rel_err(j @ v, jv) < 1e-10


class TestGradScalar:
    def test_linear_least_squares_closed_form(self):
        rng = np.random.default_rng(14)
        w = rng.normal(size=(3, 3))
        n = net.Mlp([net.Layer(w, np.zeros(3), "identity")])
        z = rng.normal(size=3)
        x = rng.normal(size=3)
        y, trace = net.forward_tape(n, z)
        resid = y[0] - x
        record = net.ScalarRecord(
            value=0.5 * float(resid @ resid), trace=trace, out_grad=resid[None, :]
        )
        grads = net.grad_scalar(n, record)
        want = np.outer(w @ z - x, z)
        assert rel_err(grads.weights[0], want) < 1e-12

    def test_constant_scalar_has_zero_gradient(self):
        n = seeded_net((2, 4, 2), ("tanh", "identity"), 15)
        _, trace = net.forward_tape(n, np.ones(2))
        record = net.ScalarRecord(value=3.0, trace=trace, out_grad=np.zeros((1, 2)))
        grads = net.grad_scalar(n, record)
        assert all(not gw.any() for gw in grads.weights)
        assert all(not gb.any() for gb in grads.biases)

    def test_missing_tape_is_a_usage_error(self):
        n = seeded_net((2, 2), ("identity",), 0)
        with pytest.raises(ValueError):
            net.grad_scalar(n, net.ScalarRecord(value=0.0, trace=None))

    @pytest.mark.parametrize(
        "acts,seed",
        [
            (("tanh", "tanh", "identity"), 16),
            (("relu", "relu", "identity"), 17),
            (("leaky_relu", "tanh", "identity"), 18),
        ],
    )
    def test_grad_of_squared_tangent_norm_matches_fd(self, acts, seed):
        n = seeded_net((3, 6, 5, 2), acts, seed)
        rng = np.random.default_rng(seed)
        z = rng.normal(size=3) + 0.1
        v = rng.choice([-1.0, 1.0], size=3)

        def scalar(network):
            return float(np.sum(net.jvp(network, z, v).jv ** 2))

        res = net.jvp(n, z, v)
        record = net.ScalarRecord(
            value=scalar(n), trace=res.trace, tan_grad=2.0 * res.jv[None, :]
        )
        grads = net.grad_scalar(n, record)
        fd_w, fd_b = fd_param_grad(scalar, n)
        for gw, fw in zip(grads.weights, fd_w):
            assert rel_err(gw, fw) < 1e-4
        for gb, fb in zip(grads.biases, fd_b):
            assert rel_err(gb, fb) < 1e-4 or (not gb.any() and np.max(np.abs(fb)) < 1e-7)

    @pytest.mark.parametrize(
        "acts,seed",
        [
            (("tanh", "tanh", "identity"), 19),
            (("relu", "tanh", "identity"), 20),
        ],
    )
    def test_grad_of_squared_pullback_norm_matches_fd(self, acts, seed):
        # d/dtheta of || J^T (J v) ||^2 exercises the full three-sweep tape.
        n = seeded_net((3, 5, 4, 2), acts, seed)
        rng = np.random.default_rng(seed)
        z = rng.normal(size=3) + 0.1
        v = rng.choice([-1.0, 1.0], size=3)

        def scalar(network):
            res = net.jvp(network, z, v, with_pullback=True)
            return float(np.sum(res.pullback**2))

        res = net.jvp(n, z, v, with_pullback=True)
        record = net.ScalarRecord(
            value=scalar(n), trace=res.trace, pull_grad=2.0 * res.pullback[None, :]
        )
        grads = net.grad_scalar(n, record)
        fd_w, fd_b = fd_param_grad(scalar, n)
        for gw, fw in zip(grads.weights, fd_w):
            assert rel_err(gw, fw) < 1e-4
        for gb, fb in zip(grads.biases, fd_b):
            assert rel_err(gb, fb) < 1e-4 or (not gb.any() and np.max(np.abs(fb)) < 1e-7)

    def test_grad_of_reconstruction_through_input_chains(self):
        # Gradient w.r.t. the input must let losses flow through an upstream
        # network: check against finite differences on the input.
        n = seeded_net((2, 6, 3), ("tanh", "identity"), 21)
        rng = np.random.default_rng(22)
        z = rng.normal(size=2)
        x = rng.normal(size=3)

        def scalar_of_input(zz):
            d = net.forward(n, zz) - x
            return float(d @ d)

        y, trace = net.forward_tape(n, z)
        _, g_in, _ = net.backward(n, trace, out_grad=2.0 * (y - x[None, :]))
        step = 1e-6
        fd = np.array(
            [
                (scalar_of_input(z + step * e) - scalar_of_input(z - step * e)) / (2 * step)
                for e in np.eye(2)
            ]
        )
        assert rel_err(g_in[0], fd) < 1e-6


class TestInit:
    def test_same_seed_is_bit_identical(self):
        a = net.init([3, 50, 2], ["relu", "identity"], 123)
        b = net.init([3, 50, 2], ["relu", "identity"], 123)
        for la, lb in zip(a.layers, b.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)

    def test_default_architecture_shapes(self):
        n = net.init([3, 50, 50, 50, 2], ["relu"] * 3 + ["identity"], 0)
        shapes = [l.weight.shape for l in n.layers]
        assert shapes == [(50, 3), (50, 50), (50, 50), (2, 50)]

    def test_he_variance_for_relu_layer(self):
        n = net.init([50, 50], ["relu"], 42)
        var = np.var(n.layers[0].weight)
        assert abs(var - 2.0 / 50) < 0.2 * (2.0 / 50)

    def test_biases_start_at_zero(self):
        n = net.init([3, 8, 2], ["tanh", "identity"], 1)
        assert all(not l.bias.any() for l in n.layers)

    def test_empty_dims_rejected(self):
        with pytest.raises(ValueError):
            net.init([3], [], 0)


class TestCheckpointFormat:
    def test_round_trip(self, tmp_path):
        n = net.init([3, 5, 2], ["relu", "identity"], 33)
        path = tmp_path / "net.json"
        net.save(n, path)
        loaded = net.load(path)
        for la, lb in zip(n.layers, loaded.layers):
            assert np.array_equal(la.weight, lb.weight)
            assert np.array_equal(la.bias, lb.bias)
            assert la.activation == lb.activation

    def test_file_carries_format_version_and_tags(self, tmp_path):
        n = net.init([2, 4, 2], ["leaky_relu", "identity"], 0)
        path = tmp_path / "net.json"
        net.save(n, path)
        obj = json.loads(path.read_text())
        assert obj["format_version"] == 1
        assert obj["dims"] == [2, 4, 2]
        assert obj["activations"] == ["leaky_relu", "identity"]

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "net.json"
        path.write_text(json.dumps({"format_version": 99}))
        with pytest.raises(ValueError):
            net.load(path)
