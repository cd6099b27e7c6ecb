import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freegrad.graph import (EdgeFunction, EdgeKind, GraphBuilder, GraphError, build_conv_toy, build_lstm_cell,
                            build_mlp, build_scalar_test, forward, random_inputs, randomize_params, reverse_ad,
                            vertex_count)
from freegrad.numcore import ShapeError, finite_difference_gradient


def fd_param_grads(graph, inputs, seed_vec, h=1e-6):
    """Finite-difference gradient of sum(seed * output) for every parameter."""
    out = {}
    for name, value in graph.params.items():
        def loss(p, name=name):
            return float(np.sum(seed_vec * forward(graph, inputs, {name: p}).output))
        out[name] = finite_difference_gradient(loss, value, h)
    return out


def fd_input_grads(graph, inputs, seed_vec, h=1e-6):
    out = {}
    for name, value in inputs.items():
        def loss(x, name=name):
            return float(np.sum(seed_vec * forward(graph, {**inputs, name: x}).output))
        out[name] = finite_difference_gradient(loss, value, h)
    return out


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def identity_chain(n=4, dim=3):
    b = GraphBuilder()
    prev = b.input("x", dim)
    for i in range(n):
        prev = b.add(f"v{i}", EdgeFunction(EdgeKind.ACTIVATION), prev)
    return b.build(prev)


class TestScalarTemplate:
    def test_forward_value(self):
        out = forward(build_scalar_test(2.0), {"v0": np.array([[5.0]])}).output
        assert out[0, 0] == pytest.approx(math.tan(math.sqrt(10.0)) + math.sin(25.0), rel=1e-14)

    def test_vertex_decomposition(self):
        g = build_scalar_test()
        kinds = sorted(e.fn.kind.value for e in g.edges.values())
        assert vertex_count(g) == 6
        assert kinds == sorted(["linear-map", "sqrt", "tan", "square", "sin", "add"])

    def test_mse_gradient_wrt_input_and_theta(self):
        g = build_scalar_test(2.0)
        x = np.array([[5.0]])
        out = forward(g, {"v0": x}).output
        tape = reverse_ad(g, {"v0": x}, out - 3.0)

        def loss_v0(v):
            return 0.5 * float(np.sum((forward(g, {"v0": v}).output - 3.0) ** 2))

        def loss_theta(th):
            return 0.5 * float(np.sum((forward(g, {"v0": x}, {"theta": th}).output - 3.0) ** 2))

        assert rel_err(tape.adjoints["v0"], finite_difference_gradient(loss_v0, x, 1e-7)) < 1e-5
        assert rel_err(tape.param_grads["theta"], finite_difference_gradient(loss_theta, g.params["theta"], 1e-7)) < 1e-5


class TestChainsAndBranches:
    def test_identity_chain_forward_and_adjoints(self, rng):
        g = identity_chain()
        x = rng.standard_normal((2, 3))
        assert np.array_equal(forward(g, {"x": x}).output, x)
        seed = rng.standard_normal((2, 3))
        tape = reverse_ad(g, {"x": x}, seed)
        for v in g.order:
            assert np.array_equal(tape.adjoints[v], seed)

    def test_diamond_sums_paths(self):
        b = GraphBuilder()
        b.input("x", 1)
        b.add("s", EdgeFunction(EdgeKind.SIN), "x")
        b.add("q", EdgeFunction(EdgeKind.SQUARE), "x")
        b.add("y", EdgeFunction(EdgeKind.MULTIPLY), "s", "q")
        g = b.build("y")
        x = np.array([[0.7]])
        tape = reverse_ad(g, {"x": x}, np.ones((1, 1)))
        fd = fd_input_grads(g, {"x": x}, np.ones((1, 1)))["x"]
        hand = math.cos(0.7) * 0.49 + math.sin(0.7) * 1.4
        assert tape.adjoints["x"][0, 0] == pytest.approx(hand, rel=1e-12)
        assert rel_err(tape.adjoints["x"], fd) < 1e-7

    def test_unbound_input(self):
        with pytest.raises(GraphError, match="unbound"):
            forward(build_scalar_test(), {})

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            forward(build_mlp([3, 2]), {"x": np.ones((1, 4))})

    def test_missing_forward(self):
        with pytest.raises(GraphError):
            reverse_ad(build_mlp([3, 2]), None, np.ones((1, 2)))

    def test_cycle_free_and_reachability_checks(self):
        b = GraphBuilder()
        b.input("x", 2)
        b.param("W", np.eye(2))
        b.add("dead", EdgeFunction(EdgeKind.LINEAR, param="W"), "x")
        b.add("y", EdgeFunction(EdgeKind.SIN), "x")
        with pytest.raises(GraphError, match="cannot reach"):
            b.build("y")

    def test_unknown_parent(self):
        b = GraphBuilder()
        b.input("x", 2)
        with pytest.raises(GraphError):
            b.add("y", EdgeFunction(EdgeKind.SIN), "nope")


class TestMLP:
    def test_canonical_shapes(self):
        g = build_mlp([784, 300, 100, 10], "relu")
        assert [g.params[f"W{l}"].shape for l in (1, 2, 3)] == [(300, 784), (100, 300), (10, 100)]

    def test_single_layer_is_linear(self, rng):
        g = build_mlp([4, 3], "tanh", seed=2)
        x = rng.standard_normal((5, 4)) * 10
        np.testing.assert_allclose(forward(g, {"x": x}).output, x @ g.params["W1"].T + g.params["b1"])

    def test_zero_weights_give_zero(self):
        g = build_mlp([4, 5, 3], "relu")
        g = g.with_params({k: np.zeros_like(v) for k, v in g.params.items()})
        assert np.all(forward(g, {"x": np.ones((2, 4))}).output == 0)

    def test_matches_hand_loop(self, rng):
        g = randomize_params(build_mlp([5, 6, 4, 3], "sigmoid"), seed=4, variance=0.5)
        x = rng.standard_normal((3, 5))
        h = x
        for l in (1, 2, 3):
            a = h @ g.params[f"W{l}"].T + g.params[f"b{l}"]
            h = a if l == 3 else 1 / (1 + np.exp(-a))
        np.testing.assert_allclose(forward(g, {"x": x}).output, h, rtol=1e-13)

    def test_empty_sizes(self):
        with pytest.raises(GraphError):
            build_mlp([3])


class TestLSTM:
    def test_vertex_count(self):
        assert vertex_count(build_lstm_cell(3, 2)) == 11

    def test_zero_weights(self):
        g = build_lstm_cell(3, 2)
        g = g.with_params({k: np.zeros_like(v) for k, v in g.params.items()})
        inputs = {"h": np.zeros((1, 3)), "x": np.ones((1, 2)), "c": np.zeros((1, 3))}
        fwd = forward(g, inputs)
        # Every gate is sigmoid(0) = 1/2, candidate tanh(0) = 0, cell stays 0, output sigmoid(0).
        assert np.all(fwd.values["v2"] == 0.5) and np.all(fwd.values["v7"] == 0.0)
        assert np.all(fwd.output == 0.5)

    def test_hand_evaluation(self, rng):
        g = randomize_params(build_lstm_cell(2, 3), seed=1, variance=0.5)
        h, x, c = rng.standard_normal((1, 2)), rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
        p = g.params
        sig = lambda a: 1 / (1 + np.exp(-a))
        v1 = np.concatenate([h, x], axis=1)
        cell = c * sig(v1 @ p["theta_i"].T) + sig(v1 @ p["theta_inp"].T) * np.tanh(v1 @ p["theta_c"].T)
        y = sig((sig(v1 @ p["theta_o"].T) * np.tanh(cell)) @ p["theta_y"].T)
        np.testing.assert_allclose(forward(g, {"h": h, "x": x, "c": c}).output, y, rtol=1e-13)


def naive_conv(x, w):
    n, cin, H, W = x.shape
    cout, _, k, _ = w.shape
    out = np.zeros((n, cout, H - k + 1, W - k + 1))
    for b in range(n):
        for o in range(cout):
            for i in range(H - k + 1):
                for j in range(W - k + 1):
                    out[b, o, i, j] = np.sum(w[o] * x[b, :, i:i + k, j:j + k])
    return out


class TestConv:
    def test_unit_kernel_is_identity(self, rng):
        g = build_conv_toy(1, 1, 1, 4, activation="identity")
        g = g.with_params({"K": np.ones((1, 1, 1, 1))})
        x = rng.standard_normal((2, 1, 4, 4))
        assert np.array_equal(forward(g, {"img": x}).values["feat"], x)

    def test_delta_kernel_shifts(self, rng):
        g = build_conv_toy(1, 1, 2, 5, activation="identity")
        k = np.zeros((1, 1, 2, 2))
        k[0, 0, 1, 1] = 1.0
        x = rng.standard_normal((1, 1, 5, 5))
        feat = forward(g, {"img": x}, {"K": k}).values["feat"]
        assert np.array_equal(feat[0, 0], x[0, 0, 1:, 1:])

    def test_matches_naive_correlation(self, rng):
        g = randomize_params(build_conv_toy(2, 3, 3, 6, activation="identity"), seed=3)
        x = rng.standard_normal((2, 2, 6, 6))
        np.testing.assert_allclose(forward(g, {"img": x}).values["feat"],
                                   naive_conv(x, g.params["K"]) + g.params["kb"][None, :, None, None], rtol=1e-12)

    def test_kernel_larger_than_image(self):
        with pytest.raises(ShapeError):
            build_conv_toy(1, 1, 5, 4)


TEMPLATES = {
    "scalar": lambda: build_scalar_test(2.0),
    "mlp": lambda: build_mlp([4, 5, 3], "tanh"),
    "lstm": lambda: build_lstm_cell(3, 2),
    "conv": lambda: build_conv_toy(2, 2, 3, 5, n_out=3),
    "conv_pool": lambda: build_conv_toy(1, 2, 2, 5, n_out=2, pool=2),
}


@pytest.mark.parametrize("name", sorted(TEMPLATES))
def test_reverse_ad_matches_finite_differences(name):
    base = TEMPLATES[name]()
    for seed in range(20 if name != "conv_pool" else 5):
        g = base if name == "scalar" else randomize_params(base, seed, variance=0.5)
        inputs = random_inputs(g, batch=2, seed=seed)
        if name == "scalar":
            inputs = {"v0": np.abs(inputs["v0"]) + 0.5}
        seed_vec = np.random.default_rng(seed).standard_normal(forward(g, inputs).output.shape)
        tape = reverse_ad(g, inputs, seed_vec)
        fd = fd_param_grads(g, inputs, seed_vec)
        for p in g.params:
            assert rel_err(tape.param_grads[p], fd[p]) < 1e-4, (seed, p)
        fdi = fd_input_grads(g, inputs, seed_vec)
        for v in inputs:
            assert rel_err(tape.adjoints[v], fdi[v]) < 1e-4, (seed, v)


@given(st.integers(0, 1000))
def test_adjoint_linearity(seed):
    g = randomize_params(build_lstm_cell(2, 2), seed, variance=0.5)
    inputs = random_inputs(g, batch=2, seed=seed)
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, 2)), r.standard_normal((2, 2))
    ta, tb, tab = (reverse_ad(g, inputs, s) for s in (a, b, a + b))
    for p in g.params:
        np.testing.assert_allclose(tab.param_grads[p], ta.param_grads[p] + tb.param_grads[p], atol=1e-12)
    for v in g.order:
        np.testing.assert_allclose(tab.adjoints[v], ta.adjoints[v] + tb.adjoints[v], atol=1e-12)


@given(st.randoms(use_true_random=False))
def test_any_topological_order_gives_same_values(rnd):
    g = randomize_params(build_lstm_cell(2, 2), 0, variance=0.5)
    inputs = random_inputs(g, batch=1, seed=0)
    # Random Kahn order: repeatedly pick any ready vertex.
    done, order = set(), []
    while len(order) < len(g.order):
        ready = [v for v in g.order if v not in done and (v not in g.edges or all(p in done for p in g.edges[v].parents))]
        v = rnd.choice(ready)
        done.add(v)
        order.append(v)
    ref = forward(g, inputs).values
    alt = forward(g, inputs, order=order).values
    for v in g.order:
        assert np.array_equal(ref[v], alt[v])


def test_invalid_order_rejected():
    g = build_mlp([2, 2])
    with pytest.raises(GraphError):
        forward(g, {"x": np.ones((1, 2))}, order=list(reversed(g.order)))
