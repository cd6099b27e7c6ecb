import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from freegrad.graph import (EdgeFunction, EdgeKind, GraphBuilder, build_conv_toy, build_lstm_cell, build_mlp,
                            build_scalar_test, forward, random_inputs, randomize_params, reverse_ad)
from freegrad.numcore import DomainError, ShapeError, activation_apply, finite_difference_gradient
from freegrad.pcnet import (ConvergenceWarning, DynConfig, GenCoordState, HierarchicalPCNet, HierState,
                            LatticeState, NonConvergenceError, PCConfig, PCState, dynamical_pc_step,
                            equilibrium_residual, full_construct_step, gen_errors, hierarchical_vfe, init_state,
                            laplace_free_energy, laplace_optimal_variance, lattice_free_energy, pc_backprop,
                            pc_infer, pc_infer_step, pc_weight_gradients, pc_weight_step, shift_operator,
                            value_directions, vfe)


class TestVFE:
    def test_zero_when_values_equal_predictions(self):
        s = PCState({"a": np.ones(3)}, {"a": np.ones(3)})
        assert vfe(s) == 0.0

    def test_unit_errors(self):
        assert vfe(PCState({"a": np.array([1.0, 1.0])}, {"a": np.zeros(2)})) == 2.0

    def test_matches_loop(self, rng):
        vals = {k: rng.standard_normal(4) for k in "abc"}
        preds = {k: rng.standard_normal(4) for k in "abc"}
        precs = {"b": rng.uniform(0.5, 2.0, 4)}
        total = 0.0
        for k in "abc":
            for i in range(4):
                p = precs[k][i] if k in precs else 1.0
                total += p * (vals[k][i] - preds[k][i]) ** 2
        assert vfe(PCState(vals, preds, precisions=precs)) == pytest.approx(total, rel=1e-12)

    @given(st.integers(0, 10_000))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        s = PCState({"a": r.standard_normal(3)}, {"a": r.standard_normal(3)})
        assert vfe(s) >= 0.0


def supervised_state(net, seed, batch=4):
    r = np.random.default_rng(seed)
    return init_state(net, r.standard_normal((batch, net.sizes[0])), r.standard_normal((batch, net.sizes[-1])))


class TestHierarchicalInference:
    def test_zero_errors_leave_state_unchanged(self, rng):
        net = HierarchicalPCNet.create([4, 5, 3], "tanh", seed=1)
        st = init_state(net, rng.standard_normal((2, 4)))  # unsupervised: bottom follows the prediction
        before = [m.copy() for m in st.mus]
        pc_infer_step(net, st, PCConfig())
        for a, b in zip(before, st.mus):
            assert np.array_equal(a, b)

    def test_linear_three_layer_direction_by_hand(self, rng):
        net = HierarchicalPCNet.create([3, 4, 2], "identity", seed=2, variance=0.5)
        mus = [rng.standard_normal((1, 3)), rng.standard_normal((1, 4)), rng.standard_normal((1, 2))]
        st = HierState(mus, (True, False, True))
        from freegrad.pcnet import _refresh
        _refresh(net, st)
        eps_mid = mus[1] - (mus[0] @ net.weights[0].T + net.biases[0])
        eps_bot = mus[2] - (mus[1] @ net.weights[1].T + net.biases[1])
        hand = -eps_mid + eps_bot @ net.weights[1]
        np.testing.assert_allclose(value_directions(net, st, PCConfig())[1], hand, rtol=1e-12)

    def test_free_energy_decreases_every_step(self):
        for seed in range(20):
            net = HierarchicalPCNet.create([5, 7, 6, 3], "tanh", seed=seed, variance=0.3)
            st = supervised_state(net, seed)
            cfg = PCConfig(inference_rate=0.1, inference_iters=100, warn=False)
            prev = hierarchical_vfe(st)
            for _ in range(100):
                pc_infer_step(net, st, cfg)
                cur = hierarchical_vfe(st)
                assert cur <= prev + 1e-12, seed
                prev = cur

    def test_supervised_clamps_both_ends(self, rng):
        net = HierarchicalPCNet.create([4, 5, 3], "tanh")
        x, t = rng.standard_normal((2, 4)), rng.standard_normal((2, 3))
        st, _, _ = pc_infer(net, init_state(net, x, t), PCConfig(warn=False))
        assert np.array_equal(st.mus[0], x) and np.array_equal(st.mus[-1], t)

    def test_bad_shapes_rejected(self):
        with pytest.raises(ShapeError):
            HierarchicalPCNet([3, 2], [np.zeros((3, 2))], [np.zeros(2)])


class TestHierarchicalLearning:
    def test_zero_errors_leave_weights_unchanged(self, rng):
        net = HierarchicalPCNet.create([4, 5, 3], "tanh", seed=1)
        st = init_state(net, rng.standard_normal((2, 4)))
        before = [w.copy() for w in net.weights]
        pc_weight_step(net, st, PCConfig(weight_rate=0.5))
        for a, b in zip(before, net.weights):
            assert np.array_equal(a, b)

    def test_backward_weights_stay_transposed(self):
        net = HierarchicalPCNet.create([5, 6, 4, 3], "tanh", seed=3, backward_weights="transpose")
        cfg = PCConfig(weight_rate=0.05, inference_iters=20, learnable_backward_weights=True, warn=False)
        for step in range(100):
            st, _, _ = pc_infer(net, supervised_state(net, step), cfg)
            pc_weight_step(net, st, cfg)
        for w, bw in zip(net.weights, net.backward_weights):
            assert np.max(np.abs(bw - w.T)) < 1e-9

    def test_transposed_backward_weights_match_plain_inference(self, rng):
        plain = HierarchicalPCNet.create([4, 5, 3], "tanh", seed=5)
        withbw = plain.copy()
        withbw.backward_weights = [w.T.copy() for w in withbw.weights]
        a = pc_infer(plain, supervised_state(plain, 0), PCConfig(warn=False))[0]
        b = pc_infer(withbw, supervised_state(withbw, 0), PCConfig(learnable_backward_weights=True, warn=False))[0]
        for x, y in zip(a.mus, b.mus):
            np.testing.assert_allclose(x, y, atol=1e-13)

    def test_error_weight_update_matches_loop(self, rng):
        net = HierarchicalPCNet.create([3, 4, 2], "tanh", seed=2, error_weights="random")
        cfg = PCConfig(error_connection_weights=True, warn=False)
        st = supervised_state(net, 1, batch=3)
        dpsi = pc_weight_gradients(net, st, cfg)["error_weights"]
        for k, e in enumerate(st.errors):
            below = st.mus[k + 1]
            loop = np.zeros((e.shape[1], below.shape[1]))
            for n in range(e.shape[0]):
                for i in range(e.shape[1]):
                    for j in range(below.shape[1]):
                        loop[i, j] -= e[n, i] * below[n, j]
            np.testing.assert_allclose(dpsi[k], loop / e.shape[0], rtol=1e-12)

    def test_error_weights_enter_the_error(self, rng):
        net = HierarchicalPCNet.create([3, 2], "identity", seed=0, error_weights="random")
        x, t = rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
        st = init_state(net, x, t)
        hand = t @ net.error_weights[0].T - (x @ net.weights[0].T + net.biases[0])
        np.testing.assert_allclose(st.errors[0], hand)


def relaxed_vs_reference(graph, inputs, seed_vec, cfg):
    ref = reverse_ad(graph, inputs, seed_vec)
    res = pc_backprop(graph, inputs, seed_vec, cfg)
    err = 0.0
    for v in graph.computed:
        err = max(err, float(np.max(np.abs(res.tape.adjoints[v] - ref.adjoints[v]))))
    for p in graph.params:
        err = max(err, float(np.max(np.abs(res.tape.param_grads[p] - ref.param_grads[p]))))
    return err, res


class TestGraphPredictiveCoding:
    def test_scalar_template_reaches_reference_adjoints(self):
        g = build_scalar_test(2.0)
        x = np.array([[5.0]])
        seed_vec = forward(g, {"v0": x}).output - 3.0
        err, res = relaxed_vs_reference(g, {"v0": x}, seed_vec, PCConfig(0.1, 2000, convergence_tol=1e-14, warn=False))
        assert err < 1e-5

    def test_identity_chain_is_constant(self, rng):
        b = GraphBuilder()
        prev = b.input("x", 3)
        for i in range(4):
            prev = b.add(f"v{i}", EdgeFunction(EdgeKind.ACTIVATION), prev)
        g = b.build(prev)
        seed_vec = rng.standard_normal((1, 3))
        res = pc_backprop(g, {"x": rng.standard_normal((1, 3))}, seed_vec,
                          PCConfig(0.5, 500, convergence_tol=1e-13))
        for v in g.computed:
            np.testing.assert_allclose(res.tape.adjoints[v], seed_vec, atol=1e-12)

    def test_mlp_budget_gives_small_divergence(self, rng):
        g = build_mlp([6, 8, 8, 4], "tanh")
        x = rng.standard_normal((2, 6))
        seed_vec = rng.standard_normal((2, 4))
        ref = reverse_ad(g, {"x": x}, seed_vec)
        res = pc_backprop(g, {"x": x}, seed_vec, PCConfig(0.1, 100, warn=False))
        for w in ("W1", "W2", "W3"):
            div = np.linalg.norm(res.tape.param_grads[w] - ref.param_grads[w]) / np.linalg.norm(ref.param_grads[w])
            assert div < 1e-3, w

    @pytest.mark.parametrize("make", [
        lambda: build_mlp([4, 5, 5, 3], "tanh"),
        lambda: build_lstm_cell(3, 2),
        lambda: build_conv_toy(2, 2, 3, 5, n_out=3, pool=None),
        lambda: build_scalar_test(2.0),
    ], ids=["mlp", "lstm", "conv", "scalar"])
    def test_equilibrium_equals_reverse_mode(self, make):
        base = make()
        cfg = PCConfig(0.2, 5000, convergence_tol=1e-12, warn=False)
        for seed in range(20):
            g = base if "v0" in base.inputs else randomize_params(base, seed, variance=0.5)
            inputs = random_inputs(g, batch=2, seed=seed)
            if "v0" in inputs:
                inputs = {"v0": np.abs(inputs["v0"]) + 0.5}
            seed_vec = np.random.default_rng(seed).standard_normal(forward(g, inputs).output.shape)
            err, res = relaxed_vs_reference(g, inputs, seed_vec, cfg)
            assert err < 1e-5, seed
            fwd = forward(g, inputs)
            assert equilibrium_residual(g, fwd, res.state.errors) < 1e-10

    def test_predictions_untouched(self, rng):
        g = build_mlp([3, 4, 2], "tanh")
        x = rng.standard_normal((2, 3))
        fwd = forward(g, {"x": x})
        snapshot = {v: fwd.values[v].copy() for v in g.computed}
        res = pc_backprop(g, {"x": x}, rng.standard_normal((2, 2)), PCConfig(warn=False), fwd=fwd)
        for v in g.computed:
            assert np.array_equal(res.state.predictions[v], snapshot[v])
            assert np.array_equal(fwd.values[v], snapshot[v])

    @pytest.mark.parametrize("eta", [0.01, 0.1, 0.5])
    def test_convergence_is_exponential(self, eta):
        g = build_scalar_test(2.0)
        x = np.array([[5.0]])
        seed_vec = forward(g, {"v0": x}).output - 3.0
        ref = reverse_ad(g, {"v0": x}, seed_vec)
        res = pc_backprop(g, {"v0": x}, seed_vec, PCConfig(eta, 3000, convergence_tol=1e-15, warn=False),
                          record=True)
        dist = np.array([max(float(np.max(np.abs(e[v] - ref.adjoints[v]))) for v in g.computed) for e in res.trace])
        keep = dist > 1e-12
        slope = np.polyfit(np.arange(len(dist))[keep], np.log(dist[keep]), 1)[0]
        assert slope < 0

    def test_non_convergence_is_reported(self, rng):
        g = build_mlp([3, 4, 4, 2], "tanh")
        x, s = rng.standard_normal((1, 3)), rng.standard_normal((1, 2))
        with pytest.raises(NonConvergenceError, match="residual"):
            pc_backprop(g, {"x": x}, s, PCConfig(0.01, 2, strict=True))
        with pytest.warns(ConvergenceWarning):
            res = pc_backprop(g, {"x": x}, s, PCConfig(0.01, 2))
        assert not res.converged and res.residual > 0

    def test_loss_gradient_shape_checked(self):
        with pytest.raises(ShapeError):
            pc_backprop(build_mlp([3, 2]), {"x": np.ones((1, 3))}, np.ones((1, 3)))

    def test_config_validation(self):
        with pytest.raises(DomainError):
            PCConfig(inference_rate=0.0)
        with pytest.raises(DomainError):
            PCConfig(inference_iters=0)


class TestDynamical:
    def test_shift_operator(self):
        a, b, c = np.ones(2), 2 * np.ones(2), 3 * np.ones(2)
        out = shift_operator([a, b, c])
        assert [o.tolist() for o in out] == [b.tolist(), c.tolist(), [0.0, 0.0]]

    def test_single_order_static_is_hierarchical_step(self, rng):
        state = GenCoordState.create(1, 3, 2, seed=4, variance=0.5)
        state.orders[0] = rng.standard_normal(3)
        y = rng.standard_normal(2)
        new = dynamical_pc_step(state, [y], DynConfig(inference_rate=0.1, dt=0.0, inner_iters=1))
        net = HierarchicalPCNet([3, 2], [state.obs_weights[0].copy()], [np.zeros(2)], "identity")
        hs = HierState([state.orders[0][None].copy(), y[None].copy()], (False, True))
        from freegrad.pcnet import _refresh
        _refresh(net, hs)
        pc_infer_step(net, hs, PCConfig(inference_rate=0.1))
        np.testing.assert_allclose(new.orders[0], hs.mus[0][0], rtol=1e-13)

    def test_perfect_sine_model_keeps_errors_tiny(self):
        w, dt = 1.0, 1e-3
        Wd, Wo = np.array([[0.0, 1.0], [-w * w, 0.0]]), np.array([[1.0, 0.0]])
        x0 = np.array([0.0, w])
        state = GenCoordState([x0, Wd @ x0, Wd @ Wd @ x0], [Wo] * 3, [Wd] * 2)

        def obs(t):
            return [np.array([np.sin(w * t)]), np.array([w * np.cos(w * t)]), np.array([-w * w * np.sin(w * t)])]

        worst = 0.0
        for i in range(1, 101):
            state = dynamical_pc_step(state, obs(i * dt), DynConfig(0.3, dt, 50))
            eo, ex, _ = gen_errors(state, obs(i * dt))
            worst = max(worst, max(float(np.linalg.norm(e)) for e in eo + ex))
        assert worst < 1e-6

    def test_too_many_observation_orders(self):
        with pytest.raises(ShapeError):
            dynamical_pc_step(GenCoordState.create(2, 2, 1), [np.zeros(1)] * 3)

    def test_orders_must_share_dimension(self):
        with pytest.raises(ShapeError):
            GenCoordState([np.zeros(2), np.zeros(3)], [np.zeros((1, 2))] * 2, [np.zeros((2, 2))])


class TestFullConstruct:
    def test_single_order_two_levels_is_hierarchical_step(self, rng):
        lat = LatticeState.create([2, 3], 1, seed=1, variance=0.5)
        lat.clamped = {(0, 0)}
        new = full_construct_step(lat, PCConfig(inference_rate=0.1))
        G = lat.G[1][0]
        net = HierarchicalPCNet([3, 2], [G.copy()], [np.zeros(2)], "tanh", output_activation="tanh")
        hs = HierState([lat.mu[1][0][None].copy(), lat.mu[0][0][None].copy()], (False, True))
        from freegrad.pcnet import _refresh
        _refresh(net, hs)
        pc_infer_step(net, hs, PCConfig(inference_rate=0.1))
        np.testing.assert_allclose(new.mu[1][0], hs.mus[0][0], rtol=1e-13)
        assert np.array_equal(new.mu[0][0], lat.mu[0][0])

    def test_single_node_has_nothing_to_do(self):
        lat = LatticeState.create([3], 1, seed=0)
        new = full_construct_step(lat)
        assert np.array_equal(new.mu[0][0], lat.mu[0][0])

    def test_zero_errors_no_update(self):
        lat = LatticeState.create([2, 3], 2, seed=0)
        lat.mu = [[np.zeros_like(m) for m in row] for row in lat.mu]
        new = full_construct_step(lat, PCConfig(inference_rate=0.5))
        for row_a, row_b in zip(new.mu, lat.mu):
            for a, b in zip(row_a, row_b):
                assert np.array_equal(a, b)

    def test_free_energy_monotone(self):
        cfg = PCConfig(inference_rate=0.01)
        for seed in range(20):
            lat = LatticeState.create([3, 4, 2], 3, seed=seed, variance=0.3)
            lat.clamped = {(0, n) for n in range(3)}
            prev = lattice_free_energy(lat)
            for _ in range(50):
                lat = full_construct_step(lat, cfg)
                cur = lattice_free_energy(lat)
                assert cur <= prev + 1e-12, seed
                prev = cur

    def test_directions_are_negative_half_gradient(self):
        lat = LatticeState.create([2, 3], 2, seed=3, variance=0.5)
        from freegrad.pcnet import full_construct_directions
        dirs = full_construct_directions(lat)
        for (i, n), d in dirs.items():
            def energy(v, i=i, n=n):
                cp = lat.copy()
                cp.mu[i][n] = v
                return lattice_free_energy(cp)
            fd = finite_difference_gradient(energy, lat.mu[i][n])
            np.testing.assert_allclose(d, -0.5 * fd, atol=1e-7)


class TestLaplace:
    def test_identity_and_diagonal(self):
        np.testing.assert_allclose(laplace_optimal_variance(np.eye(3)), np.eye(3))
        np.testing.assert_allclose(laplace_optimal_variance(np.diag([2.0, 4.0])), np.diag([0.5, 0.25]))

    @given(st.integers(0, 10_000))
    def test_inverse_of_random_pd(self, seed):
        r = np.random.default_rng(seed)
        m = r.standard_normal((4, 4))
        H = m @ m.T + 0.5 * np.eye(4)
        assert np.max(np.abs(laplace_optimal_variance(H) @ H - np.eye(4))) < 1e-10

    def test_rejects_non_pd(self):
        with pytest.raises(DomainError):
            laplace_optimal_variance(np.diag([1.0, -1.0]))
        with pytest.raises(DomainError):
            laplace_optimal_variance(np.array([[1.0, 2.0], [0.0, 1.0]]))

    def test_optimal_variance_minimises_and_leaves_mean_gradient(self, rng):
        m = rng.standard_normal((3, 3))
        H = m @ m.T + np.eye(3)
        c = rng.standard_normal(3)
        energy = lambda mu: 0.5 * float((mu - c) @ H @ (mu - c))
        hess = lambda mu: H
        sigma = laplace_optimal_variance(H)
        mu = rng.standard_normal(3)
        best = laplace_free_energy(energy, hess, mu, sigma)
        for _ in range(10):
            d = rng.standard_normal((3, 3)) * 0.01
            assert laplace_free_energy(energy, hess, mu, sigma + d @ d.T) > best
        g_with = finite_difference_gradient(lambda v: laplace_free_energy(energy, hess, v, sigma), mu)
        g_without = finite_difference_gradient(energy, mu)
        np.testing.assert_allclose(g_with, g_without, atol=1e-8)
