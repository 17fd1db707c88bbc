import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from odegcn.graph import DirectedGraph, random_one_directional
from odegcn.gradcheck import check_model, random_sir_instance
from odegcn.sirgcn import (SELF_LOGIT, DegeneratePopulationError, SirEpisode, SirModel, SirParams, SirSamples,
                           SirState, build_K, materialize_constraints, sigmoid, sir_forward, sir_loss_and_grad,
                           sir_param_count, sir_rhs)

from oracles import dense_phi, k_matrix_loop, sir_step_loop


def _random_graph(r, n):
    if n == 1:
        return DirectedGraph.from_edges(1, [])
    return random_one_directional(n, int(r.integers(n - 1, n * (n - 1) // 2 + 1)), r)


def _random_params(r, g, single=False):
    return SirParams(r.normal(0, 1, g.num_edges), r.normal(0, 1, 1 if single else g.n), r.normal(), single)


class TestConstraints:
    def test_isolated_vertex_keeps_everyone(self):
        g = DirectedGraph.from_edges(2, [(0, 1)])
        m = materialize_constraints(SirParams([0.3], [0.0, 0.0], 0.0), g)
        assert m.phi_self[1] == 1.0

    def test_equal_logits_split_half(self):
        g = DirectedGraph.from_edges(2, [(0, 1)])
        m = materialize_constraints(SirParams([SELF_LOGIT], [0.0, 0.0], 0.0), g)
        assert m.phi_self[0] == pytest.approx(0.5, abs=1e-15)
        assert m.phi_edge[0] == pytest.approx(0.5, abs=1e-15)

    @given(st.integers(1, 9), st.integers(0, 2**31 - 1))
    def test_rows_stochastic_and_bounded(self, n, seed):
        r = np.random.default_rng(seed)
        g = _random_graph(r, n)
        p = SirParams(r.normal(0, 20, g.num_edges), r.normal(0, 20, n), r.normal(0, 20))
        m = materialize_constraints(p, g)
        phi = m.dense_phi(g)
        np.testing.assert_allclose(phi.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((phi >= 0) & (phi <= 1))
        assert np.all((m.beta >= 0) & (m.beta <= 1)) and 0 <= m.gamma <= 1
        np.testing.assert_allclose(phi, dense_phi(g, p.phi_raw, SELF_LOGIT), atol=1e-14)

    def test_param_counts(self, rng):
        g = random_one_directional(47, 133, rng)
        assert sir_param_count(g) == 181 == SirModel(g).num_params
        assert sir_param_count(g, single_beta=True) == 135
        assert SirModel(g, single_beta=True).num_params == 135

    def test_single_beta_broadcast(self, rng):
        g = random_one_directional(4, 4, rng)
        m = materialize_constraints(SirParams(np.zeros(4), [0.7], 0.0, True), g)
        np.testing.assert_array_equal(m.beta, np.full(4, sigmoid(0.7)))


class TestTransformationMatrix:
    def test_scalar_case(self):
        g = DirectedGraph.from_edges(1, [])
        p = SirParams([], [0.4], 0.0)
        state = SirState([1000.0], [80.0], [0.0])
        K = build_K(p, g, state, [20.0])
        np.testing.assert_allclose(K, [[sigmoid(0.4) * 900.0 / 1000.0]])

    def test_zero_infections_give_zero(self, rng):
        g = random_one_directional(5, 6, rng)
        p = _random_params(rng, g)
        state = SirState(np.full(5, 1e4), np.zeros(5), np.zeros(5))
        np.testing.assert_array_equal(sir_forward(p, g, state, np.zeros(5)), 0.0)
        assert np.all(build_K(p, g, state, np.zeros(5)) @ np.zeros(5) == 0)

    @given(st.integers(1, 7), st.integers(0, 2**31 - 1))
    def test_triple_loop_oracle(self, n, seed):
        r = np.random.default_rng(seed)
        g = _random_graph(r, n)
        p = _random_params(r, g)
        N = r.uniform(1e3, 1e5, n)
        I = r.uniform(0, 50, n)
        state = SirState(N, r.uniform(0, 0.2, n) * N, r.uniform(0, 100, n))
        m = materialize_constraints(p, g)
        S, _ = state.susceptible(m.gamma, I)
        Phi = dense_phi(g, p.phi_raw, SELF_LOGIT)
        K = build_K(p, g, state, I)
        np.testing.assert_allclose(K, k_matrix_loop(Phi, m.beta, S, N), rtol=1e-12, atol=1e-15)
        assert np.all(K >= 0)
        np.testing.assert_allclose(sir_forward(p, g, state, I), sir_step_loop(Phi, m.beta, m.gamma, S, I, N),
                                   rtol=1e-12)

    def test_no_shared_destination_means_zero(self):
        # 0 -> 1 and 2 isolated: vertex 2 shares no destination with 0 or 1
        g = DirectedGraph.from_edges(3, [(0, 1)])
        p = SirParams([0.0], [0.0, 0.0, 0.0], 0.0)
        K = build_K(p, g, SirState(np.full(3, 100.0), np.zeros(3), np.zeros(3)), np.ones(3))
        assert K[0, 2] == K[2, 0] == K[1, 2] == K[2, 1] == 0.0

    def test_degenerate_population(self):
        g = DirectedGraph.from_edges(2, [(0, 1)])
        with pytest.raises(DegeneratePopulationError):
            build_K(SirParams([0.0], [0.0, 0.0], 0.0), g, SirState([0.0, 0.0], [0.0, 0.0], [0.0, 0.0]), [0.0, 0.0])

    def test_scalar_sir_step(self):
        g = DirectedGraph.from_edges(1, [])
        p = SirParams([], [0.2], -1.0)
        beta, gamma = sigmoid(0.2), sigmoid(-1.0)
        state = SirState([1000.0], [50.0], [30.0])
        I = 10.0
        S = 1000.0 - 10.0 - 50.0 - gamma * 30.0
        want = I + beta * S * I / 1000.0 - gamma * I
        np.testing.assert_allclose(sir_forward(p, g, state, [I]), [want], rtol=1e-14)

    def test_susceptible_clamp_counts_overshoot(self):
        state = SirState([100.0, 100.0], [99.0, 0.0], [0.0, 0.0])
        S, over = state.susceptible(0.5, [5.0, 5.0])
        np.testing.assert_array_equal(S, [0.0, 95.0])
        assert over == 1

    def test_from_history_excludes_current_step(self):
        st_ = SirState.from_history([100.0], [[1.0], [2.0], [4.0]], [0.0])
        np.testing.assert_array_equal(st_.cum_I, [3.0])

    @given(st.integers(2, 6), st.integers(0, 2**31 - 1))
    def test_beta_monotone(self, n, seed):
        r = np.random.default_rng(seed)
        g = _random_graph(r, n)
        p = _random_params(r, g)
        state = SirState(r.uniform(1e3, 1e4, n), np.zeros(n), np.zeros(n))
        I = r.uniform(0, 20, n)
        base = build_K(p, g, state, I) @ I
        j = int(r.integers(n))
        bumped = SirParams(p.phi_raw, p.beta_raw.copy(), p.gamma_raw)
        bumped.beta_raw[j] += 0.5
        assert np.all(build_K(bumped, g, state, I) @ I >= base - 1e-12)


class TestConservation:
    @pytest.mark.parametrize("seed", range(25))
    def test_rhs_sums_to_zero(self, seed):
        r = np.random.default_rng(seed)
        g = _random_graph(r, int(r.integers(1, 9)))
        N = r.uniform(1e3, 1e6, g.n)
        I = r.uniform(0, 0.1, g.n) * N
        R = r.uniform(0, 0.3, g.n) * N
        S = N - I - R
        dS, dI, dR = sir_rhs(_random_params(r, g), g, S, I, R, N)
        assert np.max(np.abs(dS + dI + dR)) <= 1e-10


class TestLossAndGrad:
    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        model, flat, smp = random_sir_instance(r, 1 + seed % 7, single_beta=seed % 3 == 0)
        err, _ = check_model(model, flat, smp, 1e-5, "mse")
        assert err <= 1e-5

    def test_gamma_gradient_sign(self):
        # beta -> 0 makes K vanish; predictions (1 - gamma) I exceed targets 0.1 I
        g = DirectedGraph.from_edges(2, [(0, 1)])
        p = SirParams([0.0], [-800.0, -800.0], -2.0)
        I = np.array([[10.0, 20.0]])
        smp = SirSamples(np.full((1, 2), 1e3), np.zeros((1, 2)), np.zeros((1, 2)), I, 0.1 * I,
                         np.ones((1, 2), bool), np.ones((1, 2), bool))
        _, grad = sir_loss_and_grad(p, g, smp, "mse")
        assert grad.gamma_raw < 0

    def test_perfect_fit_zero_grad(self, rng):
        g = random_one_directional(4, 5, rng)
        p = _random_params(rng, g)
        N = rng.uniform(1e4, 2e4, 4)
        I = [rng.uniform(5, 40, 4)]
        R0 = 0.5 * N
        for t in range(6):
            state = SirState.from_history(N, np.array(I), R0)
            I.append(sir_forward(p, g, state, I[-1]))
        ep = SirEpisode(N, R0, np.array(I))
        loss, grad = sir_loss_and_grad(p, g, [ep], "mse")
        assert loss < 1e-20
        assert np.max(np.abs(grad.flatten())) < 1e-9

    def test_empty_episodes(self, rng):
        g = random_one_directional(3, 2, rng)
        with pytest.raises(ValueError):
            sir_loss_and_grad(_random_params(rng, g), g, [], "mse")


class TestEpisodes:
    def test_samples_match_states(self, rng):
        N = np.array([500.0, 800.0])
        I = rng.uniform(1, 9, (5, 2))
        ep = SirEpisode(N, np.array([10.0, 20.0]), I, t0=3)
        s = ep.samples()
        assert len(s) == 4
        for t in range(4):
            np.testing.assert_allclose(s.cum_I[t], ep.state_at(t).cum_I)
            np.testing.assert_array_equal(s.y[t], I[t + 1])

    def test_checkpoint_round_trip(self, tmp_path, rng):
        g = random_one_directional(5, 6, rng)
        for single in (False, True):
            m = SirModel(g, single_beta=single)
            flat = rng.normal(size=m.num_params)
            m.save(tmp_path / "s.json", flat)
            assert m.load(tmp_path / "s.json").tobytes() == flat.tobytes()
        with pytest.raises(ValueError):
            SirModel(g, single_beta=False).load(tmp_path / "s.json")

    def test_sigmoid_values(self):
        assert sigmoid(0.0) == 0.5 and math.isclose(sigmoid(SELF_LOGIT), 1 / (1 + math.exp(-1)))
