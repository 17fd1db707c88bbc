from dataclasses import replace

import numpy as np
import pytest

from odegcn.data import SynthConfig
from odegcn.optimize import TrainConfig
from odegcn.rdgcn import RdParams
from odegcn.theory import (AssumptionError, SweepConfig, TheoryConfig, discrepancy_experiment,
                           fit_window_regressor, sweep_experiment, score_pool, window_samples)

from oracles import ridge_oracle


def _small(**kw):
    base = TheoryConfig(
        source=SynthConfig(n=5, horizon=600, episode_length=60, g_pattern="symmetric-periodic", seed=3),
        seeds=3, eval_horizon=600, train=TrainConfig(max_epochs=40, patience=10))
    return replace(base, **kw)


class TestWindowRegressor:
    def test_dense_oracle(self, rng):
        h = rng.normal(size=(40, 3, 5))
        y = rng.normal(size=(40, 5))
        reg = fit_window_regressor(h, y, 0.3)
        np.testing.assert_allclose(reg.coef, ridge_oracle(h.reshape(40, -1), y, 0.3), rtol=1e-8, atol=1e-10)
        np.testing.assert_allclose(reg.predict(h) - y,
                                   np.hstack([h.reshape(40, -1), np.ones((40, 1))]) @ reg.coef - y, atol=1e-12)

    def test_realizable_zero_error(self, rng):
        h = rng.normal(size=(60, 4, 3))
        W = rng.normal(size=(12, 3))
        y = h.reshape(60, -1) @ W + 0.5
        reg = fit_window_regressor(h, y, 1e-12)
        np.testing.assert_allclose(reg.predict(h), y, atol=1e-8)

    def test_huge_lambda_shrinks(self, rng):
        h = rng.normal(size=(30, 3, 2))
        reg = fit_window_regressor(h, rng.normal(size=(30, 2)), 1e12)
        assert np.max(np.abs(reg.coef)) < 1e-9
        assert np.max(np.abs(reg.predict(h))) < 1e-8

    def test_singular_without_ridge(self):
        h = np.ones((10, 2, 2))
        with pytest.raises(np.linalg.LinAlgError):
            fit_window_regressor(h, np.ones((10, 2)), 0.0)

    def test_window_length_and_shapes(self, rng):
        with pytest.raises(ValueError):
            fit_window_regressor(rng.normal(size=(5, 1, 2)), rng.normal(size=(5, 2)), 1.0)
        with pytest.raises(ValueError):
            fit_window_regressor(rng.normal(size=(5, 3, 2)), rng.normal(size=(4, 2)), 1.0)

    def test_window_samples_skip_gaps(self):
        v = np.arange(20.0).reshape(10, 2) + 1
        m = np.ones_like(v, bool)
        m[5] = False
        h, y, idx = window_samples(v, m, 3)
        # windows may not contain row 5, and targets may not be row 5
        assert list(idx) == [2, 3, 8]
        np.testing.assert_array_equal(y[0], v[3])
        np.testing.assert_array_equal(h[-1], v[6:9])


class TestDiscrepancy:
    def test_identical_domains_near_zero(self):
        tc = _small(target_pattern="symmetric-periodic", target_period=24.0, losses=("mae",))
        rep = discrepancy_experiment(tc)["reports"]["mae"]
        assert rep.disc_rd < 0.05 and rep.disc_window < 0.05
        assert rep.pool_size == 3

    def test_zero_amplitude_near_zero(self):
        src = SynthConfig(n=5, horizon=600, episode_length=60, g_pattern="none", seed=3)
        tc = _small(source=src, target_pattern="none", target_amplitude=0.0, losses=("mae",))
        rep = discrepancy_experiment(tc)["reports"]["mae"]
        assert rep.disc_rd < 0.05 and rep.disc_window < 0.05

    def test_shifted_target_ordering(self):
        out = discrepancy_experiment(_small())
        for kind, rep in out["reports"].items():
            assert rep.disc_rd >= 0 and rep.disc_window >= 0
            assert rep.passed, kind
        assert {m for _, m, _ in out["curves"]} == {"window_ridge", "rdgcn"}

    def test_refuses_asymmetric_source(self):
        src = SynthConfig(n=5, horizon=600, episode_length=60, g_pattern="symmetric-periodic", g_offset=0.5,
                          seed=3)
        with pytest.raises(AssumptionError, match="symmetric"):
            discrepancy_experiment(_small(source=src))

    def test_mse_gated_on_positive_correlation(self):
        # a same-sign target pattern makes E[G_s G_t] > 0
        tc = _small(target_pattern="symmetric-periodic", target_period=24.0, target_amplitude=2.0)
        rep = discrepancy_experiment(tc)["reports"]["mse"]
        assert rep.gated and not rep.passed and rep.gate_note

    def test_swap_symmetry(self, rng):
        from odegcn.graph import random_one_directional
        from odegcn.theory import WindowRegressor

        g = random_one_directional(4, 4, rng)
        fitted = []
        for _ in range(3):
            ridge = WindowRegressor(3, rng.normal(size=(13, 4)) / 5, 1.0)
            p = RdParams(rng.normal(0, 0.1, 4), rng.normal(0, 0.1, 4), rng.normal(size=4), rng.normal(size=4))
            fitted.append((ridge, {"mae": (p, "")}))
        a = (rng.normal(size=(20, 3, 4)), rng.normal(size=(20, 4)))
        b = (rng.normal(size=(25, 3, 4)) + 1, rng.normal(size=(25, 4)))
        fwd = score_pool(fitted, [1, 2, 3], g, a, b, "mae")
        back = score_pool(fitted, [1, 2, 3], g, b, a, "mae")
        assert [r.abs_diff for r in fwd] == [r.abs_diff for r in back]

    def test_invalid_trial_flagged(self, rng):
        from odegcn.graph import random_one_directional
        from odegcn.theory import WindowRegressor

        g = random_one_directional(3, 2, rng)
        fitted = [(WindowRegressor(2, np.zeros((7, 3)), 1.0), {"mae": (None, "diverged")})]
        data = (rng.normal(size=(5, 2, 3)), rng.normal(size=(5, 3)))
        res = score_pool(fitted, [0], g, data, data, "mae")
        assert [r.valid for r in res] == [True, False] and res[1].note == "diverged"


class TestSampleSweep:
    def test_converges_toward_dynamics(self):
        lc = SweepConfig(source=SynthConfig(n=5, horizon=2000, episode_length=50, g_pattern="none",
                                             noise_sd=0.5, seed=8),
                          sample_sizes=(100, 2000), seeds=2, train_steps=1500, eval_samples=500)
        out = sweep_experiment(lc, "mse")
        d = [r["distance_to_F"] for r in out["rows"]]
        assert out["monotone_decreasing"] and d[1] < d[0]
        assert out["rows"][-1]["initial_distance"] >= 10 * d[-1]
