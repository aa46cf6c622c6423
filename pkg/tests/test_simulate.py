import numpy as np
import pytest
from scipy.special import ndtri

import multisource as ms
from multisource import simulate as sim


class TestPresets:
    def test_all_presets_buildable(self):
        for name in sim.PRESETS:
            s = ms.get_scenario(name, N=200, n_reps=2)
            assert s.N == 200 and s.n_reps == 2
            assert len(s.fractions) == s.layout().n_sources

    def test_unknown_preset_lists_available(self):
        with pytest.raises(KeyError, match="scenario1"):
            ms.get_scenario("scenario99")

    def test_censoring_scale_deterministic(self):
        a = ms.censoring_scale(0.2, 0.5, np.log(2), np.log(2), 0.1529)
        b = ms.censoring_scale(0.2, 0.5, np.log(2), np.log(2), 0.1529)
        assert a == b
        assert a > 0


class TestRunScenario:
    def test_bit_identical_reruns(self):
        s = ms.get_scenario("linear-s1", N=300, n_reps=10, seed=99)
        a = ms.run_scenario(s)
        b = ms.run_scenario(s)
        np.testing.assert_array_equal(a.theta, b.theta)
        np.testing.assert_array_equal(a.se, b.se)

    def test_summary_recomputable_from_rows(self):
        s = ms.get_scenario("linear-s1", N=300, n_reps=20, seed=5)
        summ = ms.run_scenario(s)
        assert summ.n_requested == 20
        np.testing.assert_allclose(
            summ.sd(), summ.theta.std(axis=0, ddof=1))
        np.testing.assert_allclose(summ.see(), summ.se.mean(axis=0))
        lo = summ.theta - sim.WALD_Z * summ.se
        hi = summ.theta + sim.WALD_Z * summ.se
        np.testing.assert_allclose(
            summ.coverage(),
            ((lo <= summ.theta0) & (summ.theta0 <= hi)).mean(axis=0))

    def test_unstable_flag(self):
        summ = sim.MCSummary("x", np.zeros(1), np.zeros((10, 1)),
                             np.ones((10, 1)), np.arange(10),
                             failures=[(10, "boom")])
        assert summ.failure_rate == pytest.approx(1 / 11)
        assert summ.unstable
        ok = sim.MCSummary("x", np.zeros(1), np.zeros((100, 1)),
                           np.ones((100, 1)), np.arange(100),
                           failures=[(100, "boom")])
        assert not ok.unstable

    def test_per_replicate_hook(self):
        s = ms.get_scenario("linear-s1", N=300, n_reps=5, seed=2)
        summ = ms.run_scenario(s, per_replicate=lambda m, f: f.n_used)
        assert len(summ.extra) == 5
        assert all(isinstance(v, int) for v in summ.extra)

    def test_unknown_N_mode(self):
        s = ms.get_scenario("linear-s1", N=300, n_reps=5, seed=2,
                            unknown_N=True)
        summ = ms.run_scenario(s)
        assert summ.theta.shape == (5, 2)


class TestCompareWeights:
    def test_collapses_to_run_scenario(self):
        s = ms.get_scenario("linear-s1", N=300, n_reps=10, seed=7)
        single = ms.compare_weights(s, [s.rho], [None])
        ref = ms.run_scenario(s)
        cell = single[(s.rho.kind, None)]
        np.testing.assert_array_equal(cell.theta, ref.theta)
        np.testing.assert_array_equal(cell.se, ref.se)

    def test_common_random_numbers(self):
        # same replicate, different weighting: identical populations mean
        # the selected-unit sets coincide row for row
        s = ms.get_scenario("linear-s1", N=300, n_reps=1, seed=7)
        sample = sim.draw_replicate(s, 0)
        a = sim.build_measure(s, sample, rho_recipe=ms.RhoRecipe(ms.BALANCED))
        b = sim.build_measure(s, sample,
                              rho_recipe=ms.RhoRecipe(ms.SINGLE_FRAME))
        np.testing.assert_array_equal(a.sample.selected, b.sample.selected)
        assert not np.array_equal(a.weights, b.weights)


class TestQQData:
    def synthetic(self, n=1000, seed=0):
        rng = np.random.default_rng(seed)
        theta = rng.normal(size=(n, 1))
        return sim.MCSummary("x", np.zeros(1), theta, np.ones((n, 1)),
                             np.arange(n), failures=[])

    def test_null_quantiles_close_to_identity(self):
        qq = ms.qq_data(self.synthetic())
        inner = np.abs(qq[:, 0]) < 2.0
        assert np.max(np.abs(qq[inner, 0] - qq[inner, 1])) < 0.15

    def test_plotting_positions(self):
        qq = ms.qq_data(self.synthetic(n=200))
        np.testing.assert_allclose(
            qq[:, 0], ndtri((np.arange(1, 201) - 0.5) / 200))

    def test_degenerate_standardization(self):
        bad = sim.MCSummary("x", np.zeros(1), np.zeros((200, 1)),
                            np.zeros((200, 1)), np.arange(200), failures=[])
        with pytest.raises(ValueError, match="degenerate standardization"):
            ms.qq_data(bad)

    def test_needs_replicates(self):
        with pytest.raises(ValueError, match="100"):
            ms.qq_data(self.synthetic(n=50))
