import numpy as np
import pytest

import multisource as ms
from conftest import balanced_measure, drawn_sample, tiny_a_measure, \
    tiny_a_sample


class TestPointEstimates:
    def test_frozen_worked_example(self):
        m = tiny_a_measure()
        f = m.sample.x
        np.testing.assert_allclose(m.weights, [1.5, 0.0, 0.75, 2.0])
        assert m.h_mean(f) == pytest.approx(2.9375)
        assert m.estimate_N() == pytest.approx(4.25)
        assert m.h_mean_ratio(f) == pytest.approx(2.76471, abs=5e-6)

    def test_functional_wrappers(self):
        m = tiny_a_measure()
        f = m.sample.x
        assert ms.h_mean(m, f) == m.h_mean(f)
        assert ms.estimate_N(m) == m.estimate_N()
        assert ms.h_mean_ratio(m, f) == m.h_mean_ratio(f)

    def test_unknown_N_requires_ratio(self):
        s = tiny_a_sample()
        u = ms.MergedSample(s.x, s.v, s.member_mask, s.selected, N=None)
        m = ms.HMeasure(u, ms.WeightScheme(2, {3: np.array([0.5, 0.5])}))
        with pytest.raises(ValueError, match="ratio"):
            m.h_mean(s.x)
        assert m.h_mean_ratio(s.x) == pytest.approx(2.9375 * 4 / 4.25)

    def test_scheme_sample_source_count_mismatch(self):
        s = tiny_a_sample()
        with pytest.raises(ValueError):
            ms.HMeasure(s, ms.WeightScheme(3, {}))

    def test_nan_on_unused_rows_ignored(self):
        s = tiny_a_sample()
        x = s.x.copy()
        x[1, 0] = np.nan  # unit 2 is never selected
        s2 = ms.MergedSample(x, s.v, s.member_mask, s.selected, N=4)
        m = ms.HMeasure(s2, ms.WeightScheme(2, {3: np.array([0.5, 0.5])}))
        assert m.h_mean(x) == pytest.approx(2.9375)

    def test_nan_on_selected_row_propagates(self):
        s = tiny_a_sample()
        x = s.x.copy()
        x[0, 0] = np.nan  # unit 1 is selected
        s2 = ms.MergedSample(x, s.v, s.member_mask, s.selected, N=4)
        m = ms.HMeasure(s2, ms.WeightScheme(2, {3: np.array([0.5, 0.5])}))
        assert np.isnan(m.h_mean(x))


class TestEnumerationUnbiasedness:
    def test_h_mean_and_N_hat_unbiased(self):
        rng = np.random.default_rng(42)
        for _ in range(3):
            N = int(rng.integers(5, 8))
            masks = rng.integers(1, 4, size=N)
            while not all(((masks >> j) & 1).sum() >= 2 for j in range(2)):
                masks = rng.integers(1, 4, size=N)
            x = rng.normal(size=(N, 1))
            pop = ms.MergedSample(x, x, masks, np.zeros(N, np.int64),
                                  n_sources=2)
            design = ms.DesignSpec(ms.WOR, (0.5, 0.5))
            layout = ms.SourceLayout(2, lambda v, m=masks: m)
            scheme = ms.balanced_rho(layout, masks=np.unique(masks))
            tot, tot_N, cnt = 0.0, 0.0, 0
            for s in ms.enumerate_selections(pop, design):
                m = ms.HMeasure(s, scheme)
                tot += m.h_mean(x)
                tot_N += m.estimate_N()
                cnt += 1
            assert tot / cnt == pytest.approx(x.mean(), abs=1e-12)
            assert tot_N / cnt == pytest.approx(N, abs=1e-12)


class TestVariances:
    def measure(self, seed=0):
        return balanced_measure(drawn_sample("linear", seed, N=200))

    def test_bernoulli_minus_wor_is_ht_mean_outer(self):
        m = self.measure()
        f = m.sample.x
        wor = m.variance_wor(f)
        bern = m.variance_bernoulli(f)
        N = m.sample.N
        for j in range(2):
            g = m._rho_f(f, j)
            m1 = np.atleast_1d(m.source_ht_mean(g, j))
            gap = m._design_factor(j, N) * np.outer(m1, m1)
            np.testing.assert_allclose(bern.design[j] - wor.design[j], gap,
                                       atol=1e-12)
            assert np.all(np.diag(bern.design[j] - wor.design[j]) >= -1e-12)

    def test_population_term_shared(self):
        m = self.measure()
        f = m.sample.x
        np.testing.assert_array_equal(m.variance_wor(f).population,
                                      m.variance_bernoulli(f).population)

    def test_census_design_terms_vanish(self):
        x = np.arange(1.0, 7.0)[:, None]
        s = ms.MergedSample(x, x, np.ones(6, np.int64), np.ones(6, np.int64))
        m = ms.HMeasure(s, ms.WeightScheme(1, {}))
        dec = m.variance_wor(x)
        np.testing.assert_allclose(dec.design[0], 0.0)
        assert dec.total == pytest.approx(np.var(x))

    def test_single_selected_unit_rejected(self):
        x = np.arange(1.0, 7.0)[:, None]
        s = ms.MergedSample(x, x, np.ones(6, np.int64),
                            np.array([1, 0, 0, 0, 0, 0]))
        m = ms.HMeasure(s, ms.WeightScheme(1, {}))
        with pytest.raises(ValueError, match="design variance undefined"):
            m.variance_wor(x)

    def test_known_N_required(self):
        s = tiny_a_sample()
        u = ms.MergedSample(s.x, s.v, s.member_mask, s.selected, N=None)
        m = ms.HMeasure(u, ms.WeightScheme(2, {3: np.array([0.5, 0.5])}))
        with pytest.raises(ValueError, match="unknown"):
            m.variance_wor(s.x)

    def test_unknown_N_decomposition(self):
        sample = drawn_sample("linear", 3, N=200)
        u = ms.MergedSample(sample.x, sample.v, sample.member_mask,
                            sample.selected, N=None,
                            N_source=sample.N_source)
        m = balanced_measure(u)
        dec = m.variance_unknown_N(sample.x[:, [0]])
        assert dec.total.shape == (1, 1)
        assert dec.total[0, 0] > 0
        se = dec.se(m.estimate_N())
        assert se[0] == pytest.approx(
            np.sqrt(dec.total[0, 0] / m.estimate_N()))

    def test_stratified_collapses_without_strata(self):
        m = self.measure()
        f = m.sample.x
        a = m.variance_stratified(f)
        b = m.variance_wor(f)
        np.testing.assert_allclose(a.total, b.total)

    def test_stratified_single_stratum_equals_wor(self):
        sample = drawn_sample("linear", 5, N=200)
        labeled = ms.MergedSample(sample.x, sample.v, sample.member_mask,
                                  sample.selected,
                                  stratum=np.zeros((sample.n_units, 2),
                                                   np.int64))
        m = balanced_measure(labeled)
        a = m.variance_stratified(sample.x)
        b = balanced_measure(sample).variance_wor(sample.x)
        np.testing.assert_allclose(a.total, b.total, atol=1e-12)

    def test_matrix_valued_functional(self):
        m = self.measure()
        f = np.column_stack([m.sample.x[:, 0], m.sample.x[:, 1] ** 2])
        dec = m.variance_wor(f)
        assert dec.total.shape == (2, 2)
        np.testing.assert_allclose(dec.total, dec.total.T)
