import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

import multisource as ms
from multisource.sampling import subsample_size
from conftest import linear_population, two_source_layout


class TestSubstream:
    def test_deterministic(self):
        a = ms.substream(7, 1, 2).random(5)
        b = ms.substream(7, 1, 2).random(5)
        np.testing.assert_array_equal(a, b)

    def test_key_sensitivity(self):
        a = ms.substream(7, 1, 2).random(5)
        b = ms.substream(7, 2, 1).random(5)
        c = ms.substream(8, 1, 2).random(5)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestSubsampleSize:
    def test_round_half_to_even(self):
        assert subsample_size(0.5, 5) == 2      # 2.5 -> 2
        assert subsample_size(0.5, 7) == 4      # 3.5 -> 4
        assert subsample_size(0.25, 10) == 2    # 2.5 -> 2

    def test_clamped(self):
        assert subsample_size(0.01, 10) == 1
        assert subsample_size(1.0, 10) == 10
        assert subsample_size(0.5, 0) == 0

    @given(st.floats(min_value=0.01, max_value=1.0),
           st.integers(min_value=1, max_value=1000))
    def test_bounds(self, p, N):
        n = subsample_size(p, N)
        assert 1 <= n <= N


class TestDesignSpec:
    def test_invalid_mode(self):
        with pytest.raises(ValueError):
            ms.DesignSpec("SYSTEMATIC", (0.5,))

    def test_invalid_fraction(self):
        with pytest.raises(ValueError):
            ms.DesignSpec(ms.WOR, (0.0, 0.5))
        with pytest.raises(ValueError):
            ms.DesignSpec(ms.WOR, (1.5,))

    def test_per_stratum_fractions(self):
        d = ms.DesignSpec(ms.STRATIFIED_WOR, ((0.2, 0.4), 0.5))
        assert d.fraction(0, 0) == 0.2
        assert d.fraction(0, 1) == 0.4
        assert d.fraction(1, 0) == 0.5


class TestDrawPopulation:
    def test_deterministic_and_membership(self):
        layout = two_source_layout()
        a = ms.draw_population(linear_population, 50, layout, 3)
        b = ms.draw_population(linear_population, 50, layout, 3)
        np.testing.assert_array_equal(a.v, b.v)
        np.testing.assert_array_equal(a.member_mask,
                                      layout.member_masks(a.v))
        assert np.all(a.selected == 0)
        assert a.N == 50


class TestDrawSelections:
    def sample(self, seed=0, N=60):
        return ms.draw_population(linear_population, N, two_source_layout(),
                                  seed)

    def test_wor_exact_sizes(self):
        pop = self.sample()
        s = ms.draw_selections(pop, ms.DesignSpec(ms.WOR, (0.2, 0.3), seed=1))
        for j in range(2):
            expected = subsample_size((0.2, 0.3)[j], int(pop.N_source[j]))
            assert int(s.n_source[j]) == expected
            assert np.all(s.selected_bits[:, j] <= s.member_bits[:, j])

    def test_input_not_modified(self):
        pop = self.sample()
        ms.draw_selections(pop, ms.DesignSpec(ms.WOR, (0.2, 0.3), seed=1))
        assert np.all(pop.selected == 0)

    def test_deterministic(self):
        pop = self.sample()
        d = ms.DesignSpec(ms.BERNOULLI, (0.4, 0.4), seed=9)
        a = ms.draw_selections(pop, d)
        b = ms.draw_selections(pop, d)
        np.testing.assert_array_equal(a.selected, b.selected)

    def test_already_selected_rejected(self):
        pop = self.sample()
        s = ms.draw_selections(pop, ms.DesignSpec(ms.WOR, (0.2, 0.3), seed=1))
        with pytest.raises(ValueError):
            ms.draw_selections(s, ms.DesignSpec(ms.WOR, (0.2, 0.3), seed=2))

    def test_stratified_sizes(self):
        layout = ms.SourceLayout(
            1, lambda v: np.ones(v.shape[0], dtype=np.int64),
            strata=[lambda v: (v[:, 0] > 0).astype(np.int64)], n_strata=[2])
        pop = ms.draw_population(linear_population, 80, layout, 5)
        d = ms.DesignSpec(ms.STRATIFIED_WOR, ((0.25, 0.5),), seed=2)
        s = ms.draw_selections(pop, d)
        for k in range(2):
            expected = subsample_size((0.25, 0.5)[k], int(s.N_stratum[0, k]))
            assert int(s.n_stratum[0, k]) == expected

    def test_empty_source_warns(self):
        x = np.ones((4, 1))
        pop = ms.MergedSample(x, x, [1, 1, 1, 1], [0, 0, 0, 0], n_sources=2)
        with pytest.warns(UserWarning, match="empty"):
            s = ms.draw_selections(pop, ms.DesignSpec(ms.WOR, (0.5, 0.5),
                                                      seed=0))
        assert s.n_source[1] == 0


class TestEnumeration:
    def test_count_and_patterns(self):
        x = np.arange(1.0, 5.0)[:, None]
        pop = ms.MergedSample(x, x, [1, 1, 3, 2], np.zeros(4, np.int64))
        d = ms.DesignSpec(ms.WOR, (2 / 3, 0.5))
        expected = math.comb(3, 2) * math.comb(2, 1)
        assert ms.enumeration_count(pop, d) == expected
        pats = [tuple(s.selected) for s in ms.enumerate_selections(pop, d)]
        assert len(pats) == expected
        assert len(set(pats)) == expected

    def test_budget_exceeded(self):
        x = np.ones((60, 1))
        pop = ms.MergedSample(x, x, np.ones(60, np.int64),
                              np.zeros(60, np.int64))
        d = ms.DesignSpec(ms.WOR, (0.5,))
        with pytest.raises(ValueError, match="budget"):
            list(ms.enumerate_selections(pop, d))

    def test_bernoulli_not_enumerable(self):
        x = np.ones((4, 1))
        pop = ms.MergedSample(x, x, np.ones(4, np.int64),
                              np.zeros(4, np.int64))
        with pytest.raises(ValueError, match="WOR"):
            list(ms.enumerate_selections(
                pop, ms.DesignSpec(ms.BERNOULLI, (0.5,))))
