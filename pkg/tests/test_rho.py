import numpy as np
import pytest
from hypothesis import given, strategies as st

import multisource as ms
from multisource.rho import od
from conftest import drawn_sample, two_source_layout


def trivial_layout(J):
    return ms.SourceLayout(J, lambda v: np.zeros(v.shape[0], dtype=np.int64))


def test_od():
    assert od(0.5) == pytest.approx(1.0)
    assert od(0.2) == pytest.approx(4.0)
    assert od(1.0) == 0.0


class TestBalanced:
    def test_pair_cell(self):
        scheme = ms.balanced_rho(trivial_layout(2))
        np.testing.assert_allclose(scheme.cells[3], [0.5, 0.5])

    def test_triple_cell(self):
        scheme = ms.balanced_rho(trivial_layout(3))
        np.testing.assert_allclose(scheme.cells[7], [1 / 3, 1 / 3, 1 / 3])
        np.testing.assert_allclose(scheme.cells[5], [0.5, 0.0, 0.5])


class TestSingleFrame:
    def test_proportional_to_realized_fractions(self):
        # realized fractions 0.2 and 0.3 -> overlap split (0.4, 0.6)
        x = np.zeros((20, 1))
        member = np.full(20, 3, dtype=np.int64)
        selected = np.zeros(20, dtype=np.int64)
        selected[:4] |= 1   # 4/20 = 0.2
        selected[:6] |= 2   # 6/20 = 0.3
        sample = ms.MergedSample(x, x, member, selected)
        scheme = ms.single_frame_rho(trivial_layout(2), sample)
        np.testing.assert_allclose(scheme.cells[3], [0.4, 0.6])


class TestOptimalBernoulli:
    def test_fraction_pair(self):
        scheme = ms.optimal_rho_bernoulli((0.2, 0.3), trivial_layout(2))
        np.testing.assert_allclose(scheme.cells[3], [7 / 19, 12 / 19])
        np.testing.assert_allclose(scheme.cells[1], [1.0, 0.0])

    def test_census_member_absorbs_cell(self):
        scheme = ms.optimal_rho_bernoulli((1.0, 0.3), trivial_layout(2))
        np.testing.assert_allclose(scheme.cells[3], [1.0, 0.0])

    def test_two_census_members_split_uniformly(self):
        scheme = ms.optimal_rho_bernoulli((1.0, 1.0, 0.3), trivial_layout(3))
        np.testing.assert_allclose(scheme.cells[7], [0.5, 0.5, 0.0])

    def test_three_sources(self):
        p = (0.2, 0.3, 0.5)
        scheme = ms.optimal_rho_bernoulli(p, trivial_layout(3))
        raw = np.array([od(p[1]) * od(p[2]), od(p[0]) * od(p[2]),
                        od(p[0]) * od(p[1])])
        np.testing.assert_allclose(scheme.cells[7], raw / raw.sum())

    def test_invalid_fractions(self):
        with pytest.raises(ValueError):
            ms.optimal_rho_bernoulli((0.0, 0.3), trivial_layout(2))
        with pytest.raises(ValueError):
            ms.optimal_rho_bernoulli((0.2,), trivial_layout(2))

    @given(st.lists(st.floats(min_value=0.05, max_value=1.0),
                    min_size=2, max_size=4))
    def test_cells_are_simplex(self, p):
        scheme = ms.optimal_rho_bernoulli(tuple(p), trivial_layout(len(p)))
        for mask, c in scheme.cells.items():
            assert c.sum() == pytest.approx(1.0)
            assert np.all(c >= 0)


def _oracle_c(sample, f):
    """Direct arithmetic for the two-source overlap constant: balanced-pilot
    Horvitz-Thompson moments of f restricted to the overlap and to the part
    of source 1 outside source 2."""
    y = f * (sample.member_mask == 1)
    z = f * (sample.member_mask == 3)
    nu = sample.N_source / sample.N
    p = sample.p_hat
    rho = np.where(sample.member_mask[:, None] == 3, 0.5, 1.0)
    moments = {}
    for j in (0, 1):
        sel = sample.selected_bits[:, j]
        w = sel / sample.pi[:, j].clip(min=1e-300)
        m1y = (w * y).sum() / sample.N_source[j]
        m1z = (w * z).sum() / sample.N_source[j]
        m2z = (w * z ** 2).sum() / sample.N_source[j]
        moments[j] = (m1y, m1z, m2z - m1z ** 2)
    a1 = nu[0] * (1 - p[0]) / p[0]
    a2 = nu[1] * (1 - p[1]) / p[1]
    num = (-a1 * moments[0][0] * moments[0][1]
           + a2 * (moments[1][0] * moments[1][1] - moments[1][2]))
    den = a1 * moments[0][2] + a2 * moments[1][2]
    return min(max(num / den, 0.0), 1.0)


class TestOptimalWor:
    def test_matches_direct_arithmetic(self):
        for seed in range(5):
            sample = drawn_sample("linear", seed, N=120)
            f = sample.x[:, 0] * 0.3 + np.arange(sample.n_units) * 0.01
            scheme = ms.optimal_rho_wor(sample, f,
                                        layout=two_source_layout())
            c = _oracle_c(sample, f)
            np.testing.assert_allclose(scheme.cells[3], [c, 1 - c],
                                       atol=1e-12)

    def test_constant_clamped_to_unit_interval(self):
        for seed in range(10):
            sample = drawn_sample("linear", 100 + seed, N=80)
            f = sample.x[:, 0]
            scheme = ms.optimal_rho_wor(sample, f,
                                        layout=two_source_layout())
            c = scheme.cells[3][0]
            assert 0.0 <= c <= 1.0

    def test_degenerate_overlap_raises(self):
        sample = drawn_sample("linear", 0, N=80)
        f = (sample.member_mask == 1).astype(float)  # zero on the overlap
        with pytest.raises(ValueError, match="degenerate intersection"):
            ms.optimal_rho_wor(sample, f, layout=two_source_layout())

    def test_three_sources_rejected(self):
        x = np.ones((6, 1))
        sample = ms.MergedSample(x, x, [1, 2, 4, 7, 7, 7], [1, 2, 4, 7, 0, 0])
        with pytest.raises(ValueError, match="J=2"):
            ms.optimal_rho_wor(sample, np.ones(6))

    def test_vector_f_rejected(self):
        sample = drawn_sample("linear", 0, N=80)
        with pytest.raises(ValueError, match="1-d"):
            ms.optimal_rho_wor(sample, sample.x,
                               layout=two_source_layout())


class TestBuildScheme:
    def test_dispatch(self):
        sample = drawn_sample("linear", 1, N=100)
        layout = two_source_layout()
        for kind in (ms.BALANCED, ms.SINGLE_FRAME):
            scheme = ms.build_scheme(ms.RhoRecipe(kind), layout, sample)
            assert 3 in scheme.cells
        scheme = ms.build_scheme(
            ms.RhoRecipe(ms.OPT_BERNOULLI, {"p": (0.2, 0.3)}), layout, sample)
        np.testing.assert_allclose(scheme.cells[3], [7 / 19, 12 / 19])
        scheme = ms.build_scheme(ms.RhoRecipe(ms.OPT_WOR), layout, sample,
                                 f=sample.x[:, 0])
        assert 0.0 <= scheme.cells[3][0] <= 1.0

    def test_opt_bernoulli_uses_realized_fractions(self):
        sample = drawn_sample("linear", 1, N=100, fractions=(0.2, 0.3))
        scheme = ms.build_scheme(ms.RhoRecipe(ms.OPT_BERNOULLI),
                                 two_source_layout(), sample)
        p = sample.p_hat
        expected = np.array([od(p[1]), od(p[0])])
        np.testing.assert_allclose(scheme.cells[3], expected / expected.sum())

    def test_unknown_recipe_rejected(self):
        with pytest.raises(ValueError):
            ms.RhoRecipe("MYSTERY")
