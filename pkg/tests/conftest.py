"""Shared builders for the test suite."""
import numpy as np
import pytest

import multisource as ms


def tiny_a_sample():
    """Four units, two sources: units 1 and 2 in source 1 only, unit 3 in
    both, unit 4 in source 2 only; source 1 selected {1, 3}, source 2
    selected {4}."""
    x = np.arange(1.0, 5.0)[:, None]
    member = np.array([1, 1, 3, 2])
    selected = np.array([1, 0, 1, 2])
    return ms.MergedSample(x, x.copy(), member, selected, N=4)


def tiny_a_measure():
    sample = tiny_a_sample()
    scheme = ms.WeightScheme(2, {3: np.array([0.5, 0.5])})
    return ms.HMeasure(sample, scheme)


def two_source_layout(lower=-1.0, upper=1.0):
    """Interval sources on the first auxiliary column; None = whole line."""
    def member(v):
        m1 = (np.ones(v.shape[0], dtype=np.int64) if lower is None
              else (v[:, 0] >= lower).astype(np.int64))
        m2 = (np.ones(v.shape[0], dtype=np.int64) if upper is None
              else (v[:, 0] <= upper).astype(np.int64))
        return m1 | (m2 << 1)
    return ms.SourceLayout(2, member)


def linear_population(rng, N, theta=(1.0, 1.0)):
    z = rng.normal(size=N)
    y = theta[0] + theta[1] * z + rng.normal(size=N)
    return np.column_stack([y, z]), z[:, None]


def logistic_population(rng, N, theta=(-0.5, 0.7)):
    z = rng.normal(size=N)
    p = 1.0 / (1.0 + np.exp(-(theta[0] + theta[1] * z)))
    y = (rng.random(N) < p).astype(float)
    return np.column_stack([y, z]), z[:, None]


def cox_population(rng, N, theta=(0.7, 0.7)):
    z1 = rng.binomial(1, 0.5, N).astype(float)
    z2 = rng.normal(size=N)
    t = rng.exponential(size=N) * np.exp(-(theta[0] * z1 + theta[1] * z2))
    c = rng.uniform(0, 2.0, N)
    y = np.minimum(t, c)
    delta = (t <= c).astype(float)
    return np.column_stack([y, delta, z1, z2]), z2[:, None]


def drawn_sample(kind, seed, N=300, fractions=(0.3, 0.4), theta=None):
    """A realized two-source WOR sample for the given model kind."""
    gen = {"linear": linear_population, "logistic": logistic_population,
           "cox": cox_population}[kind]
    if theta is not None:
        base_gen = gen
        gen = lambda rng, n: base_gen(rng, n, theta)
    layout = two_source_layout()
    pop = ms.draw_population(gen, N, layout, seed)
    return ms.draw_selections(pop, ms.DesignSpec(ms.WOR, fractions, seed=seed))


def fit_drawn(kind, meas):
    x = meas.sample.x
    if kind == "cox":
        return ms.fit_cox(meas, x[:, 0], x[:, 1], x[:, 2:])
    z = np.column_stack([np.ones(x.shape[0]), x[:, 1:]])
    if kind == "linear":
        return ms.fit_linear(meas, x[:, 0], z)
    return ms.fit_logistic(meas, x[:, 0], z)


def balanced_measure(sample):
    layout = ms.SourceLayout(
        sample.n_sources,
        lambda v: np.zeros(v.shape[0], dtype=np.int64))
    scheme = ms.build_scheme(ms.RhoRecipe(ms.BALANCED), layout, sample)
    return ms.HMeasure(sample, scheme)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
