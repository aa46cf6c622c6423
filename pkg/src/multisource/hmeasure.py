"""The duplication-corrected weighted empirical measure and its variance
estimators.

Each selected unit contributes mass sum_j R_j * rho_j / pi_j; the resulting
measure is design-unbiased for the ordinary empirical measure even though
duplicated selections are not identified.  Variance estimators decompose
into a population term and one design term per source, for subsampling
without replacement, Bernoulli subsampling, stratified subsampling, and the
unknown-population-size ratio estimator.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .model import MergedSample, WeightScheme


@dataclass
class VarianceDecomposition:
    """Population-variance matrix plus per-source design-variance matrices.

    Matrices estimate the asymptotic variance of sqrt(N) * (estimate - truth);
    divide the total by N (or the estimated N) for the variance of the
    estimate itself.
    """

    population: np.ndarray
    design: List[np.ndarray]

    @property
    def total(self):
        return self.population + sum(self.design)

    def se(self, N):
        return np.sqrt(np.diag(self.total) / N)


def _outer_rows(a, b):
    """Sum over rows of outer products a_i b_i^T."""
    return a.T @ b


def _as_columns(f, n_rows):
    f = np.asarray(f, dtype=float)
    if f.ndim == 1:
        f = f[:, None]
    if f.shape[0] != n_rows:
        raise ValueError("functional values must align with sample rows")
    return f


def _masked(f, keep):
    """Zero out rows not in ``keep`` (so NaNs of never-used rows drop out)."""
    return np.where(keep[:, None], f, 0.0)


class HMeasure:
    """Weighted empirical measure for a MergedSample under a WeightScheme.

    ``contrib[i, j] = R_ij * rho_j(V_i) / pi_j(V_i)`` is the mass unit i
    receives through source j (0/0 treated as 0); the unit weight is the
    row sum.  Immutable after construction.
    """

    def __init__(self, sample: MergedSample, scheme: WeightScheme):
        if scheme.n_sources != sample.n_sources:
            raise ValueError("scheme and sample disagree on the number of sources")
        self.sample = sample
        self.scheme = scheme
        self.rho_values = scheme.rho(sample.member_mask)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(sample.pi > 0, self.rho_values / np.where(
                sample.pi > 0, sample.pi, 1.0), 0.0)
        self.contrib = sample.selected_bits * ratio
        self.contrib.flags.writeable = False
        self.weights = self.contrib.sum(axis=1)
        self.weights.flags.writeable = False

    # ---- point estimates ------------------------------------------------

    def weighted_sum(self, f):
        f = _as_columns(f, self.sample.n_units)
        return self.weights @ _masked(f, self.weights != 0)

    def h_mean(self, f):
        """(1/N) sum_i w_i f_i; requires a known population size."""
        if self.sample.N is None:
            raise ValueError("population size unknown; use h_mean_ratio")
        out = self.weighted_sum(f) / self.sample.N
        return out if out.size > 1 else float(out[0])

    def estimate_N(self):
        """Weight total; unbiased for the population size."""
        return float(self.weights.sum())

    def h_mean_ratio(self, f):
        """Ratio estimator (weight-normalized mean) for unknown N."""
        N_hat = self.estimate_N()
        if N_hat == 0:
            raise ValueError("no selected units; weight total is zero")
        out = self.weighted_sum(f) / N_hat
        return out if out.size > 1 else float(out[0])

    @property
    def N_effective(self):
        return self.sample.N if self.sample.N is not None else self.estimate_N()

    # ---- per-source Horvitz-Thompson moments ----------------------------

    def source_ht_sum(self, g, j):
        """sum over units selected in source j of g_i / pi_j(i)."""
        g = _as_columns(g, self.sample.n_units)
        sel = self.sample.selected_bits[:, j]
        w = np.zeros(self.sample.n_units)
        w[sel] = 1.0 / self.sample.pi[sel, j]
        out = w @ _masked(g, sel)
        return out if out.size > 1 else float(out[0])

    def source_ht_mean(self, g, j):
        """HT estimate of the source-j conditional mean of g (denominator N_j)."""
        Nj = self.sample.N_source[j]
        if Nj == 0:
            raise ValueError(f"source {j} is empty")
        return self.source_ht_sum(g, j) / Nj

    def _design_factor(self, j, nu_denominator):
        Nj = int(self.sample.N_source[j])
        nj = int(self.sample.n_source[j])
        p_hat = nj / Nj
        nu_hat = Nj / nu_denominator
        return nu_hat * (1.0 - p_hat) / p_hat

    def _source_ht_var(self, g, j):
        """HT plug-in for the source-j conditional variance of g."""
        g = _as_columns(g, self.sample.n_units)
        m2 = np.atleast_2d(self.source_ht_mean(
            np.einsum("ni,nj->nij", g, g).reshape(g.shape[0], -1), j))
        d = g.shape[1]
        m2 = np.asarray(m2, dtype=float).reshape(d, d)
        m1 = np.atleast_1d(self.source_ht_mean(g, j))
        return m2 - np.outer(m1, m1), m1

    def _check_design_ready(self, j):
        Nj = int(self.sample.N_source[j])
        nj = int(self.sample.n_source[j])
        if Nj == 0:
            return "skip"
        if nj == Nj:
            return "census"
        if nj < 2:
            raise ValueError(
                f"source {j}: design variance undefined with n^({j})={nj} < 2"
            )
        return "ok"

    # ---- variance estimators -------------------------------------------

    def _rho_f(self, f, j):
        f = _as_columns(f, self.sample.n_units)
        return self.rho_values[:, [j]] * _masked(f, self.sample.selected_bits[:, j])

    def _population_var(self, f, normalizer):
        f = _as_columns(f, self.sample.n_units)
        d = f.shape[1]
        fw = _masked(f, self.weights != 0)
        m2 = _outer_rows(fw * self.weights[:, None], fw) / normalizer
        m1 = (self.weights @ fw) / normalizer
        return m2 - np.outer(m1, m1)

    def variance_wor(self, f) -> VarianceDecomposition:
        """Population variance plus centered per-source design variances."""
        N = self._require_N()
        f = _as_columns(f, self.sample.n_units)
        d = f.shape[1]
        pop = self._population_var(f, N)
        design = []
        for j in range(self.sample.n_sources):
            state = self._check_design_ready(j)
            if state in ("skip", "census"):
                design.append(np.zeros((d, d)))
                continue
            var_j, _ = self._source_ht_var(self._rho_f(f, j), j)
            design.append(self._design_factor(j, N) * var_j)
        return VarianceDecomposition(pop, design)

    def variance_bernoulli(self, f) -> VarianceDecomposition:
        """Like variance_wor but with uncentered per-source second moments,
        matching independent Bernoulli subsampling within sources."""
        N = self._require_N()
        f = _as_columns(f, self.sample.n_units)
        d = f.shape[1]
        pop = self._population_var(f, N)
        design = []
        for j in range(self.sample.n_sources):
            state = self._check_design_ready(j)
            if state in ("skip", "census"):
                design.append(np.zeros((d, d)))
                continue
            g = self._rho_f(f, j)
            m2 = np.asarray(self.source_ht_mean(
                np.einsum("ni,nj->nij", g, g).reshape(g.shape[0], -1), j))
            m2 = m2.reshape(d, d)
            design.append(self._design_factor(j, N) * m2)
        return VarianceDecomposition(pop, design)

    def variance_stratified(self, f) -> VarianceDecomposition:
        """Design terms summed over strata within each source."""
        N = self._require_N()
        sample = self.sample
        if sample.stratum is None:
            return self.variance_wor(f)
        f = _as_columns(f, sample.n_units)
        d = f.shape[1]
        pop = self._population_var(f, N)
        design = []
        for j in range(sample.n_sources):
            term = np.zeros((d, d))
            for k in range(sample.N_stratum.shape[1]):
                N_k = int(sample.N_stratum[j, k])
                n_k = int(sample.n_stratum[j, k])
                if N_k == 0 or n_k == N_k:
                    continue
                if n_k < 2:
                    raise ValueError(
                        f"source {j} stratum {k}: design variance undefined "
                        f"with n={n_k} < 2"
                    )
                in_k = sample.member_bits[:, j] & (sample.stratum[:, j] == k)
                sel_k = in_k & sample.selected_bits[:, j]
                g = self._rho_f(f, j)
                w = np.zeros(sample.n_units)
                w[sel_k] = N_k / n_k
                gw = _masked(g, sel_k)
                m2 = _outer_rows(gw * w[:, None], gw) / N_k
                m1 = (w @ gw) / N_k
                var_k = m2 - np.outer(m1, m1)
                p_k = n_k / N_k
                term += (N_k / N) * (1.0 - p_k) / p_k * var_k
            design.append(term)
        return VarianceDecomposition(pop, design)

    def variance_unknown_N(self, f, theta_hat=None) -> VarianceDecomposition:
        """Variance for the ratio estimator: center f at the estimate and
        normalize every moment by the estimated population size."""
        N_hat = self.estimate_N()
        f = _as_columns(f, self.sample.n_units)
        d = f.shape[1]
        if theta_hat is None:
            theta_hat = np.atleast_1d(self.h_mean_ratio(f))
        theta_hat = np.asarray(theta_hat, dtype=float).reshape(1, d)
        centered = f - theta_hat
        pop = self._population_var(f, N_hat)
        design = []
        for j in range(self.sample.n_sources):
            state = self._check_design_ready(j)
            if state in ("skip", "census"):
                design.append(np.zeros((d, d)))
                continue
            var_j, _ = self._source_ht_var(self._rho_f(centered, j), j)
            design.append(self._design_factor(j, N_hat) * var_j)
        return VarianceDecomposition(pop, design)

    def _require_N(self):
        if self.sample.N is None:
            raise ValueError(
                "population size unknown; use variance_unknown_N"
            )
        return self.sample.N


# Functional wrappers mirroring the method API.

def h_mean(meas: HMeasure, f):
    return meas.h_mean(f)


def estimate_N(meas: HMeasure):
    return meas.estimate_N()


def h_mean_ratio(meas: HMeasure, f):
    return meas.h_mean_ratio(f)


def variance_wor(meas: HMeasure, f):
    return meas.variance_wor(f)


def variance_bernoulli(meas: HMeasure, f):
    return meas.variance_bernoulli(f)


def variance_stratified(meas: HMeasure, f):
    return meas.variance_stratified(f)


def variance_unknown_N(meas: HMeasure, f, theta_hat=None):
    return meas.variance_unknown_N(f, theta_hat)
