"""Calibration of the duplication-corrected weights against auxiliary totals.

Three schemes are provided.  Standard calibration matches the weighted
auxiliary mean to the full-population mean.  Source-specific calibration
matches, per source, the weighted total over selected units belonging to
that source against the roster total of that source.  Sample-specific
calibration works entirely within each source's own subsample: it matches
the Horvitz-Thompson moment of the empirically centered, rho-scaled
auxiliaries to zero, which is the scheme that provably minimizes the design
variance among linear weight adjustments.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .hmeasure import HMeasure, VarianceDecomposition, _as_columns, _masked

STANDARD = "STANDARD"
SOURCE_SPECIFIC = "SOURCE_SPECIFIC"
SAMPLE_SPECIFIC = "SAMPLE_SPECIFIC"

AFFINE = "AFFINE"
LOGISTIC_SHIFTED = "LOGISTIC_SHIFTED"
EXP_BOUNDED = "EXP_BOUNDED"

MAX_NEWTON_ITER = 100
NEWTON_TOL = 1e-10


@dataclass(frozen=True)
class GFunction:
    """Weight-adjustment link G with G(0) = 1 and strictly positive slope.

    AFFINE: G(x) = 1 + x (unbounded, closed-form solvable).
    LOGISTIC_SHIFTED: G(x) = 2 / (1 + exp(-2x)), bounded in (0, 2).
    EXP_BOUNDED: G(x) = lo + (hi - lo) * expit(s * x) with G(0) = 1.
    """

    kind: str = AFFINE
    lo: float = 0.0
    hi: float = 2.0

    def __post_init__(self):
        if self.kind not in (AFFINE, LOGISTIC_SHIFTED, EXP_BOUNDED):
            raise ValueError(f"unknown G function kind {self.kind!r}")
        if self.kind == EXP_BOUNDED and not self.lo < 1.0 < self.hi:
            raise ValueError("EXP_BOUNDED bounds must bracket 1")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == AFFINE:
            return 1.0 + x
        if self.kind == LOGISTIC_SHIFTED:
            return 2.0 / (1.0 + np.exp(-2.0 * x))
        span = self.hi - self.lo
        # slope chosen so that dG/dx at 0 equals 1
        s = span / ((1.0 - self.lo) * (self.hi - 1.0))
        return self.lo + span / (1.0 + (span / (1.0 - self.lo) - 1.0)
                                 * np.exp(-s * x))

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        if self.kind == AFFINE:
            return np.ones_like(x)
        if self.kind == LOGISTIC_SHIFTED:
            g = self(x) / 2.0
            return 4.0 * g * (1.0 - g)
        eps = 1e-6
        return (self(x + eps) - self(x - eps)) / (2.0 * eps)


class CalibrationError(RuntimeError):
    pass


def _damped_newton(residual_and_jac, dim):
    """Solve residual(alpha) = 0 with step halving; returns (alpha, iters)."""
    alpha = np.zeros(dim)
    r, Jm = residual_and_jac(alpha)
    norm = np.linalg.norm(r, ord=np.inf)
    for it in range(1, MAX_NEWTON_ITER + 1):
        if norm < NEWTON_TOL:
            return alpha, it - 1
        try:
            step = np.linalg.solve(Jm, r)
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(f"singular calibration system: {exc}") from exc
        scale = 1.0
        for _ in range(40):
            cand = alpha - scale * step
            r_new, J_new = residual_and_jac(cand)
            n_new = np.linalg.norm(r_new, ord=np.inf)
            if n_new < norm:
                alpha, r, Jm, norm = cand, r_new, J_new, n_new
                break
            scale *= 0.5
        else:
            raise CalibrationError(
                f"calibration step failed to reduce residual {norm:.3e}"
            )
    raise CalibrationError(
        f"calibration did not converge in {MAX_NEWTON_ITER} iterations "
        f"(residual {norm:.3e})"
    )


@dataclass
class CalibratedMeasure:
    """An HMeasure with per-source weight adjustment factors.

    ``factors[i, j]`` multiplies the source-j mass of unit i; the calibrated
    unit weight is sum_j contrib[i, j] * factors[i, j].  The measure exposes
    the same point-estimate API as HMeasure and a variance estimator whose
    design terms subtract the calibration projection.
    """

    base: HMeasure
    method: str
    g: GFunction
    alpha: List[np.ndarray]
    factors: np.ndarray
    columns: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.contrib = self.base.contrib * self.factors
        self.weights = self.contrib.sum(axis=1)
        self.sample = self.base.sample
        self.scheme = self.base.scheme
        self.rho_values = self.base.rho_values

    # point estimates with adjusted weights -------------------------------

    def weighted_sum(self, f):
        f = _as_columns(f, self.sample.n_units)
        return self.weights @ _masked(f, self.weights != 0)

    def h_mean(self, f):
        if self.sample.N is None:
            raise ValueError("population size unknown; use h_mean_ratio")
        out = self.weighted_sum(f) / self.sample.N
        return out if out.size > 1 else float(out[0])

    def estimate_N(self):
        return float(self.weights.sum())

    def h_mean_ratio(self, f):
        N_hat = self.estimate_N()
        if N_hat == 0:
            raise ValueError("no selected units; weight total is zero")
        out = self.weighted_sum(f) / N_hat
        return out if out.size > 1 else float(out[0])

    @property
    def N_effective(self):
        return self.sample.N if self.sample.N is not None else self.estimate_N()

    # variance with projection-corrected design terms ----------------------

    def _projection_values(self, f):
        """Per-source arrays Q_j of the calibration projection of f."""
        base = self.base
        sample = self.sample
        V = self.columns
        f = _as_columns(f, sample.n_units)
        d = f.shape[1]
        Q = []
        if self.method in (STANDARD, SOURCE_SPECIFIC):
            # projection through the population second moment of V
            fV = base.h_mean(np.einsum("ni,nk->nik", _masked(f, base.weights != 0),
                                       V).reshape(sample.n_units, -1))
            fV = np.asarray(fV).reshape(d, V.shape[1])
            VV = base.h_mean(np.einsum("ni,nk->nik", V, V).reshape(
                sample.n_units, -1))
            VV = np.asarray(VV).reshape(V.shape[1], V.shape[1])
            try:
                B = np.linalg.solve(VV, fV.T).T  # d x k
            except np.linalg.LinAlgError as exc:
                raise CalibrationError(
                    f"singular auxiliary second-moment matrix: {exc}") from exc
            for j in range(sample.n_sources):
                rv = self.rho_values[:, [j]] * V
                Q.append(rv @ B.T)
        else:
            for j in range(sample.n_sources):
                member = sample.member_bits[:, j]
                if not member.any() or sample.n_source[j] == 0:
                    Q.append(np.zeros((sample.n_units, d)))
                    continue
                rv = self.rho_values[:, [j]] * V
                mu = np.atleast_1d(base.source_ht_mean(rv, j))
                c = (rv - mu[None, :]) * member[:, None]
                g = base._rho_f(f, j)
                sel = sample.selected_bits[:, j]
                w = np.zeros(sample.n_units)
                w[sel] = 1.0 / sample.pi[sel, j]
                cg = _masked(c, sel)
                A = (g * w[:, None]).T @ cg / sample.N_source[j]
                Bm = (cg * w[:, None]).T @ cg / sample.N_source[j]
                try:
                    K = np.linalg.solve(Bm, A.T).T
                except np.linalg.LinAlgError:
                    warnings.warn(
                        f"source {j}: degenerate centered auxiliaries; "
                        f"no calibration gain applied"
                    )
                    Q.append(np.zeros((sample.n_units, d)))
                    continue
                Q.append(c @ K.T)
        return Q

    def variance_wor(self, f) -> VarianceDecomposition:
        base = self.base
        sample = self.sample
        N = sample.N if sample.N is not None else base.estimate_N()
        f = _as_columns(f, sample.n_units)
        d = f.shape[1]
        pop = base._population_var(f, N)
        Q = self._projection_values(f)
        design = []
        for j in range(sample.n_sources):
            state = base._check_design_ready(j)
            if state in ("skip", "census"):
                design.append(np.zeros((d, d)))
                continue
            resid = base._rho_f(f, j) - _masked(Q[j], sample.selected_bits[:, j])
            var_j, _ = base._source_ht_var(resid, j)
            design.append(base._design_factor(j, N) * var_j)
        return VarianceDecomposition(pop, design)

    variance_calibrated = variance_wor


def _ht_fV_system(V, weight_rows, g: GFunction, target):
    """Return residual/Jacobian closure for sum_i w_i G(V_i' a) V_i = target."""

    def residual_and_jac(alpha):
        lin = V @ alpha
        gv = g(lin)
        dgv = g.deriv(lin)
        r = (weight_rows * gv) @ V - target
        Jm = (V * (weight_rows * dgv)[:, None]).T @ V
        return r, Jm

    return residual_and_jac


def calibrate_standard(meas: HMeasure, g: GFunction = GFunction(),
                       columns=None, force_newton=False) -> CalibratedMeasure:
    """Match the weighted auxiliary mean to the full-population mean.

    Requires the sample rows to cover the whole population so the target
    mean is computable.  ``columns`` selects which auxiliary columns to
    calibrate on (all of v by default).  ``force_newton`` solves iteratively
    even when the affine closed form is available (for cross-validation).
    """
    sample = meas.sample
    if not sample.has_full_roster:
        raise CalibrationError(
            "standard calibration needs auxiliary data for all N units"
        )
    V = _select_columns(sample, columns)
    target = V.mean(axis=0)
    w = meas.weights / sample.N

    closure = _ht_fV_system(V, w, g, target)
    if g.kind == AFFINE and not force_newton:
        r0, Jm = closure(np.zeros(V.shape[1]))
        try:
            alpha = np.linalg.solve(Jm, -r0)
        except np.linalg.LinAlgError as exc:
            raise CalibrationError(
                f"singular calibration system: {exc}") from exc
        iters = 0
    else:
        alpha, iters = _damped_newton(closure, V.shape[1])
    r, _ = closure(alpha)

    factors = np.repeat(g(V @ alpha)[:, None], sample.n_sources, axis=1)
    return CalibratedMeasure(
        meas, STANDARD, g, [alpha], factors, columns=V,
        diagnostics={"iterations": iters,
                     "residual": float(np.linalg.norm(r, ord=np.inf))},
    )


def calibrate_source_specific(meas: HMeasure, g: GFunction = GFunction(),
                              columns=None,
                              force_newton=False) -> CalibratedMeasure:
    """Per-source calibration of weighted totals over that source's members.

    For each source j the equation sums the full weights of all selected
    units belonging to source j, adjusted by G(V' alpha_j), and matches the
    roster total of V over members of source j.  The solves are independent
    across sources; a unit's source-j mass is adjusted by its source-j factor.
    """
    sample = meas.sample
    if not sample.has_full_roster:
        raise CalibrationError(
            "source-specific calibration needs the full membership roster"
        )
    V = _select_columns(sample, columns)
    alphas = []
    factors = np.ones((sample.n_units, sample.n_sources))
    resids = []
    iters_all = []
    for j in range(sample.n_sources):
        member = sample.member_bits[:, j]
        target = (V * member[:, None]).sum(axis=0) / sample.N
        w = meas.weights * member / sample.N
        closure = _ht_fV_system(V, w, g, target)
        if g.kind == AFFINE and not force_newton:
            r0, Jm = closure(np.zeros(V.shape[1]))
            try:
                alpha = np.linalg.solve(Jm, -r0)
            except np.linalg.LinAlgError as exc:
                raise CalibrationError(
                    f"source {j}: singular calibration system: {exc}") from exc
            iters = 0
        else:
            alpha, iters = _damped_newton(closure, V.shape[1])
        r, _ = closure(alpha)
        alphas.append(alpha)
        resids.append(float(np.linalg.norm(r, ord=np.inf)))
        iters_all.append(iters)
        factors[:, j] = g(V @ alpha)
    return CalibratedMeasure(
        meas, SOURCE_SPECIFIC, g, alphas, factors, columns=V,
        diagnostics={"iterations": iters_all, "residual": max(resids)},
    )


def calibrate_sample_specific(meas: HMeasure, g: GFunction = GFunction(),
                              columns=None,
                              force_newton=False) -> CalibratedMeasure:
    """Within-source calibration on centered, rho-scaled auxiliaries.

    For each source j, with V_c = rho_j(V) V minus the source roster mean of
    rho_j(V) V, solve for alpha_j so the Horvitz-Thompson sum of
    G(V_c' alpha_j) V_c over source-j selected units is zero.  The source-j
    mass of a unit is then adjusted by G(V_c' alpha_j).
    """
    sample = meas.sample
    V = _select_columns(sample, columns)
    alphas = []
    factors = np.ones((sample.n_units, sample.n_sources))
    resids = []
    iters_all = []
    for j in range(sample.n_sources):
        member = sample.member_bits[:, j]
        Nj = int(sample.N_source[j])
        if Nj == 0:
            alphas.append(np.zeros(V.shape[1]))
            resids.append(0.0)
            iters_all.append(0)
            continue
        if int(member.sum()) != Nj:
            raise CalibrationError(
                f"source {j}: member roster incomplete; sample-specific "
                f"calibration needs auxiliaries for every member"
            )
        rv = meas.rho_values[:, [j]] * V
        roster_mean = (rv * member[:, None]).sum(axis=0) / Nj
        Vc = (rv - roster_mean[None, :]) * member[:, None]
        sel = sample.selected_bits[:, j]
        w = np.zeros(sample.n_units)
        w[sel] = 1.0 / sample.pi[sel, j] / Nj
        closure = _ht_fV_system(Vc, w, g, np.zeros(V.shape[1]))
        if g.kind == AFFINE and not force_newton:
            r0, Jm = closure(np.zeros(V.shape[1]))
            try:
                alpha = np.linalg.solve(Jm, -r0)
            except np.linalg.LinAlgError as exc:
                raise CalibrationError(
                    f"source {j}: singular centered second-moment matrix "
                    f"({exc})") from exc
            iters = 0
        else:
            alpha, iters = _damped_newton(closure, V.shape[1])
        r, _ = closure(alpha)
        alphas.append(alpha)
        resids.append(float(np.linalg.norm(r, ord=np.inf)))
        iters_all.append(iters)
        factors[:, j] = g(Vc @ alpha)
    return CalibratedMeasure(
        meas, SAMPLE_SPECIFIC, g, alphas, factors, columns=V,
        diagnostics={"iterations": iters_all, "residual": max(resids)},
    )


def calibrate(meas: HMeasure, method: str, g: GFunction = GFunction(),
              columns=None, force_newton=False) -> CalibratedMeasure:
    if method == STANDARD:
        return calibrate_standard(meas, g, columns, force_newton)
    if method == SOURCE_SPECIFIC:
        return calibrate_source_specific(meas, g, columns, force_newton)
    if method == SAMPLE_SPECIFIC:
        return calibrate_sample_specific(meas, g, columns, force_newton)
    raise ValueError(f"unknown calibration method {method!r}")


def variance_calibrated(cal: CalibratedMeasure, f) -> VarianceDecomposition:
    return cal.variance_wor(f)


def _select_columns(sample, columns):
    if columns is None:
        return np.asarray(sample.v, dtype=float)
    V = np.asarray(sample.v, dtype=float)[:, list(columns)]
    return V
