"""Weighted model fitting with plug-in variance decomposition.

Linear least squares, logistic regression, and Cox proportional hazards are
fitted by solving the weighted estimating equations under an HMeasure (or a
CalibratedMeasure).  Each fit returns the coefficient vector together with a
per-unit estimated influence function; the variance decomposition is the
weighted-measure variance of that influence, split into a population term
and one design term per source.
"""
from __future__ import annotations

import numpy as np

from .hmeasure import HMeasure, _masked
from .model import FitResult

LINEAR = "LINEAR"
LOGISTIC = "LOGISTIC"
COX = "COX"

MAX_ITER_LOGISTIC = 50
MAX_ITER_COX = 50
SCORE_TOL = 1e-10


class FitError(RuntimeError):
    pass


def _vardec(meas, influence):
    """Influence-function variance; unknown N only changes the normalizer."""
    if meas.sample.N is None:
        return meas.variance_unknown_N(
            influence, theta_hat=np.zeros(influence.shape[1]))
    return meas.variance_wor(influence)


def _finalize(meas, theta, influence, decomposition, diagnostics):
    N_eff = meas.N_effective
    se = decomposition.se(N_eff)
    return FitResult(
        theta_hat=np.asarray(theta, dtype=float),
        se=se,
        var_population=decomposition.population,
        var_design=list(decomposition.design),
        n_used=int(np.count_nonzero(meas.weights)),
        N_effective=float(N_eff),
        diagnostics=diagnostics,
    )


def _mean(meas, values):
    """Weighted mean under the measure, ratio-normalized when N is unknown."""
    if meas.sample.N is None:
        return meas.h_mean_ratio(values)
    return meas.h_mean(values)


# ---------------------------------------------------------------------------
# linear regression

def fit_linear(meas, y, z) -> FitResult:
    """Weighted least squares of y on z (arrays aligned with sample rows)."""
    sample = meas.sample
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] != sample.n_units:
        z = z.T
    y = np.asarray(y, dtype=float).ravel()
    d = z.shape[1]

    sel = meas.weights != 0
    zz = np.atleast_1d(_mean(meas, np.einsum(
        "ni,nj->nij", _masked(z, sel), z).reshape(sample.n_units, -1)))
    gram = np.asarray(zz, dtype=float).reshape(d, d)
    zy = np.atleast_1d(_mean(meas, _masked(z, sel) * _masked(
        y[:, None], sel)))
    try:
        theta = np.linalg.solve(gram, zy)
        gram_inv = np.linalg.inv(gram)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular weighted Gram matrix: {exc}") from exc

    resid = _masked((y - z @ theta)[:, None], sel)
    influence = (_masked(z, sel) * resid) @ gram_inv.T
    dec = _vardec(meas, influence)
    score = np.atleast_1d(_mean(meas, _masked(z, sel) * resid))
    return _finalize(meas, theta, influence, dec, {
        "model": LINEAR, "iterations": 1, "converged": True,
        "score_norm": float(np.linalg.norm(score, ord=np.inf)),
        "influence": influence,
    })


# ---------------------------------------------------------------------------
# logistic regression

def _expit(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def fit_logistic(meas, y, z) -> FitResult:
    """Weighted logistic regression via Newton iteration from zero."""
    sample = meas.sample
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[0] != sample.n_units:
        z = z.T
    y = np.asarray(y, dtype=float).ravel()
    sel = meas.weights != 0
    vals = np.unique(y[sel])
    if not np.all(np.isin(vals, (0.0, 1.0))):
        raise FitError("logistic response must be 0/1")
    d = z.shape[1]
    zm = _masked(z, sel)
    ym = _masked(y[:, None], sel).ravel()

    theta = np.zeros(d)
    converged = False
    for it in range(1, MAX_ITER_LOGISTIC + 1):
        mu = _expit(zm @ theta) * sel
        score = np.atleast_1d(_mean(meas, zm * (ym - mu)[:, None]))
        wt = mu * (1.0 - mu)
        info = np.asarray(np.atleast_1d(_mean(meas, np.einsum(
            "ni,nj->nij", zm * wt[:, None], zm).reshape(sample.n_units, -1)))
        ).reshape(d, d)
        norm = np.linalg.norm(score, ord=np.inf)
        if norm < SCORE_TOL:
            converged = True
            break
        try:
            theta = theta + np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular weighted information: {exc}") from exc
    if not converged:
        raise FitError(
            f"logistic fit did not converge in {MAX_ITER_LOGISTIC} iterations "
            f"(score norm {norm:.3e})"
        )

    try:
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular weighted information: {exc}") from exc
    influence = (zm * (ym - mu)[:, None]) @ info_inv.T
    dec = _vardec(meas, influence)
    return _finalize(meas, theta, influence, dec, {
        "model": LOGISTIC, "iterations": it, "converged": True,
        "score_norm": float(norm), "influence": influence,
    })


# ---------------------------------------------------------------------------
# Cox proportional hazards

class _CoxWork:
    """Sorted risk-set machinery for the weighted partial likelihood.

    Units are sorted by observed time; risk-set sums M_k(s) over units with
    time >= s become suffix cumulative sums.  Ties are handled in the
    Breslow convention (tied events share the same risk set).
    """

    def __init__(self, meas, time, status, z):
        sample = meas.sample
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if z.shape[0] != sample.n_units:
            z = z.T
        time = np.asarray(time, dtype=float).ravel()
        status = np.asarray(status, dtype=float).ravel()
        keep = meas.weights != 0
        if np.any(time[keep] < 0):
            raise FitError("negative survival times")
        if not np.any(status[keep] > 0):
            raise FitError("no events among selected units")
        order = np.argsort(time[keep], kind="stable")
        self.idx = np.nonzero(keep)[0][order]
        self.t = time[self.idx]
        self.d = status[self.idx]
        self.z = z[self.idx]
        self.w = np.asarray(meas.weights)[self.idx]
        self.N = meas.N_effective
        self.n, self.k = self.z.shape
        self.keep = keep
        self.n_units = sample.n_units

    def _tie_blocks(self):
        first = np.ones(self.n, dtype=bool)
        first[1:] = self.t[1:] != self.t[:-1]
        return np.maximum.accumulate(np.where(first, np.arange(self.n), 0))

    def moments(self, theta):
        """Suffix sums S0, S1, S2 of w * exp(theta'z) * (1, z, zz') by time.

        Sums are computed with the linear predictor shifted by its maximum
        for overflow safety; the shift is returned so absolute quantities
        (the baseline hazard) can be unscaled.
        """
        eta = self.z @ theta
        shift = float(eta.max())
        we = self.w * np.exp(eta - shift)
        s0 = np.cumsum(we[::-1])[::-1] / self.N
        s1 = np.cumsum((we[:, None] * self.z)[::-1], axis=0)[::-1] / self.N
        zz = np.einsum("ni,nj->nij", self.z, self.z)
        s2 = np.cumsum((we[:, None, None] * zz)[::-1], axis=0)[::-1] / self.N
        # tied times share a risk set: every row of a tie block uses the
        # suffix sum starting at the block's first index
        block = self._tie_blocks()
        return s0[block], s1[block], s2[block], shift

    def score_info(self, theta):
        s0, s1, s2, _ = self.moments(theta)
        zbar = s1 / s0[:, None]
        score = (self.w * self.d) @ (self.z - zbar) / self.N
        vmat = s2 / s0[:, None, None] - np.einsum("ni,nj->nij", zbar, zbar)
        info = np.einsum("n,nij->ij", self.w * self.d, vmat) / self.N
        return score, info

    def loglik(self, theta):
        eta = self.z @ theta
        s0, _, _, shift = self.moments(theta)
        return float((self.w * self.d) @ ((eta - shift) - np.log(s0)) / self.N)


def fit_cox(meas, time, status, z) -> FitResult:
    """Weighted Cox regression with Breslow baseline hazard.

    Returns a FitResult whose diagnostics carry the baseline cumulative
    hazard as a step function (event times and increments).
    """
    work = _CoxWork(meas, time, status, z)
    d = work.k
    theta = np.zeros(d)
    converged = False
    for it in range(1, MAX_ITER_COX + 1):
        score, info = work.score_info(theta)
        norm = np.linalg.norm(score, ord=np.inf)
        if norm < SCORE_TOL:
            converged = True
            break
        try:
            theta = theta + np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise FitError(f"singular partial-likelihood information: {exc}") from exc
    if not converged:
        raise FitError(
            f"Cox fit did not converge in {MAX_ITER_COX} iterations "
            f"(score norm {norm:.3e})"
        )

    # Breslow baseline increments at event times and the efficient score
    s0, s1, _, shift = work.moments(theta)
    if np.any(s0 <= 0):
        raise FitError("empty risk set at an event time")
    zbar = s1 / s0[:, None]
    # true S0 is s0 * exp(shift); keep the hazard on the true scale
    dLam = work.w * work.d * np.exp(-shift) / (work.N * s0)
    eta = work.z @ theta
    ehat = np.exp(eta)

    # cumulative integral of (z_i - zbar(t)) dLambda(t) over t <= y_i:
    # split into z_i * int dLam  -  int zbar dLam, both prefix sums over
    # rows in time order (ties included via searchsorted on the right).
    cum0 = np.cumsum(dLam)
    cum1 = np.cumsum(zbar * dLam[:, None], axis=0)
    pos = np.searchsorted(work.t, work.t, side="right") - 1
    int0 = cum0[pos]
    int1 = cum1[pos]

    ell_star = (work.d[:, None] * (work.z - zbar)
                - ehat[:, None] * (work.z * int0[:, None] - int1))

    # scatter back to full-sample rows
    full = np.zeros((work.n_units, d))
    full[work.idx] = ell_star
    info_hat = np.asarray(np.atleast_1d(_mean(meas, np.einsum(
        "ni,nj->nij", full, full).reshape(work.n_units, -1)))).reshape(d, d)
    try:
        info_inv = np.linalg.inv(info_hat)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"singular efficient information: {exc}") from exc
    influence = full @ info_inv.T
    dec = _vardec(meas, influence)

    events = work.d > 0
    baseline = {
        "time": work.t[events],
        "increment": dLam[events],
    }
    return _finalize(meas, theta, influence, dec, {
        "model": COX, "iterations": it, "converged": True,
        "score_norm": float(norm), "influence": influence,
        "baseline_hazard": baseline,
    })


def breslow_cumhaz(result: FitResult, t):
    """Baseline cumulative hazard from a Cox fit, evaluated at times t."""
    base = result.diagnostics["baseline_hazard"]
    cum = np.cumsum(base["increment"])
    pos = np.searchsorted(base["time"], np.asarray(t, dtype=float),
                          side="right") - 1
    out = np.where(pos >= 0, cum[np.maximum(pos, 0)], 0.0)
    return out


# ---------------------------------------------------------------------------
# score / objective consistency checks

def _objective_and_score(kind, meas, theta, y=None, z=None, time=None,
                         status=None):
    sample = meas.sample
    sel = meas.weights != 0
    if kind == COX:
        work = _CoxWork(meas, time, status, z)
        score, _ = work.score_info(theta)
        return work.loglik(theta), score
    z2 = np.atleast_2d(np.asarray(z, dtype=float))
    if z2.shape[0] != sample.n_units:
        z2 = z2.T
    zm = _masked(z2, sel)
    ym = _masked(np.asarray(y, dtype=float).ravel()[:, None], sel).ravel()
    eta = zm @ theta
    if kind == LINEAR:
        obj = -0.5 * float(np.atleast_1d(_mean(meas, ((ym - eta) ** 2)[:, None]))[0])
        score = np.atleast_1d(_mean(meas, zm * (ym - eta)[:, None]))
        return obj, score
    if kind == LOGISTIC:
        mu = _expit(eta) * sel
        ll = ym * eta - np.log1p(np.exp(-np.abs(eta))) - np.maximum(eta, 0.0)
        obj = float(np.atleast_1d(_mean(meas, ll[:, None]))[0])
        score = np.atleast_1d(_mean(meas, zm * (ym - mu)[:, None]))
        return obj, score
    raise ValueError(f"unknown model kind {kind!r}")


def check_score_gradient(kind, meas, theta, h=1e-6, **data):
    """Max relative error between the analytic weighted score and central
    finite differences of the weighted objective at theta."""
    theta = np.asarray(theta, dtype=float)
    _, score = _objective_and_score(kind, meas, theta, **data)
    num = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        up, _ = _objective_and_score(kind, meas, theta + e, **data)
        dn, _ = _objective_and_score(kind, meas, theta - e, **data)
        num[i] = (up - dn) / (2.0 * h)
    denom = np.maximum(np.abs(score), 1.0)
    return float(np.max(np.abs(num - score) / denom))


# ---------------------------------------------------------------------------
# estimator-object facade

class _BaseEstimator:
    """Minimal fit/params facade over the functional interface."""

    kind = None

    def __init__(self):
        self.result_ = None

    def get_params(self, deep=True):
        return {}

    def set_params(self, **params):
        for k, v in params.items():
            setattr(self, k, v)
        return self

    @property
    def coef_(self):
        self._check_fitted()
        return self.result_.theta_hat

    @property
    def se_(self):
        self._check_fitted()
        return self.result_.se

    def _check_fitted(self):
        if self.result_ is None:
            raise FitError("estimator is not fitted")


class LinearEstimator(_BaseEstimator):
    kind = LINEAR

    def fit(self, meas, y, z):
        self.result_ = fit_linear(meas, y, z)
        return self


class LogisticEstimator(_BaseEstimator):
    kind = LOGISTIC

    def fit(self, meas, y, z):
        self.result_ = fit_logistic(meas, y, z)
        return self


class CoxEstimator(_BaseEstimator):
    kind = COX

    def fit(self, meas, time, status, z):
        self.result_ = fit_cox(meas, time, status, z)
        return self

    def baseline_cumhaz(self, t):
        self._check_fitted()
        return breslow_cumhaz(self.result_, t)
