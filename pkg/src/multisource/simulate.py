"""Scenario presets and the Monte Carlo harness.

A Scenario bundles a population recipe, a source layout, a subsampling
design, a model kind with its true coefficients, a weighting recipe, and an
optional calibration.  The engine draws replicates on independent RNG
substreams, fits each one, and aggregates bias / SD / SEE / coverage;
``compare_weights`` re-uses the same draws across weighting and calibration
cells (common random numbers) so the comparison isolates the weighting.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import ndtri

from . import calibration as cal_mod
from . import estimators as est_mod
from . import rho as rho_mod
from .hmeasure import HMeasure
from .model import SourceLayout
from .sampling import WOR, DesignSpec, draw_population, draw_selections, substream

WALD_Z = 1.959964


def replicate_seed(master, r):
    """Deterministic 64-bit substream seed for replicate r."""
    ss = np.random.SeedSequence(int(master), spawn_key=(int(r),))
    return int(ss.generate_state(2, np.uint64)[0])


# ---------------------------------------------------------------------------
# population recipes

def _survival_draw(rng, N, alpha, beta, theta, censor_scale):
    z1 = rng.binomial(1, 0.5, N).astype(float)
    z2 = rng.normal(size=N)
    eta = theta[0] * z1 + theta[1] * z2
    # baseline cumulative hazard (alpha * t) ** beta
    e = rng.exponential(size=N)
    t = (e * np.exp(-eta)) ** (1.0 / beta) / alpha
    c = rng.uniform(0.0, censor_scale, N)
    y = np.minimum(t, c)
    delta = (t <= c).astype(float)
    u = np.where(rng.random(N) < 0.9, z1, 1.0 - z1)
    return z1, z2, y, delta, u


def _cox_generator(alpha, beta, theta, censor_scale, with_category=False,
                   category_beta=(-1.0, 5.0, 3.0)):
    def gen(rng, N):
        z1, z2, y, delta, u = _survival_draw(rng, N, alpha, beta, theta,
                                             censor_scale)
        if with_category:
            logits = np.outer(z2, np.asarray(category_beta))
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            draw = rng.random(N)
            cat = (draw[:, None] > np.cumsum(probs, axis=1)).sum(axis=1)
        else:
            cat = np.zeros(N)
        x = np.column_stack([y, delta, z1, z2])
        v = np.column_stack([z2, delta, u, y, cat])
        return x, v
    return gen


def _linear_generator(theta):
    def gen(rng, N):
        z = rng.normal(size=N)
        e = rng.normal(size=N)
        y = theta[0] + theta[1] * z + e
        x = np.column_stack([y, z])
        v = z[:, None]
        return x, v
    return gen


def _logistic_generator(theta, v_is_y=False):
    def gen(rng, N):
        z = rng.normal(size=N)
        p = 1.0 / (1.0 + np.exp(-(theta[0] + theta[1] * z)))
        y = (rng.random(N) < p).astype(float)
        x = np.column_stack([y, z])
        v = y[:, None] if v_is_y else z[:, None]
        return x, v
    return gen


# V column layout for Cox recipes: [z2, delta, u, y, category]
COX_V_Z2, COX_V_DELTA, COX_V_U, COX_V_Y, COX_V_CAT = range(5)


def _cox_layout(scenario_kind):
    if scenario_kind == 1:
        def member(v):
            m1 = v[:, COX_V_Z2] >= -1.0
            m2 = v[:, COX_V_Z2] <= 1.0
            return m1.astype(np.int64) | (m2.astype(np.int64) << 1)
        return SourceLayout(2, member)
    if scenario_kind == 2:
        def member(v):
            m2 = v[:, COX_V_Z2] <= 1.0
            return 1 | (m2.astype(np.int64) << 1)
        return SourceLayout(2, member)
    if scenario_kind == 3:
        def member(v):
            m2 = v[:, COX_V_DELTA] == 1.0
            return 1 | (m2.astype(np.int64) << 1)
        return SourceLayout(2, member)
    if scenario_kind == 4:
        def member(v):
            cat = v[:, COX_V_CAT]
            m1 = cat <= 1.0
            m2 = cat >= 1.0
            m3 = v[:, COX_V_DELTA] == 1.0
            return (m1.astype(np.int64) | (m2.astype(np.int64) << 1)
                    | (m3.astype(np.int64) << 2))
        return SourceLayout(3, member)
    raise ValueError(f"unknown Cox scenario {scenario_kind}")


def _interval_layout(lower=None, upper=None, col=0):
    """Two sources defined by one-sided intervals of a single v column."""
    def member(v):
        m1 = np.ones(v.shape[0], dtype=np.int64) if lower is None \
            else (v[:, col] >= lower).astype(np.int64)
        m2 = np.ones(v.shape[0], dtype=np.int64) if upper is None \
            else (v[:, col] <= upper).astype(np.int64)
        return m1 | (m2 << 1)
    return SourceLayout(2, member)


@lru_cache(maxsize=None)
def censoring_scale(alpha, beta, theta1, theta2, target_event_rate,
                    n=10 ** 6, seed=20_240_801):
    """Censoring-distribution scale hitting a target event fraction.

    One-off bisection on P(T <= C) with C ~ Uniform(0, scale), using a large
    simulated pool of (T, C/scale) pairs; deterministic given the seed.
    """
    rng = substream(seed, 7)
    theta = (theta1, theta2)
    z1 = rng.binomial(1, 0.5, n).astype(float)
    z2 = rng.normal(size=n)
    eta = theta[0] * z1 + theta[1] * z2
    e = rng.exponential(size=n)
    t = (e * np.exp(-eta)) ** (1.0 / beta) / alpha
    frac = rng.random(n)

    lo, hi = 1e-12, 1.0
    while np.mean(t <= hi * frac) < target_event_rate:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("censoring calibration failed to bracket")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if np.mean(t <= mid * frac) < target_event_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# scenario definitions

@dataclass(frozen=True)
class Scenario:
    """A complete simulation configuration."""

    name: str
    model: str                      # LINEAR / LOGISTIC / COX
    theta0: Sequence[float]
    fractions: Sequence[float]
    n_reps: int = 500
    N: int = 500
    seed: int = 2024
    mode: str = WOR
    rho: rho_mod.RhoRecipe = rho_mod.RhoRecipe(rho_mod.OPT_BERNOULLI)
    calibration: Optional[str] = None
    g_kind: str = cal_mod.AFFINE
    calibrate_cols: Optional[Sequence[int]] = None
    unknown_N: bool = False
    params: dict = field(default_factory=dict)

    def generator(self):
        th = tuple(self.theta0)
        if self.model == est_mod.COX:
            p = self.params
            scale = p.get("censor_scale")
            if scale is None:
                scale = censoring_scale(p["alpha"], p["beta"], th[0], th[1],
                                        p["target_event_rate"])
            return _cox_generator(p["alpha"], p["beta"], th, scale,
                                  with_category=p.get("scenario") == 4)
        if self.model == est_mod.LINEAR:
            return _linear_generator(th)
        return _logistic_generator(th, v_is_y=self.params.get("v_is_y", False))

    def layout(self):
        if self.model == est_mod.COX:
            return _cox_layout(self.params["scenario"])
        kind = self.params.get("scenario", 1)
        if self.model == est_mod.LOGISTIC and self.params.get("v_is_y"):
            def member(v):
                return 1 | ((v[:, 0] == 1.0).astype(np.int64) << 1)
            return SourceLayout(2, member)
        if kind == 1:
            return _interval_layout(lower=-1.0, upper=1.0)
        return _interval_layout(lower=None, upper=1.0)

    def design(self, seed):
        return DesignSpec(self.mode, tuple(self.fractions), seed=seed)


def _preset_table():
    log2 = math.log(2.0)
    cox_common = {"alpha": 0.2, "beta": 0.5, "target_event_rate": 0.1529}
    return {
        "scenario1": Scenario("scenario1", est_mod.COX, (log2, log2),
                              (0.2, 0.3), params={**cox_common, "scenario": 1}),
        "scenario2": Scenario("scenario2", est_mod.COX, (log2, log2),
                              (0.2, 0.3), params={**cox_common, "scenario": 2}),
        "scenario3": Scenario("scenario3", est_mod.COX, (log2, log2),
                              (0.2, 1.0), params={**cox_common, "scenario": 3}),
        "scenario4": Scenario("scenario4", est_mod.COX, (log2, log2),
                              (0.1, 0.1, 1.0),
                              params={**cox_common, "scenario": 4}),
        "linear-s1": Scenario("linear-s1", est_mod.LINEAR, (1.0, 1.0),
                              (0.2, 0.3), params={"scenario": 1}),
        "linear-s2": Scenario("linear-s2", est_mod.LINEAR, (1.0, 1.0),
                              (0.2, 0.3), params={"scenario": 2}),
        "logistic-s1": Scenario("logistic-s1", est_mod.LOGISTIC,
                                (-1.5, log2), (0.2, 0.3),
                                params={"scenario": 1}),
        "logistic-s2": Scenario("logistic-s2", est_mod.LOGISTIC,
                                (-1.5, log2), (0.2, 0.3),
                                params={"scenario": 2}),
        "logistic-s3": Scenario("logistic-s3", est_mod.LOGISTIC,
                                (-1.5, log2), (0.2, 1.0),
                                params={"scenario": 3, "v_is_y": True}),
    }


PRESETS = _preset_table()


def get_scenario(name, **overrides) -> Scenario:
    if name not in PRESETS:
        raise KeyError(
            f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}"
        )
    s = PRESETS[name]
    params = overrides.pop("params", None)
    if params:
        merged = dict(s.params)
        merged.update(params)
        overrides["params"] = merged
    if "theta0" in overrides and s.model == est_mod.COX:
        # a new theta invalidates any cached censoring scale bound to it
        overrides.setdefault("params", dict(s.params))
    return replace(s, **overrides)


# ---------------------------------------------------------------------------
# the Monte Carlo engine

@dataclass
class MCSummary:
    """Per-replicate rows and the usual aggregate columns."""

    scenario: str
    theta0: np.ndarray
    theta: np.ndarray               # (n_ok, d)
    se: np.ndarray                  # (n_ok, d)
    replicate: np.ndarray           # (n_ok,)
    failures: List[tuple]           # (replicate, message)
    extra: List[dict] = field(default_factory=list)

    @property
    def n_requested(self):
        return self.theta.shape[0] + len(self.failures)

    @property
    def failure_rate(self):
        return len(self.failures) / max(self.n_requested, 1)

    @property
    def unstable(self):
        return self.failure_rate > 0.05

    def bias(self):
        return np.abs(self.theta.mean(axis=0) - self.theta0)

    def sd(self):
        return self.theta.std(axis=0, ddof=1)

    def see(self):
        return self.se.mean(axis=0)

    def coverage(self):
        lo = self.theta - WALD_Z * self.se
        hi = self.theta + WALD_Z * self.se
        return ((lo <= self.theta0) & (self.theta0 <= hi)).mean(axis=0)

    def table(self):
        return {
            "bias": self.bias().tolist(),
            "sd": self.sd().tolist(),
            "see": self.see().tolist(),
            "coverage": self.coverage().tolist(),
            "failures": len(self.failures),
            "replicates": self.n_requested,
            "unstable": self.unstable,
        }


def build_measure(scenario: Scenario, sample, rho_recipe=None,
                  calibration=...):
    """Weighting plus optional calibration for one realized sample."""
    layout = scenario.layout()
    recipe = scenario.rho if rho_recipe is None else rho_recipe
    if recipe.kind == rho_mod.OPT_BERNOULLI and "p" not in recipe.params:
        recipe = rho_mod.RhoRecipe(rho_mod.OPT_BERNOULLI,
                                   {"p": tuple(scenario.fractions)})
    f = None
    if recipe.kind == rho_mod.OPT_WOR:
        pilot = HMeasure(sample, rho_mod.build_scheme(
            rho_mod.RhoRecipe(rho_mod.BALANCED), layout, sample))
        f = _fit(scenario, pilot).diagnostics["influence"][:, 0]
    scheme = rho_mod.build_scheme(recipe, layout, sample, f=f)
    meas = HMeasure(sample, scheme)
    method = scenario.calibration if calibration is ... else calibration
    if method:
        meas = cal_mod.calibrate(meas, method,
                                 cal_mod.GFunction(scenario.g_kind),
                                 columns=scenario.calibrate_cols)
    return meas


def _fit(scenario: Scenario, meas):
    x = meas.sample.x
    if scenario.model == est_mod.COX:
        return est_mod.fit_cox(meas, x[:, 0], x[:, 1], x[:, 2:])
    z = np.column_stack([np.ones(x.shape[0]), x[:, 1:]])
    if scenario.model == est_mod.LINEAR:
        return est_mod.fit_linear(meas, x[:, 0], z)
    return est_mod.fit_logistic(meas, x[:, 0], z)


def draw_replicate(scenario: Scenario, r):
    seed = replicate_seed(scenario.seed, r)
    layout = scenario.layout()
    pop = draw_population(scenario.generator(), scenario.N, layout, seed)
    sample = draw_selections(pop, scenario.design(seed))
    if scenario.unknown_N:
        sample = sample_with_unknown_N(sample)
    return sample


def sample_with_unknown_N(sample):
    from .model import MergedSample
    return MergedSample(sample.x, sample.v, sample.member_mask,
                        sample.selected, N=None, N_source=sample.N_source,
                        stratum=sample.stratum, N_stratum=sample.N_stratum,
                        n_sources=sample.n_sources)


def run_scenario(scenario: Scenario, per_replicate=None) -> MCSummary:
    """Run all replicates and aggregate; solver failures are recorded, not
    dropped silently."""
    thetas, ses, reps, fails, extras = [], [], [], [], []
    for r in range(scenario.n_reps):
        try:
            sample = draw_replicate(scenario, r)
            meas = build_measure(scenario, sample)
            fit = _fit(scenario, meas)
        except (est_mod.FitError, cal_mod.CalibrationError, ValueError) as exc:
            fails.append((r, str(exc)))
            continue
        thetas.append(fit.theta_hat)
        ses.append(fit.se)
        reps.append(r)
        if per_replicate is not None:
            extras.append(per_replicate(meas, fit))
    d = len(scenario.theta0)
    return MCSummary(
        scenario=scenario.name,
        theta0=np.asarray(scenario.theta0, dtype=float),
        theta=np.asarray(thetas).reshape(-1, d),
        se=np.asarray(ses).reshape(-1, d),
        replicate=np.asarray(reps, dtype=int),
        failures=fails,
        extra=extras,
    )


def compare_weights(scenario: Scenario, recipes, calibrations=(None,),
                    per_replicate=None):
    """Grid of MCSummary cells over (weighting recipe, calibration).

    All cells at replicate r share the same population and selection draws;
    only the weighting and calibration differ.
    """
    cells = {(rc.kind, c): {"theta": [], "se": [], "reps": [], "fails": [],
                            "extra": []}
             for rc in recipes for c in calibrations}
    for r in range(scenario.n_reps):
        sample = draw_replicate(scenario, r)
        for rc in recipes:
            for c in calibrations:
                cell = cells[(rc.kind, c)]
                try:
                    meas = build_measure(scenario, sample, rho_recipe=rc,
                                         calibration=c)
                    fit = _fit(scenario, meas)
                except (est_mod.FitError, cal_mod.CalibrationError,
                        ValueError) as exc:
                    cell["fails"].append((r, str(exc)))
                    continue
                cell["theta"].append(fit.theta_hat)
                cell["se"].append(fit.se)
                cell["reps"].append(r)
                if per_replicate is not None:
                    cell["extra"].append(per_replicate(meas, fit))
    d = len(scenario.theta0)
    out = {}
    for key, cell in cells.items():
        out[key] = MCSummary(
            scenario=f"{scenario.name}:{key[0]}:{key[1]}",
            theta0=np.asarray(scenario.theta0, dtype=float),
            theta=np.asarray(cell["theta"]).reshape(-1, d),
            se=np.asarray(cell["se"]).reshape(-1, d),
            replicate=np.asarray(cell["reps"], dtype=int),
            failures=cell["fails"],
            extra=cell["extra"],
        )
    return out


def qq_data(summary: MCSummary, coef=0):
    """Sorted standardized estimates against standard-normal quantiles."""
    if summary.theta.shape[0] < 100:
        raise ValueError("need at least 100 replicates for quantile pairs")
    se = summary.se[:, coef]
    if np.any(se <= 0):
        raise ValueError("degenerate standardization (zero standard error)")
    std = np.sort((summary.theta[:, coef] - summary.theta0[coef]) / se)
    n = std.size
    probs = (np.arange(1, n + 1) - 0.5) / n
    return np.column_stack([ndtri(probs), std])
