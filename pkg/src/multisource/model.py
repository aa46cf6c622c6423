"""Core domain types for estimation from merged overlapping data sources.

A *source* is a subpopulation from which an independent subsample is drawn.
Sources may overlap, so a unit can be sampled more than once without being
identified as a duplicate.  Everything downstream (weighting, calibration,
model fitting) consumes the types defined here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np

MAX_SOURCES = 32


def _as_readonly(a, dtype=None):
    out = np.asarray(a, dtype=dtype)
    out = out.copy()
    out.flags.writeable = False
    return out


def mask_bits(mask):
    """Return the sorted list of source indices set in an integer bitmask."""
    return [j for j in range(MAX_SOURCES) if mask >> j & 1]


@dataclass(frozen=True)
class SourceLayout:
    """Declaration of J overlapping sources over the auxiliary space.

    Parameters
    ----------
    n_sources : int
        Number of sources J (1 <= J <= 32).
    membership : callable
        Vectorized rule mapping an (n, dv) array of auxiliary records to an
        (n,) integer array of membership bitmasks (bit j set iff the record
        belongs to source j).
    strata : sequence of callables or None, optional
        Per-source stratum rules.  Entry j is either None (one stratum) or a
        vectorized callable mapping (n, dv) auxiliary records to (n,) integer
        stratum labels in [0, n_strata[j]) for members of source j.
    n_strata : sequence of int, optional
        Stratum counts per source; required where strata rules are given.
    """

    n_sources: int
    membership: Callable[[np.ndarray], np.ndarray]
    strata: Optional[Sequence[Optional[Callable]]] = None
    n_strata: Optional[Sequence[int]] = None

    def __post_init__(self):
        if not 1 <= self.n_sources <= MAX_SOURCES:
            raise ValueError(
                f"n_sources must be in [1, {MAX_SOURCES}], got {self.n_sources}"
            )
        if self.strata is not None and len(self.strata) != self.n_sources:
            raise ValueError("strata must have one entry per source")

    def member_masks(self, v):
        """Evaluate the membership rule on an (n, dv) array of records."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        masks = np.asarray(self.membership(v))
        return masks.astype(np.int64)

    def stratum_labels(self, v, j):
        """Stratum labels for source j; zeros when the source has no strata."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        if self.strata is None or self.strata[j] is None:
            return np.zeros(v.shape[0], dtype=np.int64)
        return np.asarray(self.strata[j](v), dtype=np.int64)


class MergedSample:
    """A merged dataset of units drawn from overlapping sources.

    One row per unit.  ``member_mask`` records which sources a unit belongs
    to; ``selected`` records which sources actually sampled it (a subset of
    the membership bits).  Analysis variables ``x`` may be missing (NaN) for
    units never selected.

    ``N`` may be None, which puts the sample in unknown-population-size mode
    (estimators then normalize by the weight total instead of N).

    The realized per-source inclusion probability of a member of source j is
    n_j / N_j, or its per-stratum analogue when stratum labels are supplied.
    Instances are treated as immutable after construction.
    """

    def __init__(self, x, v, member_mask, selected, N=..., N_source=None,
                 stratum=None, N_stratum=None, n_sources=None):
        self.v = _as_readonly(np.atleast_2d(v), dtype=float)
        n_rows = self.v.shape[0]
        if x is None:
            x = np.empty((n_rows, 0))
        self.x = _as_readonly(np.atleast_2d(x), dtype=float)
        self.member_mask = _as_readonly(member_mask, dtype=np.int64)
        self.selected = _as_readonly(selected, dtype=np.int64)
        if not (self.x.shape[0] == n_rows == self.member_mask.shape[0]
                == self.selected.shape[0]):
            raise ValueError("all per-unit arrays must share the same length")

        all_bits = int(np.bitwise_or.reduce(self.member_mask)) if n_rows else 0
        self.n_sources = (max(1, all_bits.bit_length()) if n_sources is None
                          else int(n_sources))
        J = self.n_sources

        self.N = n_rows if N is ... else (None if N is None else int(N))
        bits = (self.member_mask[:, None] >> np.arange(J)) & 1
        sel_bits = (self.selected[:, None] >> np.arange(J)) & 1
        self.member_bits = _as_readonly(bits.astype(bool))
        self.selected_bits = _as_readonly(sel_bits.astype(bool))

        if N_source is None:
            self.N_source = _as_readonly(bits.sum(axis=0), dtype=np.int64)
        else:
            self.N_source = _as_readonly(N_source, dtype=np.int64)
        self.n_source = _as_readonly(sel_bits.sum(axis=0), dtype=np.int64)

        if stratum is None:
            self.stratum = None
            self.N_stratum = None
            self.n_stratum = None
        else:
            self.stratum = _as_readonly(stratum, dtype=np.int64)
            if self.stratum.shape != (n_rows, J):
                raise ValueError("stratum must have shape (n_units, n_sources)")
            K = int(self.stratum.max()) + 1 if n_rows else 1
            if N_stratum is None:
                N_st = np.zeros((J, K), dtype=np.int64)
                for j in range(J):
                    lab = self.stratum[:, j][self.member_bits[:, j]]
                    if lab.size:
                        np.add.at(N_st, (j, lab), 1)
            else:
                N_st = np.asarray(N_stratum, dtype=np.int64)
                K = N_st.shape[1]
            n_st = np.zeros((J, K), dtype=np.int64)
            for j in range(J):
                lab = self.stratum[:, j][self.selected_bits[:, j]]
                if lab.size:
                    np.add.at(n_st, (j, lab), 1)
            self.N_stratum = _as_readonly(N_st)
            self.n_stratum = _as_readonly(n_st)

        self.pi = _as_readonly(self._compute_pi())

    def _compute_pi(self):
        n_rows = self.v.shape[0]
        J = self.n_sources
        pi = np.zeros((n_rows, J))
        if self.stratum is None:
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(self.N_source > 0,
                                self.n_source / np.maximum(self.N_source, 1), 0.0)
            pi = self.member_bits * frac[None, :]
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(self.N_stratum > 0,
                                self.n_stratum / np.maximum(self.N_stratum, 1), 0.0)
            for j in range(J):
                m = self.member_bits[:, j]
                pi[m, j] = frac[j, self.stratum[m, j]]
        return pi

    @property
    def n_units(self):
        return self.v.shape[0]

    @property
    def has_full_roster(self):
        """True when the rows cover the whole population of size N."""
        return self.N is not None and self.N == self.n_units

    @property
    def p_hat(self):
        """Realized per-source sampling fractions n_j / N_j."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.N_source > 0,
                            self.n_source / np.maximum(self.N_source, 1), 0.0)

    def with_selected(self, selected, stratum=None):
        """Return a copy of this sample with new selection flags."""
        return MergedSample(
            self.x, self.v, self.member_mask, selected,
            N=self.N, N_source=self.N_source,
            stratum=self.stratum if stratum is None else stratum,
            N_stratum=self.N_stratum, n_sources=self.n_sources,
        )


@dataclass(frozen=True)
class WeightScheme:
    """Duplication weights: one simplex vector of constants per membership cell.

    ``cells`` maps a nonzero membership bitmask to a length-J vector whose
    entries are zero outside the mask and sum to one over the mask.
    """

    n_sources: int
    cells: Dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for mask, c in self.cells.items():
            mask = int(mask)
            if mask == 0:
                raise ValueError("cell mask must be nonzero")
            c = np.asarray(c, dtype=float)
            if c.shape != (self.n_sources,):
                raise ValueError(
                    f"cell {mask:b}: constants must be a length-{self.n_sources} vector"
                )
            off = [j for j in range(self.n_sources) if not mask >> j & 1]
            if off and np.any(c[off] != 0.0):
                raise ValueError(f"cell {mask:b}: nonzero weight outside the mask")
            if np.any(c < 0):
                raise ValueError(f"cell {mask:b}: negative weight")
            if abs(c.sum() - 1.0) > 1e-12:
                raise ValueError(f"cell {mask:b}: weights sum to {c.sum()}, not 1")
            clean[mask] = _as_readonly(c)
        object.__setattr__(self, "cells", clean)

    def rho(self, member_mask):
        """Per-unit, per-source rho values for an array of membership masks.

        Singleton cells default to weight 1 without needing an explicit entry.
        """
        member_mask = np.asarray(member_mask, dtype=np.int64)
        out = np.zeros((member_mask.shape[0], self.n_sources))
        for mask in np.unique(member_mask):
            mask = int(mask)
            if mask == 0:
                continue
            rows = member_mask == mask
            if mask in self.cells:
                out[rows] = self.cells[mask]
            else:
                bits = mask_bits(mask)
                if len(bits) == 1:
                    out[rows, bits[0]] = 1.0
                else:
                    raise KeyError(
                        f"no weights declared for membership cell {mask:b}"
                    )
        return out


@dataclass(frozen=True)
class FitResult:
    """Fitted coefficients with a population/design variance decomposition.

    ``se[k] = sqrt((var_population + sum_j var_design[j])[k, k] / N)``,
    with the estimated population size in place of N when N is unknown.
    """

    theta_hat: np.ndarray
    se: np.ndarray
    var_population: np.ndarray
    var_design: Sequence[np.ndarray]
    n_used: int
    N_effective: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def var_total(self):
        return self.var_population + sum(self.var_design)

    def wald_interval(self, level_z=1.959964):
        lo = self.theta_hat - level_z * self.se
        hi = self.theta_hat + level_z * self.se
        return lo, hi


def validate_sample(sample: MergedSample, layout: SourceLayout):
    """Check MergedSample/SourceLayout invariants; returns a list of violations.

    An empty list means the sample is valid.
    """
    report = []
    if layout.n_sources != sample.n_sources and sample.member_mask.size:
        top = int(np.bitwise_or.reduce(sample.member_mask)).bit_length()
        if top > layout.n_sources:
            report.append(
                f"membership mask uses source bit {top} beyond layout J={layout.n_sources}"
            )
    bad = np.nonzero(sample.selected & ~sample.member_mask)[0]
    for i in bad:
        extra = int(sample.selected[i] & ~sample.member_mask[i])
        for j in mask_bits(extra):
            report.append(f"unit {i}: selected in source {j} without membership")
    zero = np.nonzero(sample.member_mask == 0)[0]
    for i in zero:
        report.append(f"unit {i}: belongs to no source (sources must cover V)")

    if sample.has_full_roster:
        masks = layout.member_masks(sample.v)
        mism = np.nonzero(masks != sample.member_mask)[0]
        for i in mism[:10]:
            report.append(
                f"unit {i}: stored membership {int(sample.member_mask[i]):b} "
                f"differs from layout rule {int(masks[i]):b}"
            )

    for j in range(sample.n_sources):
        if sample.N_source[j] > 0 and sample.n_source[j] == 0:
            report.append(
                f"source {j}: empty subsample from nonempty source "
                f"(N^({j})={sample.N_source[j]}, n^({j})=0)"
            )
        if sample.n_source[j] > sample.N_source[j]:
            report.append(
                f"source {j}: n^({j})={sample.n_source[j]} exceeds "
                f"N^({j})={sample.N_source[j]}"
            )

    sel_rows = sample.selected != 0
    if sample.x.shape[1]:
        missing = sel_rows & np.isnan(sample.x).any(axis=1)
        for i in np.nonzero(missing)[0]:
            report.append(f"unit {i}: selected but analysis record x is missing")
    return report
