"""Construction of duplication-weight schemes.

A unit that belongs to several sources can be selected more than once; the
weight function rho splits each unit's mass across the sources of its
membership cell so duplicated selection is corrected without identifying
duplicates.  Besides the simple balanced and single-frame splits, this module
implements the variance-optimal splits for Bernoulli subsampling (closed
form, any J) and for without-replacement subsampling (J = 2, moment-based).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import MergedSample, SourceLayout, WeightScheme, mask_bits

BALANCED = "BALANCED"
SINGLE_FRAME = "SINGLE_FRAME"
OPT_BERNOULLI = "OPT_BERNOULLI"
OPT_WOR = "OPT_WOR"


@dataclass(frozen=True)
class RhoRecipe:
    """A named recipe for building a WeightScheme.

    ``params`` carries the kind-specific inputs: sampling fractions for
    OPT_BERNOULLI, or the pilot configuration for OPT_WOR.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in (BALANCED, SINGLE_FRAME, OPT_BERNOULLI, OPT_WOR):
            raise ValueError(f"unknown rho recipe {self.kind!r}")


def od(p):
    """The odds-type factor (1 - p) / p."""
    p = np.asarray(p, dtype=float)
    return (1.0 - p) / p


def _cell_masks(layout: SourceLayout, masks=None):
    J = layout.n_sources
    if masks is not None:
        out = sorted({int(m) for m in np.asarray(masks).ravel() if int(m) != 0})
        return out
    if J > 16:
        raise ValueError("pass the observed membership masks when J > 16")
    return list(range(1, 1 << J))


def balanced_rho(layout: SourceLayout, masks=None) -> WeightScheme:
    """Equal split 1/|cell| across the member sources of each cell."""
    J = layout.n_sources
    cells = {}
    for mask in _cell_masks(layout, masks):
        bits = mask_bits(mask)
        c = np.zeros(J)
        c[bits] = 1.0 / len(bits)
        cells[mask] = c
    return WeightScheme(J, cells)


def single_frame_rho(layout: SourceLayout, sample: MergedSample,
                     masks=None) -> WeightScheme:
    """Cell constants proportional to realized inclusion probabilities.

    Within each cell, source j gets pi_j / sum over member sources of pi_m,
    the classical single-frame weighting.
    """
    J = layout.n_sources
    p = sample.p_hat
    cells = {}
    if masks is None:
        masks = np.unique(sample.member_mask)
    for mask in _cell_masks(layout, masks):
        bits = mask_bits(mask)
        c = np.zeros(J)
        tot = p[bits].sum()
        if tot <= 0:
            c[bits] = 1.0 / len(bits)
        else:
            c[bits] = p[bits] / tot
        cells[mask] = c
    return WeightScheme(J, cells)


def optimal_rho_bernoulli(p, layout: SourceLayout, masks=None) -> WeightScheme:
    """Variance-optimal cell constants under Bernoulli subsampling.

    For a cell whose member sources all subsample with fraction < 1, source
    j's constant is proportional to the product of od(p_m) over the other
    members.  Sources sampled as a census (p = 1) absorb the whole cell
    weight, split uniformly among themselves.
    """
    p = np.asarray(p, dtype=float)
    if np.any(p <= 0) or np.any(p > 1):
        raise ValueError("fractions must lie in (0, 1]")
    J = layout.n_sources
    if p.shape != (J,):
        raise ValueError(f"need one fraction per source, got shape {p.shape}")
    cells = {}
    for mask in _cell_masks(layout, masks):
        bits = mask_bits(mask)
        c = np.zeros(J)
        census = [j for j in bits if p[j] == 1.0]
        if census:
            c[census] = 1.0 / len(census)
        else:
            odp = od(p[bits])
            prod = np.prod(odp)
            # weight of member j ~ product of od over the *other* members
            raw = prod / odp
            c[bits] = raw / raw.sum()
        cells[mask] = c
    return WeightScheme(J, cells)


def optimal_rho_wor(sample: MergedSample, f, scheme0: Optional[WeightScheme] = None,
                    layout: Optional[SourceLayout] = None) -> WeightScheme:
    """Variance-optimal overlap split for two-source WOR subsampling.

    The overlap constant is c = median(0, c_f, 1) where c_f is a ratio of
    per-source moments of f restricted to the overlap and to the part of
    source 1 outside source 2.  Moments are estimated by weighted
    Horvitz-Thompson sums under the pilot scheme (balanced by default).

    ``f`` is an array of per-unit values aligned with the sample rows
    (only rows selected by the relevant source are used).
    """
    from .hmeasure import HMeasure

    J = sample.n_sources
    if J != 2:
        raise ValueError("the without-replacement optimum is implemented for J=2 only")
    if scheme0 is None:
        lay = layout or SourceLayout(2, lambda v: np.full(v.shape[0], 3))
        scheme0 = balanced_rho(lay, masks=np.unique(sample.member_mask))

    f = np.asarray(f, dtype=float)
    if f.ndim != 1:
        raise ValueError("optimal_rho_wor expects a scalar functional (1-d values)")
    meas = HMeasure(sample, scheme0)

    in_1_only = (sample.member_mask == 0b01).astype(float)
    overlap = (sample.member_mask == 0b11).astype(float)
    y_f = f * in_1_only
    z_f = f * overlap

    nu = sample.N_source / sample.N
    odp = od(sample.p_hat)

    mom = {}
    for j in (0, 1):
        m1_y = meas.source_ht_mean(y_f, j)
        m1_z = meas.source_ht_mean(z_f, j)
        m2_z = meas.source_ht_mean(z_f ** 2, j)
        mom[j] = (m1_y, m1_z, m2_z - m1_z ** 2)

    a1 = nu[0] * odp[0]
    a2 = nu[1] * odp[1]
    num = (-a1 * mom[0][0] * mom[0][1]
           + a2 * (mom[1][0] * mom[1][1] - mom[1][2]))
    den = a1 * mom[0][2] + a2 * mom[1][2]
    if abs(den) < 1e-12:
        raise ValueError("degenerate intersection variance")
    c1 = min(max(num / den, 0.0), 1.0)

    cells = {}
    for mask in np.unique(sample.member_mask):
        mask = int(mask)
        if mask == 0:
            continue
        if mask == 0b11:
            cells[mask] = np.array([c1, 1.0 - c1])
        else:
            c = np.zeros(2)
            c[mask_bits(mask)[0]] = 1.0
            cells[mask] = c
    if 0b11 not in cells:
        cells[0b11] = np.array([c1, 1.0 - c1])
    return WeightScheme(2, cells)


def build_scheme(recipe: RhoRecipe, layout: SourceLayout,
                 sample: Optional[MergedSample] = None, f=None) -> WeightScheme:
    """Materialize a recipe into a WeightScheme."""
    masks = np.unique(sample.member_mask) if sample is not None else None
    if recipe.kind == BALANCED:
        return balanced_rho(layout, masks)
    if recipe.kind == SINGLE_FRAME:
        if sample is None:
            raise ValueError("single-frame weights need a sample")
        return single_frame_rho(layout, sample, masks)
    if recipe.kind == OPT_BERNOULLI:
        p = recipe.params.get("p")
        if p is None:
            if sample is None:
                raise ValueError("optimal Bernoulli weights need fractions or a sample")
            p = sample.p_hat
        return optimal_rho_bernoulli(p, layout, masks)
    if sample is None:
        raise ValueError("optimal WOR weights need a sample")
    pilot = recipe.params.get("pilot")
    return optimal_rho_wor(sample, f, scheme0=pilot, layout=layout)
