"""Two-stage sampling: i.i.d. population generation, membership assignment,
and per-source subsampling (without replacement, Bernoulli, or stratified).

Selections in distinct sources are always drawn independently.  All draws are
deterministic given the master seed; every (replicate, stage) pair gets its
own RNG substream so replicate-level parallelism cannot reorder results.
"""
from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import MergedSample, SourceLayout

WOR = "WOR"
BERNOULLI = "BERNOULLI"
STRATIFIED_WOR = "STRATIFIED_WOR"

ENUMERATION_BUDGET = 10 ** 6


def substream(master_seed, *keys):
    """A Generator seeded from (master seed, integer keys) splitmix-style."""
    return np.random.default_rng(
        np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in keys))
    )


@dataclass(frozen=True)
class DesignSpec:
    """Second-stage subsampling design.

    ``fractions`` holds one sampling fraction per source; for stratified
    designs each entry is instead a sequence of per-stratum fractions.
    Subsample sizes use banker's rounding of fraction * N, clamped to
    [1, N] for nonempty (strata of) sources.
    """

    mode: str
    fractions: Sequence
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (WOR, BERNOULLI, STRATIFIED_WOR):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        for f in self.fractions:
            for p in np.atleast_1d(np.asarray(f, dtype=float)):
                if not 0.0 < p <= 1.0:
                    raise ValueError(f"sampling fraction {p} outside (0, 1]")

    def fraction(self, j, k=0):
        f = self.fractions[j]
        arr = np.atleast_1d(np.asarray(f, dtype=float))
        return float(arr[k] if arr.size > 1 else arr[0])


def subsample_size(p, N):
    """round-half-to-even(p * N), clamped to [1, N]; 0 when N == 0."""
    if N == 0:
        return 0
    n = int(round(p * N))
    return min(max(n, 1), N)


def draw_population(generator, N, layout: SourceLayout, seed):
    """Draw N i.i.d. units, assign memberships, return an unselected sample.

    ``generator`` is a callable (rng, N) -> (x, v) producing the analysis and
    auxiliary arrays.  Membership masks come from the layout rule; selection
    flags are left at zero.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = substream(seed, 0)
    x, v = generator(rng, N)
    masks = layout.member_masks(v)
    stratum = None
    if layout.strata is not None:
        stratum = np.zeros((N, layout.n_sources), dtype=np.int64)
        for j in range(layout.n_sources):
            stratum[:, j] = layout.stratum_labels(v, j)
    return MergedSample(x, v, masks, np.zeros(N, dtype=np.int64),
                        stratum=stratum, n_sources=layout.n_sources)


def _wor_pick(rng, idx, n):
    """n distinct entries of idx, uniform over subsets (partial Fisher-Yates)."""
    if n == 0:
        return idx[:0]
    return rng.permutation(idx)[:n]


def draw_selections(sample: MergedSample, design: DesignSpec, seed=None):
    """Fill in per-source selections according to the design.

    Returns a new MergedSample; the input (which must have no selections)
    is not modified.  Deterministic given (sample, design, seed).
    """
    if np.any(sample.selected != 0):
        raise ValueError("sample already has selections")
    seed = design.seed if seed is None else seed
    J = sample.n_sources
    selected = np.zeros(sample.n_units, dtype=np.int64)
    stratum = sample.stratum

    for j in range(J):
        rng = substream(seed, 1, j)
        members = np.nonzero(sample.member_bits[:, j])[0]
        if members.size == 0:
            if design.fraction(j) > 0:
                warnings.warn(f"source {j} is empty; no units selected")
            continue
        if design.mode == BERNOULLI:
            p = design.fraction(j)
            hit = members[rng.random(members.size) < p]
        elif design.mode == WOR:
            p = design.fraction(j)
            n = subsample_size(p, members.size)
            hit = _wor_pick(rng, members, n)
        else:  # STRATIFIED_WOR
            if stratum is None:
                raise ValueError("stratified design requires stratum labels")
            hit_parts = []
            labels = stratum[members, j]
            for k in np.unique(labels):
                in_k = members[labels == k]
                n_k = subsample_size(design.fraction(j, int(k)), in_k.size)
                hit_parts.append(_wor_pick(rng, in_k, n_k))
            hit = np.concatenate(hit_parts) if hit_parts else members[:0]
        selected[hit] |= 1 << j
    return sample.with_selected(selected)


def enumeration_count(sample: MergedSample, design: DesignSpec):
    total = 1
    for j in range(sample.n_sources):
        Nj = int(sample.N_source[j])
        if Nj == 0:
            continue
        nj = subsample_size(design.fraction(j), Nj)
        total *= math.comb(Nj, nj)
    return total


def enumerate_selections(sample: MergedSample, design: DesignSpec):
    """Iterate over every equally likely joint WOR selection pattern.

    Yields MergedSample copies, one per pattern; the number of patterns is
    the product over sources of C(N_j, n_j).  Refuses designs beyond the
    10^6-pattern budget.
    """
    if design.mode != WOR:
        raise ValueError("enumeration is defined for the WOR mode only")
    total = enumeration_count(sample, design)
    if total > ENUMERATION_BUDGET:
        raise ValueError(
            f"enumeration budget exceeded: {total} patterns > {ENUMERATION_BUDGET}"
        )
    J = sample.n_sources
    per_source = []
    for j in range(J):
        members = np.nonzero(sample.member_bits[:, j])[0]
        if members.size == 0:
            per_source.append([members[:0]])
            continue
        nj = subsample_size(design.fraction(j), members.size)
        per_source.append([np.asarray(c, dtype=np.int64)
                           for c in itertools.combinations(members, nj)])
    for combo in itertools.product(*per_source):
        selected = np.zeros(sample.n_units, dtype=np.int64)
        for j, hit in enumerate(combo):
            selected[hit] |= 1 << j
        yield sample.with_selected(selected)
