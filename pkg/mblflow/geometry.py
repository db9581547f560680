"""Resonant-block taxonomy and connectivity estimators.

Distances are measured in the plain site metric |x - y|. Separation distances
d_m = exp(L_{m+m0}^(1/2)) are clamped to the chain length, so on short chains
blocks merge more readily than the asymptotic construction would allow.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass

import numpy as np
import pandas as pd

from mblflow._statistics import wilson_intervals
from mblflow._validation import validate_site, validate_sites
from mblflow.entities import Block, BlockSet, FlowParams, length_scale
from mblflow.errors import BlockInvariantError

CONNECTIVITY_KINDS = ("P", "Q", "R")


def separation_distance(m: int, n: int, m0: int = 0) -> float:
    """Separation d_m = exp(sqrt(L_{m+m0})) clamped to the chain length."""
    return min(math.exp(math.sqrt(length_scale(m + m0))), float(n))


def volume_class(volume: float) -> int:
    """The m >= 1 with volume in [L_{m-1}, L_m)."""
    m = 1
    while volume >= length_scale(m):
        m += 1
    return m


def collar_width(scale: int) -> int:
    return math.ceil(length_scale(scale) - 1.0)


def outer_collar_width(scale: int) -> int:
    return math.ceil(15.0 / 14.0 * length_scale(scale - 1))


def expand(sites: Iterable[int], width: int, n: int) -> tuple[int, ...]:
    """Sites within ``width`` of ``sites``, clamped to the chain."""
    grown: set[int] = set()
    for site in sites:
        grown.update(range(max(0, site - width), min(n, site + width + 1)))
    return tuple(sorted(grown))


def set_distance(a: Iterable[int], b: Iterable[int]) -> int:
    left = np.fromiter(a, dtype=np.int64)
    right = np.fromiter(b, dtype=np.int64)
    return int(np.min(np.abs(left[:, None] - right[None, :])))


def make_block(
    sites: Iterable[int], scale: int, n: int, volume: float | None = None
) -> Block:
    """Block with its inner collar and outer collar computed at ``scale``."""
    core = tuple(sorted(set(sites)))
    collar = expand(core, collar_width(scale), n)
    outer = expand(collar, outer_collar_width(scale), n)
    return Block(
        sites=core,
        scale=scale,
        volume=float(len(core) if volume is None else volume),
        collar=collar,
        outer_collar=outer,
    )


def _runs(sites: Iterable[int]) -> list[frozenset[int]]:
    """Maximal runs of adjacent sites."""
    runs: list[list[int]] = []
    for site in sorted(set(sites)):
        if runs and site == runs[-1][-1] + 1:
            runs[-1].append(site)
        else:
            runs.append([site])
    return [frozenset(run) for run in runs]


def _diameter(sites: Iterable[int]) -> int:
    ordered = sorted(sites)
    return ordered[-1] - ordered[0]


def build_blocks_step1(
    resonant_sites: Iterable[int], n: int, *, m0: int = 0
) -> BlockSet:
    """
    Split the step-1 resonant sites into nearest-neighbour blocks B^(1).

    A block is small when its diameter is below L_1 and every other block lies
    farther than the clamped separation distance of the smaller volume class.
    All remaining blocks form the large region.
    """
    sites = validate_sites(resonant_sites, n, context="resonant site")
    components = _runs(sites)
    small: list[Block] = []
    large: set[int] = set()
    for index, component in enumerate(components):
        isolated = all(
            set_distance(component, other)
            > separation_distance(
                volume_class(min(len(component), len(other))), n, m0
            )
            for j, other in enumerate(components)
            if j != index
        )
        if _diameter(component) < length_scale(1) and isolated:
            small.append(make_block(component, 1, n))
        else:
            large.update(component)

    block_set = BlockSet(
        n=n,
        scale=1,
        small_blocks=tuple(small),
        large_region=frozenset(large),
        large_collar=frozenset(expand(large, collar_width(1), n)),
        components=tuple(components),
        resonant_sites=sites,
    )
    validate_block_set(block_set, m0=m0)
    return block_set


@dataclass(slots=True)
class _Unit:
    core: frozenset[int]
    free: frozenset[int]
    n_blocks: int
    scale: int
    touched: bool
    block: Block | None = None

    def volume(self, minimum: float) -> float:
        if not self.touched and self.block is not None:
            return self.block.volume
        return max(float(len(self.free) + self.n_blocks), minimum)

    def collar(self, n: int) -> frozenset[int]:
        if not self.touched and self.block is not None:
            return frozenset(self.block.collar)
        return frozenset(expand(self.core, collar_width(self.scale), n))


def _merge_intervals(intervals: Iterable[tuple[int, int]]) -> list[frozenset[int]]:
    merged: list[list[int]] = []
    for lo, hi in sorted(intervals):
        if merged and lo <= merged[-1][1] + 1:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return [frozenset(range(lo, hi + 1)) for lo, hi in merged]


def _conflicting_pairs(
    units: list[_Unit], n: int, m0: int, minimum: float
) -> list[tuple[int, int, int, int]]:
    pairs = []
    collars = [unit.collar(n) for unit in units]
    for i in range(len(units)):
        for j in range(i + 1, len(units)):
            distance = set_distance(units[i].core, units[j].core)
            smaller = min(units[i].volume(minimum), units[j].volume(minimum))
            too_close = distance <= separation_distance(volume_class(smaller), n, m0)
            if too_close or collars[i] & collars[j]:
                leftmost = min(min(units[i].core), min(units[j].core))
                pairs.append((distance, leftmost, i, j))
    return pairs


def update_blocks(
    prev: BlockSet,
    new_resonances: Iterable[tuple[int, int]],
    k: int,
    p: FlowParams,
) -> BlockSet:
    """
    Fold the supports of step-k resonant transitions into the block taxonomy.

    Supports that overlap or touch form new components B^(k); each absorbs the
    earlier small blocks whose collar it meets. New components, the large-region
    components and untouched earlier blocks are then merged greedily, nearest
    conflicting pair first and ties to the left, until no two units are within
    the clamped separation distance of the smaller volume class or have
    overlapping collars. Merged candidates with diameter below L_k become small
    blocks of scale k; the others form the new large region.
    """
    if k < 2:
        raise ValueError("update_blocks handles steps k >= 2")
    if prev.scale != k - 1:
        raise ValueError(
            f"previous block set has scale {prev.scale}, expected {k - 1}"
        )
    n = prev.n
    minimum = length_scale(k - 1)
    intervals = []
    for lo, hi in new_resonances:
        validate_site(lo, n, context="support start")
        validate_site(hi, n, context="support end")
        if hi < lo:
            raise ValueError("support intervals must satisfy start <= end")
        intervals.append((lo, hi))
    components = _merge_intervals(intervals)

    remaining = list(prev.small_blocks)
    units: list[_Unit] = []
    for component in components:
        absorbed = [b for b in remaining if component & set(b.collar)]
        remaining = [b for b in remaining if b not in absorbed]
        block_sites = frozenset().union(*(b.sites for b in absorbed))
        units.append(
            _Unit(
                core=component | block_sites,
                free=component - block_sites,
                n_blocks=len(absorbed),
                scale=k,
                touched=True,
            )
        )
    for block in remaining:
        units.append(
            _Unit(
                core=frozenset(block.sites),
                free=frozenset(),
                n_blocks=1,
                scale=block.scale,
                touched=False,
                block=block,
            )
        )
    for run in _runs(prev.large_collar):
        core = run & prev.large_region
        if core:
            units.append(
                _Unit(core=core, free=core, n_blocks=0, scale=k, touched=True)
            )

    while True:
        pairs = _conflicting_pairs(units, n, p.m0, minimum)
        if not pairs:
            break
        _, _, i, j = min(pairs)
        first, second = units[i], units[j]
        merged = _Unit(
            core=first.core | second.core,
            free=first.free | second.free,
            n_blocks=first.n_blocks + second.n_blocks,
            scale=k,
            touched=True,
        )
        units = [u for index, u in enumerate(units) if index not in (i, j)]
        units.append(merged)

    small: list[Block] = []
    large: set[int] = set()
    step_components: list[frozenset[int]] = []
    for unit in sorted(units, key=lambda u: min(u.core)):
        if not unit.touched and unit.block is not None:
            small.append(unit.block)
            continue
        step_components.append(unit.core)
        if _diameter(unit.core) < length_scale(k):
            small.append(make_block(unit.core, k, n, unit.volume(minimum)))
        else:
            large.update(unit.core)

    block_set = BlockSet(
        n=n,
        scale=k,
        small_blocks=tuple(small),
        large_region=frozenset(large),
        large_collar=frozenset(expand(large, collar_width(k), n)),
        components=tuple(step_components),
        resonant_sites=prev.resonant_sites.union(*components),
    )
    validate_block_set(block_set, m0=p.m0)
    return block_set


def validate_block_set(bs: BlockSet, *, m0: int = 0) -> None:
    """Assert disjointness, diameter, coverage and separation of a taxonomy."""
    blocks = bs.small_blocks
    for block in blocks:
        if block.diameter >= length_scale(block.scale):
            raise BlockInvariantError(
                f"block {block.sites} has diameter {block.diameter} >= "
                f"L_{block.scale}"
            )
        if set(block.collar) & bs.large_collar:
            raise BlockInvariantError(
                f"block {block.sites} collar overlaps the large region"
            )
    for i, first in enumerate(blocks):
        for second in blocks[i + 1 :]:
            if set(first.collar) & set(second.collar):
                raise BlockInvariantError(
                    f"blocks {first.sites} and {second.sites} overlap"
                )
            distance = set_distance(first.sites, second.sites)
            needed = separation_distance(
                volume_class(min(first.volume, second.volume)), bs.n, m0
            )
            if distance <= needed:
                raise BlockInvariantError(
                    f"blocks {first.sites} and {second.sites} are {distance} apart, "
                    f"need more than {needed:.3f}"
                )
    covered = bs.large_region.union(*(b.sites for b in blocks))
    uncovered = bs.resonant_sites - covered
    if uncovered:
        raise BlockInvariantError(
            f"resonant sites {sorted(uncovered)} are not in any block"
        )


def contracted_distance(x: int, y: int, bs: BlockSet, scale: int) -> int:
    """
    Distance from x to y where every outer-collared block of scale <= ``scale``
    counts as a single point.
    """
    validate_site(x, bs.n, context="x")
    validate_site(y, bs.n, context="y")
    hulls = sorted(
        (b.outer_collar[0], b.outer_collar[-1])
        for b in bs.small_blocks
        if b.scale <= scale
    )
    merged: list[list[int]] = []
    for lo, hi in hulls:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])

    def coordinate(site: int) -> int:
        shrink = sum(min(site, hi) - lo for lo, hi in merged if lo <= site)
        return site - shrink

    return abs(coordinate(x) - coordinate(y))


def _labels(bs: BlockSet, kind: str, k: int) -> np.ndarray:
    labels = np.full(bs.n, -1, dtype=np.int64)
    if kind == "P":
        groups: Sequence[Iterable[int]] = bs.components
    elif kind == "Q":
        groups = [b.collar for b in bs.blocks_at(k)]
    else:
        groups = [b.collar for b in bs.small_blocks if b.scale <= k]
    for label, group in enumerate(groups):
        labels[list(group)] = label
    return labels


def same_group_matrix(bs: BlockSet, kind: str, k: int) -> np.ndarray:
    """Boolean n x n matrix of the pairs sharing a block of the given kind."""
    labels = _labels(bs, kind, k)
    return (labels[:, None] == labels[None, :]) & (labels[:, None] >= 0)


@dataclass(frozen=True, slots=True, eq=False)
class ConnectivityEstimate:
    """
    Empirical connectivity function over site pairs.

    Args:
        kind (str): "P" (same resonant component B^(k)), "Q" (same collared
            small block of scale k) or "R" (same collared small block of any
            scale up to k)
        k (int): Step of the taxonomy
        hits (np.ndarray): n x n counts of realizations where the event holds
        n_realizations (int): Ensemble size
    """

    kind: str
    k: int
    hits: np.ndarray
    n_realizations: int

    @property
    def prob(self) -> np.ndarray:
        return self.hits / self.n_realizations

    @property
    def table(self) -> pd.DataFrame:
        n = self.hits.shape[0]
        x, y = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ci_lo, ci_hi = wilson_intervals(self.hits, self.n_realizations)
        return pd.DataFrame(
            {
                "kind": self.kind,
                "k": self.k,
                "x": x.ravel(),
                "y": y.ravel(),
                "prob": self.prob.ravel(),
                "ci_lo": ci_lo.ravel(),
                "ci_hi": ci_hi.ravel(),
                "n_realizations": self.n_realizations,
            }
        )

    def by_distance(self) -> pd.DataFrame:
        """Pool all pairs with the same |x - y| into one proportion."""
        n = self.hits.shape[0]
        distance = np.abs(np.arange(n)[:, None] - np.arange(n)[None, :])
        rows = []
        for r in range(n):
            mask = distance == r
            hits = int(self.hits[mask].sum())
            trials = int(mask.sum()) * self.n_realizations
            lo, hi = wilson_intervals(np.array([hits]), trials)
            rows.append(
                {
                    "distance": r,
                    "prob": hits / trials,
                    "ci_lo": float(lo[0]),
                    "ci_hi": float(hi[0]),
                    "n_pairs": int(mask.sum()),
                }
            )
        return pd.DataFrame(rows)


def estimate_connectivity(
    block_sets: Sequence[BlockSet],
    kind: str,
    k: int,
    *,
    min_realizations: int = 100,
) -> ConnectivityEstimate:
    """Count, per site pair, the realizations in which both sites share a block."""
    if kind not in CONNECTIVITY_KINDS:
        raise ValueError("kind must be one of: " + ", ".join(CONNECTIVITY_KINDS))
    if k < 1:
        raise ValueError("k must be at least 1")
    if len(block_sets) < max(min_realizations, 1):
        raise ValueError(
            f"connectivity estimates need at least {max(min_realizations, 1)} "
            f"realizations, got {len(block_sets)}"
        )
    n = block_sets[0].n
    hits = np.zeros((n, n), dtype=np.int64)
    for bs in block_sets:
        if bs.n != n:
            raise ValueError("all block sets must describe chains of equal length")
        if bs.scale != k:
            raise ValueError(f"block set has scale {bs.scale}, expected {k}")
        hits += same_group_matrix(bs, kind, k)
    return ConnectivityEstimate(
        kind=kind, k=k, hits=hits, n_realizations=len(block_sets)
    )


def step1_bound(eps: float, distance: int, rho0: float = 0.5) -> float:
    """Bound (4 rho0 eps)^(|x-y|+1) on two sites sharing a step-1 block."""
    return (4.0 * rho0 * eps) ** (distance + 1)


def resonant_site_frequency(
    site_sets: Iterable[Iterable[int]], n: int
) -> tuple[float, float, float, int]:
    """Pooled fraction of resonant sites with its Wilson interval."""
    hits = 0
    samples = 0
    for sites in site_sets:
        hits += len(validate_sites(sites, n))
        samples += n
    if samples == 0:
        raise ValueError("site_sets must not be empty")
    lo, hi = wilson_intervals(np.array([hits]), samples)
    return (hits / samples, float(lo[0]), float(hi[0]), samples)
