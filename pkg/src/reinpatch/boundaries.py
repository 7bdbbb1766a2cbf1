"""Boundary/partition algebra for learned sequence patching.

A patching decision for a window of ``seq_len`` points is a per-step integer
``levels[t] in {0..L}``: level ``l >= 1`` means step ``t`` closes a patch at
the first ``l`` hierarchy levels (a right-side boundary). Position ``-1`` is
an implicit boundary at every level, so the first patch always starts at
index 0. Trailing steps after the last explicit boundary always form a final
patch ("implicit closure"), so a partition is well defined for every vector.

All functions here are pure and operate on immutable inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BoundaryVector",
    "PatchPartition",
    "CompressionConfig",
    "boundaries_to_partition",
    "partition_to_boundaries",
    "compression_rate",
    "enforce_min_compression",
    "level_boundaries",
]


@dataclass(frozen=True)
class BoundaryVector:
    """Per-step hierarchical boundary decisions.

    ``levels[t]`` is the number of hierarchy levels for which step ``t`` is a
    right-side patch boundary; 0 means no boundary at any level.
    """

    levels: np.ndarray
    num_levels: int = 1

    def __post_init__(self) -> None:
        arr = np.asarray(self.levels, dtype=np.int64)
        object.__setattr__(self, "levels", arr)
        if arr.ndim != 1 or arr.size < 1:
            raise ValueError("levels must be a non-empty 1-d array")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if arr.min() < 0 or arr.max() > self.num_levels:
            raise ValueError(
                f"boundary decisions must lie in [0, {self.num_levels}]"
            )

    @property
    def seq_len(self) -> int:
        return int(self.levels.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BoundaryVector):
            return NotImplemented
        return self.num_levels == other.num_levels and np.array_equal(
            self.levels, other.levels
        )


@dataclass(frozen=True)
class PatchPartition:
    """Ordered contiguous spans exactly covering ``[0, seq_len - 1]``.

    Spans are inclusive ``(start, end)`` index pairs.
    """

    spans: tuple[tuple[int, int], ...]
    seq_len: int

    def __post_init__(self) -> None:
        spans = tuple((int(s), int(e)) for s, e in self.spans)
        object.__setattr__(self, "spans", spans)
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if not spans:
            raise ValueError("partition must contain at least one span")
        if spans[0][0] != 0 or spans[-1][1] != self.seq_len - 1:
            raise ValueError("spans must cover [0, seq_len - 1]")
        prev_end = -1
        for start, end in spans:
            if start != prev_end + 1:
                raise ValueError("spans must be contiguous and sorted")
            if end < start:
                raise ValueError("span end must not precede its start")
            prev_end = end

    @property
    def num_patches(self) -> int:
        return len(self.spans)

    def patch_of(self) -> np.ndarray:
        """Index of the patch containing each step, shape ``[seq_len]``."""
        out = np.empty(self.seq_len, dtype=np.int64)
        for i, (start, end) in enumerate(self.spans):
            out[start : end + 1] = i
        return out


@dataclass(frozen=True)
class CompressionConfig:
    """Compression-rate requirements for the patching environment.

    ``min_rate`` is the hard minimum enforced inside the environment;
    ``target_rate`` is an optional inference-time budget. ``level_rates``
    gives per-level minimum rates for hierarchical patching (index 0 is the
    finest level); rates must be non-decreasing with level. When omitted,
    every level uses ``min_rate``.
    """

    min_rate: float = 8.0
    target_rate: float | None = None
    level_rates: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.min_rate > 1.0:
            raise ValueError("min_rate must be > 1")
        if self.target_rate is not None and not self.target_rate > 1.0:
            raise ValueError("target_rate must be > 1")
        if self.level_rates is not None:
            rates = tuple(float(r) for r in self.level_rates)
            object.__setattr__(self, "level_rates", rates)
            if any(not r > 1.0 for r in rates):
                raise ValueError("per-level rates must be > 1")
            if any(b < a for a, b in zip(rates, rates[1:])):
                raise ValueError("per-level rates must be non-decreasing")

    def rate_for_level(self, level: int) -> float:
        if self.level_rates is not None and level <= len(self.level_rates):
            return self.level_rates[level - 1]
        return self.min_rate


def boundaries_to_partition(b: BoundaryVector, level: int = 1) -> PatchPartition:
    """Partition induced by the boundaries at one hierarchy level.

    A span ends at index ``t`` iff ``b.levels[t] >= level``. If the final
    step's decision is below the queried level the trailing steps still form
    a final patch, so the result always covers the window.
    """
    if not 1 <= level <= b.num_levels:
        raise ValueError(f"level must be in [1, {b.num_levels}], got {level}")
    ends = np.flatnonzero(b.levels >= level).tolist()
    if not ends or ends[-1] != b.seq_len - 1:
        ends.append(b.seq_len - 1)
    spans = []
    start = 0
    for end in ends:
        spans.append((start, int(end)))
        start = int(end) + 1
    return PatchPartition(spans=tuple(spans), seq_len=b.seq_len)


def partition_to_boundaries(p: PatchPartition) -> BoundaryVector:
    """Single-level boundary vector with a 1 at every span end."""
    levels = np.zeros(p.seq_len, dtype=np.int64)
    for _, end in p.spans:
        levels[end] = 1
    return BoundaryVector(levels=levels, num_levels=1)


def compression_rate(p: PatchPartition) -> float:
    """Input points per patch: ``seq_len / num_patches``.

    Rate 1.0 corresponds exactly to no compression (singleton patches).
    """
    return p.seq_len / p.num_patches


def _num_patches_at_level(levels: np.ndarray, level: int) -> int:
    # A boundary on the final step does not add a patch (implicit closure).
    return int(np.count_nonzero(levels[:-1] >= level)) + 1


def enforce_min_compression(
    b: BoundaryVector, cfg: CompressionConfig
) -> BoundaryVector:
    """Merge surplus patches from the right until every level meets its rate.

    Per level, from coarsest to finest: with ``k_max = max(1,
    floor(seq_len / rate))``, the first ``k_max - 1`` boundary positions are
    kept and every later one is demoted to the next finer level, with the
    final patch closing at ``seq_len - 1``. Demotion (rather than deletion)
    preserves the level-subset property. Idempotent; never increases the
    patch count at any level.
    """
    levels = b.levels.copy()
    seq_len = b.seq_len
    changed = False
    for level in range(b.num_levels, 0, -1):
        rate = cfg.rate_for_level(level)
        k_max = max(1, math.floor(seq_len / rate))
        if _num_patches_at_level(levels, level) <= k_max:
            continue
        interior = np.flatnonzero(levels[:-1] >= level)
        surplus = interior[k_max - 1 :]
        levels[surplus] = level - 1
        levels[-1] = max(levels[-1], level)
        changed = True
    if not changed:
        return b
    return BoundaryVector(levels=levels, num_levels=b.num_levels)


def level_boundaries(b: BoundaryVector, l: int) -> np.ndarray:
    """Binary indicator of boundaries active at hierarchy level ``l``.

    ``out[t] = 1`` iff ``b.levels[t] >= l``; coarser-level boundary sets are
    always subsets of finer ones.
    """
    if not 1 <= l <= b.num_levels:
        raise ValueError(f"l must be in [1, {b.num_levels}], got {l}")
    return (b.levels >= l).astype(np.int64)
