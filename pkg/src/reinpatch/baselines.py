"""Reference patchers that share the forecasting backbone.

These provide the comparison points for the learned policy: fixed-size
patching, uniformly random cuts under the same budget, and a local-variance
heuristic in the spirit of signal-statistics-driven compression.
"""

from __future__ import annotations

import math

import numpy as np

from .boundaries import BoundaryVector, PatchPartition, partition_to_boundaries

__all__ = [
    "static_partition",
    "random_partition",
    "variance_partition",
    "rolling_std",
    "StaticPatcher",
    "RandomPatcher",
    "VariancePatcher",
]


def static_partition(seq_len: int, patch_size: int) -> PatchPartition:
    """Fixed-size patches; the final patch absorbs any remainder."""
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    spans = []
    for start in range(0, seq_len, patch_size):
        spans.append((start, min(start + patch_size - 1, seq_len - 1)))
    return PatchPartition(spans=tuple(spans), seq_len=seq_len)


def random_partition(
    seq_len: int, target_rate: float, rng: np.random.Generator
) -> PatchPartition:
    """Exactly ``max(1, floor(seq_len / target_rate))`` spans with the cut
    positions drawn as a uniform subset of the interior positions."""
    k = max(1, math.floor(seq_len / target_rate))
    k = min(k, seq_len)
    cuts = np.sort(rng.choice(seq_len - 1, size=k - 1, replace=False)) if k > 1 else []
    spans = []
    start = 0
    for cut in cuts:
        spans.append((start, int(cut)))
        start = int(cut) + 1
    spans.append((start, seq_len - 1))
    return PatchPartition(spans=tuple(spans), seq_len=seq_len)


def rolling_std(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing-window standard deviation with edge truncation."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    for t in range(x.size):
        out[t] = x[max(0, t - window + 1) : t + 1].std()
    return out


def variance_partition(
    x: np.ndarray, target_rate: float, window: int = 8
) -> PatchPartition:
    """Boundaries at the top-k rolling-standard-deviation positions.

    Exactly ``k = max(1, floor(seq_len / target_rate))`` spans: the largest
    selected index is replaced by the window end so the budget holds exactly.
    """
    from .adaptation import topk_boundaries

    if window < 2:
        raise ValueError("window must be >= 2")
    x = np.asarray(x, dtype=np.float64)
    scores = rolling_std(x, window)
    markers = topk_boundaries(scores, target_rate)
    ends = np.flatnonzero(markers)
    ends[-1] = x.size - 1
    spans = []
    start = 0
    for end in ends:
        spans.append((start, int(end)))
        start = int(end) + 1
    return PatchPartition(spans=tuple(spans), seq_len=x.size)


class StaticPatcher:
    def __init__(self, patch_size: int):
        self.patch_size = patch_size

    def __call__(self, window_input: np.ndarray) -> BoundaryVector:
        return partition_to_boundaries(
            static_partition(len(window_input), self.patch_size)
        )


class RandomPatcher:
    def __init__(self, target_rate: float, rng: np.random.Generator):
        self.target_rate = target_rate
        self.rng = rng

    def __call__(self, window_input: np.ndarray) -> BoundaryVector:
        return partition_to_boundaries(
            random_partition(len(window_input), self.target_rate, self.rng)
        )


class VariancePatcher:
    def __init__(self, target_rate: float, window: int = 8):
        self.target_rate = target_rate
        self.window = window

    def __call__(self, window_input: np.ndarray) -> BoundaryVector:
        return partition_to_boundaries(
            variance_partition(window_input, self.target_rate, self.window)
        )
