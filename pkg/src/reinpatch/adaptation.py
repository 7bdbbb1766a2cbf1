"""Inference-time adaptation of a trained patcher to a compression budget.

Contextual tasks see the whole window, so a target compression rate ``r_c``
maps directly to a boundary count ``k = max(1, floor(T / r_c))`` and the
top-k boundary logits win. Without a target rate, the expected boundary
count under the policy (a sum of per-step sigmoids) is used instead.

Causal tasks are an online thresholding problem: a boundary is placed when
the current logit exceeds the ``(1 - 1/r_c)``-quantile of recently seen
logits. The realized rate only tracks the budget approximately, and known
pathologies (e.g. monotonically increasing logits placing boundaries
everywhere) are inherited by design.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.special import expit
from scipy.stats import norm

from .boundaries import BoundaryVector, CompressionConfig, enforce_min_compression
from .policy import PatchPolicy, boundary_logit

__all__ = [
    "topk_boundaries",
    "expected_k",
    "auto_boundaries",
    "StreamState",
    "stream_decide",
    "PolicyPatcher",
]


def topk_boundaries(logits: np.ndarray, target_rate: float) -> np.ndarray:
    """Binary boundary markers at the ``k`` largest logits.

    ``k = max(1, floor(T / target_rate))``; ties are broken toward the
    smaller index so the result is deterministic.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if not target_rate > 1:
        raise ValueError("target_rate must be > 1")
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    k = max(1, math.floor(logits.size / target_rate))
    order = np.argsort(-logits, kind="stable")
    out = np.zeros(logits.size, dtype=np.int64)
    out[order[:k]] = 1
    return out


def expected_k(logits: np.ndarray) -> float:
    """Expected number of boundaries: the sum of per-step sigmoid(logit)."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("logits must be finite")
    return float(expit(logits).sum())


def auto_boundaries(logits: np.ndarray) -> np.ndarray:
    """Top-k boundaries with ``k = max(1, floor(expected_k(logits)))``."""
    logits = np.asarray(logits, dtype=np.float64)
    k = max(1, math.floor(expected_k(logits)))
    order = np.argsort(-logits, kind="stable")
    out = np.zeros(logits.size, dtype=np.int64)
    out[order[:k]] = 1
    return out


@dataclass
class StreamState:
    """Online thresholding state for causal boundary placement.

    One owner per stream; ``stream_decide`` mutates the state in place and
    returns it. ``mode="window"`` thresholds on the empirical quantile of
    the last ``window_size`` logits; ``mode="ema"`` on a Gaussian quantile
    of exponentially weighted mean/variance estimates.
    """

    target_rate: float
    window_size: int = 64
    mode: str = "window"
    ema_alpha: float = 0.05
    steps_seen: int = 0
    ema_mean: float = 0.0
    ema_var: float = 0.0
    window: deque = field(default_factory=deque)

    def __post_init__(self) -> None:
        if not self.target_rate > 1:
            raise ValueError("target_rate must be > 1")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if self.mode not in ("window", "ema"):
            raise ValueError(f"unknown stream mode {self.mode!r}")
        self.window = deque(self.window, maxlen=self.window_size)

    @property
    def quantile_level(self) -> float:
        return 1.0 - 1.0 / self.target_rate


def stream_decide(state: StreamState, logit: float) -> tuple[int, StreamState]:
    """One causal boundary decision; the current logit is excluded from its
    own threshold.

    During warmup (fewer than ``window_size`` logits observed) a boundary is
    emitted every ``round(target_rate)`` steps to approximate the budget.
    """
    if not math.isfinite(logit):
        raise ValueError("logit must be finite")
    if state.steps_seen < state.window_size:
        period = max(1, round(state.target_rate))
        decision = int((state.steps_seen + 1) % period == 0)
    elif state.mode == "window":
        threshold = float(
            np.quantile(np.fromiter(state.window, dtype=np.float64),
                        state.quantile_level)
        )
        decision = int(logit > threshold)
    else:
        z = norm.ppf(state.quantile_level)
        threshold = state.ema_mean + z * math.sqrt(max(state.ema_var, 0.0))
        decision = int(logit > threshold)

    state.window.append(logit)
    if state.steps_seen == 0:
        state.ema_mean = logit
        state.ema_var = 0.0
    else:
        alpha = state.ema_alpha
        delta = logit - state.ema_mean
        state.ema_mean += alpha * delta
        state.ema_var = (1 - alpha) * (state.ema_var + alpha * delta * delta)
    state.steps_seen += 1
    return decision, state


class PolicyPatcher:
    """Window-level boundary proposals from a (possibly frozen) policy.

    Rules: ``argmax`` takes the per-step modal decision and applies minimum
    compression enforcement; ``topk``/``auto`` select boundary positions from
    level-1 log-odds under a compression budget; ``sample`` draws one
    stochastic proposal (requires ``rng``).
    """

    def __init__(
        self,
        policy: PatchPolicy,
        rule: str = "argmax",
        target_rate: float | None = None,
        compression: CompressionConfig | None = None,
        rng: torch.Generator | None = None,
    ):
        if rule not in ("argmax", "topk", "auto", "sample"):
            raise ValueError(f"unknown patcher rule {rule!r}")
        if rule == "topk" and target_rate is None:
            raise ValueError("topk rule requires a target_rate")
        if rule == "sample" and rng is None:
            raise ValueError("sample rule requires an rng")
        self.policy = policy
        self.rule = rule
        self.target_rate = target_rate
        self.compression = compression
        self.rng = rng

    def __call__(self, window_input: np.ndarray) -> BoundaryVector:
        x = np.asarray(window_input, dtype=np.float64)
        std = max(float(x.std()), 1e-5)
        with torch.no_grad():
            out = self.policy((x - x.mean()) / std)
        if self.rule in ("topk", "auto"):
            logits = boundary_logit(out, 1)
            if self.rule == "topk":
                markers = topk_boundaries(logits, self.target_rate)
            else:
                markers = auto_boundaries(logits)
            return BoundaryVector(levels=markers, num_levels=1)
        if self.rule == "sample":
            probs = torch.softmax(out.logits, dim=-1)
            draw = torch.multinomial(probs, 1, generator=self.rng)[:, 0]
            levels = draw.numpy().astype(np.int64)
        else:
            levels = out.logits.argmax(dim=-1).numpy().astype(np.int64)
        b = BoundaryVector(levels=levels, num_levels=out.num_levels)
        if self.compression is not None:
            b = enforce_min_compression(b, self.compression)
        return b
