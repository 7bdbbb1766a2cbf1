"""Joint training of the patching policy and the forecasting backbone.

Each step is pure on-policy group-relative policy gradient: for every window
in the mini-batch, sample a fresh group of G boundary sets from the current
policy, run the environment (minimum-compression enforcement plus one
backbone forward per sample) to obtain terminal rewards, normalize rewards
within the group, and take exactly one gradient step on each model. No
importance ratios, no clipping, no reference policy, no rollout reuse.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import BackboneConfig, Forecaster, ForecastWindow, partitions_for
from .boundaries import (
    BoundaryVector,
    CompressionConfig,
    PatchPartition,
    boundaries_to_partition,
    compression_rate,
    enforce_min_compression,
    partition_to_boundaries,
)
from .policy import PatchPolicy, PolicyOutput, policy_entropy, sample_group

__all__ = [
    "TrainConfig",
    "RolloutGroup",
    "NonFiniteLossError",
    "FrozenPolicyError",
    "group_advantages",
    "grpg_surrogate",
    "GrpgTrainer",
    "train_backbone_with_patcher",
    "write_metrics_csv",
    "METRIC_FIELDS",
]

METRIC_FIELDS = (
    "step",
    "policy_loss",
    "backbone_loss",
    "mean_reward",
    "realized_compression",
    "entropy",
)


class NonFiniteLossError(RuntimeError):
    """A window produced a non-finite loss; the step is aborted unapplied."""


class FrozenPolicyError(RuntimeError):
    """Raised when a gradient update is requested for a frozen policy."""


@dataclass(frozen=True)
class TrainConfig:
    group_size: int = 8
    advantage_mode: str = "standardize"
    advantage_eps: float = 1e-8
    lr_policy: float = 1e-3
    lr_backbone: float = 1e-4
    entropy_coeff: float = 0.0
    min_rate: float = 8.0
    weight_decay: float = 0.0
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.advantage_mode not in ("standardize", "center"):
            raise ValueError(f"unknown advantage_mode {self.advantage_mode!r}")
        if not self.advantage_eps > 0:
            raise ValueError("advantage_eps must be > 0")
        if not (self.lr_policy > 0 and self.lr_backbone > 0):
            raise ValueError("learning rates must be > 0")
        if self.entropy_coeff < 0:
            raise ValueError("entropy_coeff must be >= 0")
        if not self.min_rate > 1:
            raise ValueError("min_rate must be > 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class RolloutGroup:
    """G sampled boundary sets for one window, with group statistics."""

    boundaries: list[BoundaryVector]
    log_probs: list[torch.Tensor]
    rewards: np.ndarray
    mean_reward: float
    std_reward: float
    advantages: np.ndarray


def group_advantages(
    rewards, mode: str = "standardize", eps: float = 1e-8
) -> np.ndarray:
    """Group-relative advantages from the terminal rewards of one group.

    ``standardize`` divides the centered rewards by the population standard
    deviation plus ``eps``; ``center`` only subtracts the group mean (useful
    when the absolute spread of rewards should retain its weight).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError("group statistics need at least 2 rewards")
    centered = rewards - rewards.mean()
    if mode == "center":
        return centered
    if mode == "standardize":
        return centered / (rewards.std() + eps)
    raise ValueError(f"unknown advantage mode {mode!r}")


def grpg_surrogate(log_probs, advantages) -> torch.Tensor:
    """Scalar whose gradient descends the negated group policy gradient.

    ``-(1/G) * sum_i log_prob_i * A_i`` with the advantages held constant;
    minimizing it ascends the group-relative objective.
    """
    if isinstance(log_probs, (list, tuple)):
        log_probs = torch.stack(list(log_probs))
    advantages = torch.as_tensor(
        np.asarray(advantages, dtype=np.float64), dtype=log_probs.dtype
    )
    if log_probs.shape != advantages.shape:
        raise ValueError("log_probs/advantages length mismatch")
    return -(log_probs * advantages).mean()


class GrpgTrainer:
    """Owns the two models, their optimizers, and the sampling RNG."""

    def __init__(
        self,
        policy: PatchPolicy,
        backbone: Forecaster,
        cfg: TrainConfig,
        compression: CompressionConfig | None = None,
        train_policy: bool | None = None,
    ):
        if policy.cfg.context_limit < backbone.cfg.lookback:
            raise ValueError("policy context_limit smaller than backbone lookback")
        if policy.cfg.num_levels < backbone.cfg.num_levels:
            raise ValueError("policy has fewer hierarchy levels than the backbone")
        if train_policy is None:
            train_policy = not policy.frozen
        if train_policy and policy.frozen:
            raise FrozenPolicyError("cannot request updates for a frozen policy")
        self.policy = policy
        self.backbone = backbone
        self.cfg = cfg
        self.train_policy = train_policy
        self.compression = compression or CompressionConfig(min_rate=cfg.min_rate)
        self.policy_opt = (
            torch.optim.AdamW(
                policy.parameters(), lr=cfg.lr_policy, weight_decay=cfg.weight_decay
            )
            if train_policy
            else None
        )
        self.backbone_opt = torch.optim.AdamW(
            backbone.parameters(), lr=cfg.lr_backbone, weight_decay=cfg.weight_decay
        )
        self.sample_rng = torch.Generator()
        self.sample_rng.manual_seed(cfg.seed)
        self.global_step = 0
        self.epoch = 0
        self.history: list[dict] = []

    # --- one optimization step -----------------------------------------

    def rollout(self, windows: Sequence[ForecastWindow]):
        """Sample fresh on-policy rollout groups for a batch of windows."""
        policy_in = np.stack(
            [(w.input - w.norm_mean) / w.norm_std for w in windows]
        )
        logits = self.policy.forward_batch(
            torch.as_tensor(policy_in, dtype=self.policy.dtype)
        )
        groups = []
        for i in range(len(windows)):
            out = PolicyOutput(
                logits=logits[i], num_levels=self.policy.cfg.num_levels
            )
            pairs = sample_group(out, self.cfg.group_size, self.sample_rng)
            groups.append((out, pairs))
        return groups, self.policy.update_count

    def train_step(self, windows: Sequence[ForecastWindow]) -> dict:
        """Sample G boundary sets per window, update both models once."""
        cfg = self.cfg
        G = cfg.group_size
        bsz = len(windows)
        groups, rollout_version = self.rollout(windows)

        all_parts: list[tuple[PatchPartition, ...]] = []
        pre_rates = []
        post_rates = []
        for _, pairs in groups:
            for bv, _ in pairs:
                pre_rates.append(
                    compression_rate(boundaries_to_partition(bv, 1))
                )
                enforced = enforce_min_compression(bv, self.compression)
                parts = partitions_for(enforced, self.backbone.cfg.num_levels)
                post_rates.append(compression_rate(parts[0]))
                all_parts.append(parts)

        inputs = torch.as_tensor(
            np.stack([w.input for w in windows]), dtype=self.backbone.dtype
        ).repeat_interleave(G, dim=0)
        targets = torch.as_tensor(
            np.stack([w.target for w in windows]), dtype=self.backbone.dtype
        ).repeat_interleave(G, dim=0)
        stats = (
            torch.tensor([w.norm_mean for w in windows]).repeat_interleave(G),
            torch.tensor([w.norm_std for w in windows]).repeat_interleave(G),
        )
        preds = self.backbone.forward_batch(inputs, all_parts, stats)
        loss_vec = ((preds - targets) ** 2).mean(dim=1)
        if not torch.isfinite(loss_vec).all():
            bad = torch.nonzero(~torch.isfinite(loss_vec)).flatten().tolist()
            raise NonFiniteLossError(
                f"non-finite loss at step {self.global_step}, "
                f"rollout indices {bad}; step aborted before any update"
            )

        rewards = (-loss_vec.detach()).to(torch.float64).numpy().reshape(bsz, G)
        advantages = np.stack(
            [
                group_advantages(r, cfg.advantage_mode, cfg.advantage_eps)
                for r in rewards
            ]
        )
        surrogates = torch.stack(
            [
                grpg_surrogate([lp for _, lp in pairs], advantages[i])
                for i, (_, pairs) in enumerate(groups)
            ]
        )
        policy_loss = surrogates.mean()
        backbone_loss = loss_vec.mean()
        entropy = torch.stack(
            [policy_entropy(out) for out, _ in groups]
        ).mean()

        # On-policy purity: rollouts must come from the parameters we update.
        if rollout_version != self.policy.update_count:
            raise RuntimeError("stale rollouts: policy changed since sampling")

        total = backbone_loss
        if self.train_policy:
            total = total + policy_loss
            if cfg.entropy_coeff > 0:
                total = total - cfg.entropy_coeff * entropy
        self.backbone_opt.zero_grad(set_to_none=True)
        if self.policy_opt is not None:
            self.policy_opt.zero_grad(set_to_none=True)
        total.backward()
        self.backbone_opt.step()
        if self.policy_opt is not None:
            self.policy_opt.step()
            self.policy.update_count += 1

        self.global_step += 1
        metrics = {
            "step": self.global_step,
            "policy_loss": float(policy_loss.detach()),
            "backbone_loss": float(backbone_loss.detach()),
            "mean_reward": float(rewards.mean()),
            "realized_compression": float(np.mean(post_rates)),
            "entropy": float(entropy.detach()),
            "pre_enforcement_compression": float(np.mean(pre_rates)),
        }
        self.history.append(metrics)
        return metrics

    # --- epoch loop ------------------------------------------------------

    def train(
        self,
        windows: Sequence[ForecastWindow],
        out_dir: str | Path | None = None,
    ) -> list[dict]:
        """Epoch loop over shuffled windows with per-epoch checkpoints."""
        if len(windows) == 0:
            raise ValueError("dataset is empty")
        out_path = Path(out_dir) if out_dir is not None else None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
        n = len(windows)
        for epoch in range(self.epoch, self.cfg.epochs):
            order = np.random.default_rng([self.cfg.seed, epoch]).permutation(n)
            for start in range(0, n, self.cfg.batch_size):
                batch = [windows[i] for i in order[start : start + self.cfg.batch_size]]
                self.train_step(batch)
            self.epoch = epoch + 1
            if out_path is not None:
                from .persistence import save_checkpoint

                save_checkpoint(out_path / "checkpoint.rpf1", self)
                write_metrics_csv(self.history, out_path / "metrics.csv")
        return self.history


def train_backbone_with_patcher(
    backbone: Forecaster,
    windows: Sequence[ForecastWindow],
    patcher: Callable[[np.ndarray], BoundaryVector | PatchPartition],
    cfg: TrainConfig,
    compression: CompressionConfig | None = None,
) -> list[dict]:
    """Supervised backbone training against a fixed (or frozen) patcher.

    Used for the static/random/variance baselines and for zero-shot reuse of
    an exported patcher: only the backbone receives gradient updates, and the
    patcher is queried once per window per epoch.
    """
    if len(windows) == 0:
        raise ValueError("dataset is empty")
    compression = compression or CompressionConfig(min_rate=cfg.min_rate)
    opt = torch.optim.AdamW(
        backbone.parameters(), lr=cfg.lr_backbone, weight_decay=cfg.weight_decay
    )
    history = []
    step = 0
    n = len(windows)
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [windows[i] for i in order[start : start + cfg.batch_size]]
            parts = []
            rates = []
            for w in batch:
                proposal = patcher(w.input)
                if isinstance(proposal, PatchPartition):
                    proposal = partition_to_boundaries(proposal)
                enforced = enforce_min_compression(proposal, compression)
                p = partitions_for(enforced, backbone.cfg.num_levels)
                rates.append(compression_rate(p[0]))
                parts.append(p)
            inputs = torch.as_tensor(
                np.stack([w.input for w in batch]), dtype=backbone.dtype
            )
            targets = torch.as_tensor(
                np.stack([w.target for w in batch]), dtype=backbone.dtype
            )
            stats = (
                torch.tensor([w.norm_mean for w in batch]),
                torch.tensor([w.norm_std for w in batch]),
            )
            preds = backbone.forward_batch(inputs, parts, stats)
            loss = ((preds - targets) ** 2).mean()
            if not torch.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            step += 1
            history.append(
                {
                    "step": step,
                    "policy_loss": 0.0,
                    "backbone_loss": float(loss.detach()),
                    "mean_reward": -float(loss.detach()),
                    "realized_compression": float(np.mean(rates)),
                    "entropy": 0.0,
                }
            )
    return history


def write_metrics_csv(history: Sequence[dict], path: str | Path) -> None:
    """Emit the metric history with the canonical column set."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in history:
            writer.writerow([row[k] for k in METRIC_FIELDS])
