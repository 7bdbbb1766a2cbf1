"""Patch-based forecasting backbone: the environment for the patching policy.

Pipeline per window: per-step affine embedding, partition-driven
downsampling to patch embeddings, a latent transformer over patches,
upsampling back to full resolution with a residual connection, then a
flatten + linear head predicting the whole horizon at once. Minimum
compression is enforced on the boundaries before they reach the network, so
the policy has to discover the compression requirement from rewards alone.

Multivariate series are handled channel-independently: one univariate window
is one unit of work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .boundaries import (
    BoundaryVector,
    CompressionConfig,
    PatchPartition,
    boundaries_to_partition,
    enforce_min_compression,
)
from .policy import TransformerBlock

__all__ = [
    "BackboneConfig",
    "ForecastWindow",
    "Forecaster",
    "partitions_for",
    "task_loss",
    "reward",
]

STD_FLOOR = 1e-5


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 32
    d_latent: int = 64
    latent_depth: int = 2
    heads: int = 4
    horizon: int = 96
    lookback: int = 96
    num_levels: int = 1
    downsample_mode: str = "scatter_mean"
    upsample_mode: str = "gather_residual"
    normalize: bool = True
    latent_positional: bool = True

    def __post_init__(self) -> None:
        if self.d_model % self.heads or self.d_latent % self.heads:
            raise ValueError("widths must be divisible by heads")
        if self.latent_depth < 1:
            raise ValueError("latent_depth must be >= 1")
        if self.horizon < 1 or self.lookback < 1:
            raise ValueError("horizon and lookback must be >= 1")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.downsample_mode not in ("scatter_mean", "cross_attention"):
            raise ValueError(f"unknown downsample_mode {self.downsample_mode!r}")
        if self.upsample_mode not in ("gather_residual", "cross_attention"):
            raise ValueError(f"unknown upsample_mode {self.upsample_mode!r}")


@dataclass(frozen=True)
class ForecastWindow:
    """One univariate look-back window plus its horizon target.

    ``norm_mean``/``norm_std`` are the per-window statistics of the input
    segment, used for instance normalization inside the backbone.
    """

    input: np.ndarray
    target: np.ndarray
    channel_id: int = 0
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def __post_init__(self) -> None:
        inp = np.asarray(self.input, dtype=np.float64)
        tgt = np.asarray(self.target, dtype=np.float64)
        object.__setattr__(self, "input", inp)
        object.__setattr__(self, "target", tgt)
        if not (np.isfinite(inp).all() and np.isfinite(tgt).all()):
            raise ValueError("window contains non-finite values")
        if not self.norm_std > 0:
            raise ValueError("norm_std must be positive after flooring")

    @classmethod
    def from_arrays(
        cls, inp: np.ndarray, tgt: np.ndarray, channel_id: int = 0
    ) -> "ForecastWindow":
        inp = np.asarray(inp, dtype=np.float64)
        std = max(float(inp.std()), STD_FLOOR)
        return cls(
            input=inp,
            target=tgt,
            channel_id=channel_id,
            norm_mean=float(inp.mean()),
            norm_std=std,
        )


def partitions_for(b: BoundaryVector, levels: int) -> tuple[PatchPartition, ...]:
    """Per-level partitions (finest first) used by a ``levels``-deep backbone."""
    if b.num_levels < levels:
        raise ValueError(
            f"boundary vector has {b.num_levels} levels, backbone needs {levels}"
        )
    return tuple(boundaries_to_partition(b, l) for l in range(1, levels + 1))


def _segment_mean(
    feats: torch.Tensor, idx: torch.Tensor, valid: torch.Tensor, k: int
) -> torch.Tensor:
    """Mean of ``feats`` rows grouped by ``idx``; invalid rows contribute 0."""
    bsz, _, dim = feats.shape
    weights = valid.to(feats.dtype).unsqueeze(-1)
    sums = feats.new_zeros(bsz, k, dim)
    sums.scatter_add_(1, idx.unsqueeze(-1).expand(-1, -1, dim), feats * weights)
    counts = feats.new_zeros(bsz, k)
    counts.scatter_add_(1, idx, valid.to(feats.dtype))
    return sums / counts.clamp_min(1.0).unsqueeze(-1)


class _CrossAttnPool(nn.Module):
    """One shared learned query per patch attending over its own span."""

    def __init__(self, d_in: int, d_out: int, dtype: torch.dtype):
        super().__init__()
        self.query = nn.Parameter(torch.zeros(d_out, dtype=dtype))
        nn.init.normal_(self.query, std=0.02)
        self.key = nn.Linear(d_in, d_out, dtype=dtype)
        self.value = nn.Linear(d_in, d_out, dtype=dtype)

    def forward(
        self, feats: torch.Tensor, idx: torch.Tensor, valid: torch.Tensor, k: int
    ) -> torch.Tensor:
        bsz, _, _ = feats.shape
        d = self.query.shape[0]
        scores = self.key(feats) @ self.query / d**0.5
        neg = torch.finfo(feats.dtype).min
        scores = torch.where(valid, scores, torch.full_like(scores, neg))
        seg_max = feats.new_full((bsz, k), neg)
        seg_max.scatter_reduce_(1, idx, scores, reduce="amax")
        ex = torch.exp(scores - seg_max.gather(1, idx)) * valid.to(feats.dtype)
        denom = feats.new_zeros(bsz, k)
        denom.scatter_add_(1, idx, ex)
        w = ex / denom.clamp_min(torch.finfo(feats.dtype).tiny).gather(1, idx)
        vals = self.value(feats) * w.unsqueeze(-1)
        out = feats.new_zeros(bsz, k, vals.shape[-1])
        out.scatter_add_(1, idx.unsqueeze(-1).expand(-1, -1, vals.shape[-1]), vals)
        return out


class _CrossAttnUnpool(nn.Module):
    """Each fine position queries the patch contexts (single head)."""

    def __init__(self, d_fine: int, d_latent: int, dtype: torch.dtype):
        super().__init__()
        self.query = nn.Linear(d_fine, d_latent, dtype=dtype)
        self.key = nn.Linear(d_latent, d_latent, dtype=dtype)
        self.out = nn.Linear(d_latent, d_fine, dtype=dtype)

    def forward(
        self, feats: torch.Tensor, ctx: torch.Tensor, pad: torch.Tensor
    ) -> torch.Tensor:
        d = ctx.shape[-1]
        scores = self.query(feats) @ self.key(ctx).transpose(1, 2) / d**0.5
        scores = scores.masked_fill(pad[:, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        return self.out(attn @ ctx)


class Forecaster(nn.Module):
    """Downstream forecasting model consuming windows plus patch partitions."""

    def __init__(self, cfg: BackboneConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.step_embed = nn.Linear(1, cfg.d_model, dtype=dtype)
        dims_in = [cfg.d_model] + [cfg.d_latent] * (cfg.num_levels - 1)
        if cfg.downsample_mode == "scatter_mean":
            self.down = nn.ModuleList(
                nn.Linear(d, cfg.d_latent, dtype=dtype) for d in dims_in
            )
        else:
            self.down = nn.ModuleList(
                _CrossAttnPool(d, cfg.d_latent, dtype) for d in dims_in
            )
        if cfg.upsample_mode == "gather_residual":
            self.up = nn.ModuleList(
                nn.Linear(cfg.d_latent, d, dtype=dtype) for d in dims_in
            )
        else:
            self.up = nn.ModuleList(
                _CrossAttnUnpool(d, cfg.d_latent, dtype) for d in dims_in
            )
        self.latent_pos = nn.ParameterList(
            nn.Parameter(torch.zeros(cfg.lookback, cfg.d_latent, dtype=dtype))
            for _ in range(cfg.num_levels)
        )
        for p in self.latent_pos:
            nn.init.normal_(p, std=0.02)
        self.latent_blocks = nn.ModuleList(
            nn.ModuleList(
                TransformerBlock(cfg.d_latent, cfg.heads, dtype=dtype)
                for _ in range(cfg.latent_depth)
            )
            for _ in range(cfg.num_levels)
        )
        self.head = nn.Linear(cfg.lookback * cfg.d_model, cfg.horizon, dtype=dtype)

    # --- single-sample stage operations -------------------------------

    def embed_steps(self, x) -> torch.Tensor:
        """Affine per-step lift of a window to ``[T_in, d_model]``."""
        x = self._as_tensor(x)
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input")
        return self.step_embed(x.unsqueeze(-1))

    def downsample(
        self, step_emb: torch.Tensor, partition: PatchPartition
    ) -> torch.Tensor:
        """Pool step embeddings into one patch embedding per span."""
        idx = torch.as_tensor(partition.patch_of()).unsqueeze(0)
        valid = torch.ones_like(idx, dtype=torch.bool)
        k = partition.num_patches
        feats = step_emb.unsqueeze(0)
        if self.cfg.downsample_mode == "scatter_mean":
            return self.down[0](_segment_mean(feats, idx, valid, k))[0]
        return self.down[0](feats, idx, valid, k)[0]

    def latent_encode(self, patch_emb: torch.Tensor) -> torch.Tensor:
        """Contextualize patch embeddings with the level-1 latent stack."""
        h = patch_emb.unsqueeze(0)
        if self.cfg.latent_positional:
            h = h + self.latent_pos[0][: h.shape[1]]
        for block in self.latent_blocks[0]:
            h = block(h)
        return h[0]

    def upsample(
        self,
        patch_ctx: torch.Tensor,
        partition: PatchPartition,
        step_emb: torch.Tensor,
    ) -> torch.Tensor:
        """Scatter patch context back to steps: residual plus projection."""
        idx = torch.as_tensor(partition.patch_of())
        if self.cfg.upsample_mode == "gather_residual":
            return step_emb + self.up[0](patch_ctx[idx])
        pad = torch.zeros(1, patch_ctx.shape[0], dtype=torch.bool)
        return (
            step_emb
            + self.up[0](step_emb.unsqueeze(0), patch_ctx.unsqueeze(0), pad)[0]
        )

    # --- batched pipeline ---------------------------------------------

    def forward_batch(
        self,
        inputs: torch.Tensor,
        partitions: list[tuple[PatchPartition, ...]],
        stats: tuple[torch.Tensor, torch.Tensor] | None = None,
    ) -> torch.Tensor:
        """Predict ``[batch, horizon]`` for windows with per-sample partitions.

        ``partitions[b]`` holds the per-level partitions for sample ``b``
        (finest first); boundaries are assumed to be already enforced.
        """
        cfg = self.cfg
        bsz, seq = inputs.shape
        if seq != cfg.lookback:
            raise ValueError(f"expected lookback {cfg.lookback}, got {seq}")
        if len(partitions) != bsz:
            raise ValueError("one partition tuple required per window")
        x = inputs.to(self.dtype)
        if cfg.normalize:
            if stats is None:
                mean = x.mean(dim=1, keepdim=True)
                std = x.std(dim=1, unbiased=False, keepdim=True).clamp_min(STD_FLOOR)
            else:
                mean = stats[0].to(self.dtype).view(-1, 1)
                std = stats[1].to(self.dtype).view(-1, 1)
            x = (x - mean) / std
        h = self.step_embed(x.unsqueeze(-1))
        h = self._process(h, None, partitions, level=1)
        pred = self.head(h.reshape(bsz, -1))
        if cfg.normalize:
            pred = pred * std + mean
        return pred

    def _process(
        self,
        feats: torch.Tensor,
        valid: torch.Tensor | None,
        partitions: list[tuple[PatchPartition, ...]],
        level: int,
    ) -> torch.Tensor:
        """Down to ``level`` resolution, recurse deeper, contextualize, up."""
        cfg = self.cfg
        bsz, n, _ = feats.shape
        if valid is None:
            valid = feats.new_ones(bsz, n, dtype=torch.bool)
        sizes = [p[level - 1].num_patches for p in partitions]
        k = max(sizes)
        idx = feats.new_zeros(bsz, n, dtype=torch.long)
        for b, parts in enumerate(partitions):
            fine_index = self._fine_index(parts, level)
            idx[b, : len(fine_index)] = torch.as_tensor(fine_index)
        layer = level - 1
        if cfg.downsample_mode == "scatter_mean":
            patch = self.down[layer](_segment_mean(feats, idx, valid, k))
        else:
            patch = self.down[layer](feats, idx, valid, k)
        if cfg.latent_positional:
            patch = patch + self.latent_pos[layer][:k]
        counts = torch.as_tensor(sizes, device=feats.device)
        pad = torch.arange(k, device=feats.device)[None, :] >= counts[:, None]
        if level < cfg.num_levels:
            patch = self._process(patch, ~pad, partitions, level + 1)
        for block in self.latent_blocks[layer]:
            patch = block(patch, key_padding=pad)
        if cfg.upsample_mode == "gather_residual":
            gathered = patch.gather(
                1, idx.unsqueeze(-1).expand(-1, -1, patch.shape[-1])
            )
            return feats + self.up[layer](gathered)
        return feats + self.up[layer](feats, patch, pad)

    @staticmethod
    def _fine_index(parts: tuple[PatchPartition, ...], level: int) -> np.ndarray:
        """Map positions at resolution ``level - 1`` to patches at ``level``."""
        if level == 1:
            return parts[0].patch_of()
        coarse_of_step = parts[level - 1].patch_of()
        ends = np.array([end for _, end in parts[level - 2].spans])
        return coarse_of_step[ends]

    # --- environment entry point --------------------------------------

    def forecast(
        self,
        window: ForecastWindow,
        b: BoundaryVector,
        compression: CompressionConfig,
    ) -> np.ndarray:
        """Enforce minimum compression, then run the full pipeline."""
        if window.input.size != self.cfg.lookback:
            raise ValueError("window length does not match backbone lookback")
        enforced = enforce_min_compression(b, compression)
        parts = partitions_for(enforced, self.cfg.num_levels)
        x = torch.as_tensor(window.input, dtype=self.dtype).unsqueeze(0)
        stats = (
            torch.tensor([window.norm_mean]),
            torch.tensor([window.norm_std]),
        )
        with torch.no_grad():
            pred = self.forward_batch(x, [parts], stats)
        return pred[0].numpy().astype(np.float64)

    def _as_tensor(self, x) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            return torch.as_tensor(x, dtype=self.dtype)
        return x.to(self.dtype)


def task_loss(prediction, target):
    """Mean squared error; differentiable when given tensors."""
    if isinstance(prediction, torch.Tensor):
        target = torch.as_tensor(target, dtype=prediction.dtype)
        if prediction.shape != target.shape:
            raise ValueError("prediction/target length mismatch")
        return ((prediction - target) ** 2).mean()
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if prediction.shape != target.shape:
        raise ValueError("prediction/target length mismatch")
    return float(np.mean((prediction - target) ** 2))


def reward(prediction, target) -> float:
    """Terminal reward for the policy: negated task loss."""
    loss = task_loss(prediction, target)
    if isinstance(loss, torch.Tensor):
        loss = float(loss.detach())
    return -loss
