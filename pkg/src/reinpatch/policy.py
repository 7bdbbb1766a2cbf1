"""Patching policy: per-step boundary logits from a lightweight transformer.

The policy maps a univariate window to ``L + 1`` class logits per step
(class ``l`` = "this step closes a patch at the first ``l`` levels"). Steps
are decided independently, so the log-probability of a full boundary vector
is the sum of per-step class log-probabilities and everything is available
from a single forward pass.

Two visibility modes:
  * ``contextual`` — every step sees the whole window (one-shot joint
    decision over all boundaries);
  * ``causal`` — step ``t`` sees ``x[0..t]`` only, enforced exactly through
    the attention mask, which makes the per-step logits reusable for
    streaming decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .boundaries import BoundaryVector

__all__ = [
    "PolicyConfig",
    "PolicyOutput",
    "PatchPolicy",
    "sample_group",
    "log_prob",
    "policy_entropy",
    "boundary_logit",
]


@dataclass(frozen=True)
class PolicyConfig:
    d_patch: int = 64
    depth: int = 2
    heads: int = 4
    num_levels: int = 1
    mode: str = "contextual"
    context_limit: int = 512

    def __post_init__(self) -> None:
        if self.d_patch % self.heads != 0:
            raise ValueError("d_patch must be divisible by heads")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.num_levels < 1:
            raise ValueError("num_levels must be >= 1")
        if self.mode not in ("contextual", "causal"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.context_limit < 1:
            raise ValueError("context_limit must be >= 1")


@dataclass
class PolicyOutput:
    """Per-step class logits ``[seq_len, L + 1]`` from one forward pass."""

    logits: torch.Tensor
    num_levels: int
    embeddings: torch.Tensor | None = None

    @property
    def seq_len(self) -> int:
        return int(self.logits.shape[0])


class TransformerBlock(nn.Module):
    """Pre-norm block: multi-head self-attention + 4x MLP, residual."""

    def __init__(self, width: int, heads: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.ln1 = nn.LayerNorm(width, dtype=dtype)
        self.ln2 = nn.LayerNorm(width, dtype=dtype)
        self.qkv = nn.Linear(width, 3 * width, dtype=dtype)
        self.proj = nn.Linear(width, width, dtype=dtype)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width, dtype=dtype),
            nn.GELU(),
            nn.Linear(4 * width, width, dtype=dtype),
        )

    def forward(
        self,
        x: torch.Tensor,
        causal: bool = False,
        key_padding: torch.Tensor | None = None,
    ) -> torch.Tensor:
        bsz, seq, width = x.shape
        h = self.ln1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(bsz, seq, self.heads, self.head_dim).transpose(1, 2)
        k = k.view(bsz, seq, self.heads, self.head_dim).transpose(1, 2)
        v = v.view(bsz, seq, self.heads, self.head_dim).transpose(1, 2)
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        if causal:
            mask = torch.triu(
                torch.ones(seq, seq, dtype=torch.bool, device=x.device), diagonal=1
            )
            scores = scores.masked_fill(mask, float("-inf"))
        if key_padding is not None:
            # key_padding: [bsz, seq] True where the position is padding.
            scores = scores.masked_fill(
                key_padding[:, None, None, :], float("-inf")
            )
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, seq, width)
        x = x + self.proj(out)
        x = x + self.mlp(self.ln2(x))
        return x


class PatchPolicy(nn.Module):
    """Embedding model plus linear head producing boundary-class logits."""

    def __init__(self, cfg: PolicyConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.frozen = False
        self.update_count = 0
        self.embed = nn.Linear(1, cfg.d_patch, dtype=dtype)
        self.pos = nn.Parameter(
            torch.zeros(cfg.context_limit, cfg.d_patch, dtype=dtype)
        )
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.d_patch, cfg.heads, dtype=dtype)
            for _ in range(cfg.depth)
        )
        self.ln_out = nn.LayerNorm(cfg.d_patch, dtype=dtype)
        self.head = nn.Linear(cfg.d_patch, cfg.num_levels + 1, dtype=dtype)

    def freeze(self) -> None:
        """Permanently disable gradient updates (zero-shot reuse)."""
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)

    def forward_batch(
        self, x: torch.Tensor, return_embeddings: bool = False
    ) -> torch.Tensor:
        """Logits ``[batch, seq_len, L + 1]`` for a batch of windows."""
        if x.ndim != 2:
            raise ValueError("expected input of shape [batch, seq_len]")
        seq_len = x.shape[1]
        if seq_len > self.cfg.context_limit:
            raise ValueError(
                f"seq_len {seq_len} exceeds context_limit {self.cfg.context_limit}"
            )
        if not torch.isfinite(x).all():
            raise ValueError("policy input contains non-finite values")
        h = self.embed(x.unsqueeze(-1)) + self.pos[:seq_len]
        causal = self.cfg.mode == "causal"
        for block in self.blocks:
            h = block(h, causal=causal)
        h = self.ln_out(h)
        if return_embeddings:
            self._last_embeddings = h
        return self.head(h)

    def forward(self, x, return_embeddings: bool = False) -> PolicyOutput:
        """Single-window forward: ``[seq_len]`` values to a PolicyOutput."""
        if isinstance(x, np.ndarray):
            x = torch.as_tensor(x, dtype=self.dtype)
        if x.ndim != 1:
            raise ValueError("expected a 1-d window")
        logits = self.forward_batch(
            x.to(self.dtype).unsqueeze(0), return_embeddings=return_embeddings
        )[0]
        emb = self._last_embeddings[0] if return_embeddings else None
        return PolicyOutput(
            logits=logits, num_levels=self.cfg.num_levels, embeddings=emb
        )


def log_prob(out: PolicyOutput, b: BoundaryVector) -> torch.Tensor:
    """Exact log-probability of a boundary vector under the policy output.

    Per-step decisions are independent, so this is the sum over steps of the
    chosen class's log-softmax. Differentiable w.r.t. the policy parameters
    when the logits carry gradients.
    """
    if b.seq_len != out.seq_len:
        raise ValueError("boundary vector length does not match policy output")
    logp = torch.log_softmax(out.logits, dim=-1)
    idx = torch.as_tensor(b.levels, dtype=torch.long, device=logp.device)
    return logp.gather(1, idx.unsqueeze(1)).sum()


def sample_group(
    out: PolicyOutput, G: int, rng: torch.Generator
) -> list[tuple[BoundaryVector, torch.Tensor]]:
    """Draw ``G`` independent boundary vectors from the per-step categorical.

    Returns ``(vector, log_prob)`` pairs where each log-prob is computed from
    the same logits via :func:`log_prob` (so it is exactly reproducible).
    """
    if G < 2:
        raise ValueError("group size must be >= 2 (group statistics undefined)")
    probs = torch.softmax(out.logits.detach(), dim=-1)
    draws = torch.multinomial(probs, G, replacement=True, generator=rng)
    group = []
    for i in range(G):
        b = BoundaryVector(
            levels=draws[:, i].numpy().astype(np.int64),
            num_levels=out.num_levels,
        )
        group.append((b, log_prob(out, b)))
    return group


def policy_entropy(out: PolicyOutput) -> torch.Tensor:
    """Sum over steps of the per-step categorical entropy (nats)."""
    logp = torch.log_softmax(out.logits, dim=-1)
    p = torch.exp(logp)
    return -torch.special.xlogy(p, p).sum()


def boundary_logit(out: PolicyOutput, level: int = 1) -> np.ndarray:
    """Per-step log-odds of a boundary at hierarchy level >= ``level``.

    For a single-level policy this is ``logit(class 1) - logit(class 0)``.
    """
    if not 1 <= level <= out.num_levels:
        raise ValueError(f"level must be in [1, {out.num_levels}], got {level}")
    logits = out.logits.detach().to(torch.float64)
    hi = torch.logsumexp(logits[:, level:], dim=-1)
    lo = torch.logsumexp(logits[:, :level], dim=-1)
    return (hi - lo).numpy()
