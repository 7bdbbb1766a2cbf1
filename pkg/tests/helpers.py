"""Shared test utilities: finite-difference gradients and tiny fixtures."""

from __future__ import annotations

import numpy as np
import torch

from reinpatch import BoundaryVector


def finite_diff_grads(params, scalar_fn, h: float = 1e-6):
    """Central finite-difference gradient of ``scalar_fn`` w.r.t. each param."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = float(scalar_fn())
                flat[i] = orig - h
                f_minus = float(scalar_fn())
                flat[i] = orig
                gflat[i] = (f_plus - f_minus) / (2.0 * h)
            grads.append(g)
    return grads


def grad_rel_error(analytic, reference) -> float:
    a = torch.cat([g.reshape(-1) for g in analytic])
    r = torch.cat([g.reshape(-1) for g in reference])
    return float(torch.linalg.norm(a - r) / torch.linalg.norm(r).clamp_min(1e-12))


def random_boundary_vector(
    rng: np.random.Generator, seq_len: int, num_levels: int = 1
) -> BoundaryVector:
    levels = rng.integers(0, num_levels + 1, size=seq_len)
    return BoundaryVector(levels=levels, num_levels=num_levels)
