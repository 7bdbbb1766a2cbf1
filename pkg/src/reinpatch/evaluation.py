"""Metrics, window-set evaluation, and result-table emission."""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import Forecaster, ForecastWindow, partitions_for
from .boundaries import (
    BoundaryVector,
    CompressionConfig,
    PatchPartition,
    enforce_min_compression,
    partition_to_boundaries,
)

__all__ = [
    "mse",
    "mae",
    "evaluate",
    "emit_table",
    "write_results_csv",
    "RESULT_FIELDS",
]

RESULT_FIELDS = ("method", "dataset", "lookback", "horizon", "seed", "mse", "mae")


def mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.mean((pred - target) ** 2))


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("prediction/target shape mismatch")
    return float(np.mean(np.abs(pred - target)))


def evaluate(
    backbone: Forecaster,
    patcher: Callable[[np.ndarray], BoundaryVector | PatchPartition],
    windows: Sequence[ForecastWindow],
    compression: CompressionConfig | None = None,
    batch_size: int = 256,
) -> dict:
    """Aggregate forecasting metrics of a backbone + patcher pair.

    Deterministic given the patcher's own RNG; aggregate metrics are the
    arithmetic mean of the per-window metrics, with a per-horizon-step
    breakdown included.
    """
    if len(windows) == 0:
        raise ValueError("no windows to evaluate")
    per_mse = np.empty(len(windows))
    per_mae = np.empty(len(windows))
    sq_by_step = np.zeros(backbone.cfg.horizon)
    with torch.no_grad():
        for start in range(0, len(windows), batch_size):
            batch = windows[start : start + batch_size]
            parts = []
            for w in batch:
                proposal = patcher(w.input)
                if isinstance(proposal, PatchPartition):
                    proposal = partition_to_boundaries(proposal)
                if compression is not None:
                    proposal = enforce_min_compression(proposal, compression)
                parts.append(partitions_for(proposal, backbone.cfg.num_levels))
            inputs = torch.as_tensor(
                np.stack([w.input for w in batch]), dtype=backbone.dtype
            )
            stats = (
                torch.tensor([w.norm_mean for w in batch]),
                torch.tensor([w.norm_std for w in batch]),
            )
            preds = backbone.forward_batch(inputs, parts, stats)
            preds = preds.to(torch.float64).numpy()
            targets = np.stack([w.target for w in batch])
            err = preds - targets
            per_mse[start : start + len(batch)] = np.mean(err**2, axis=1)
            per_mae[start : start + len(batch)] = np.mean(np.abs(err), axis=1)
            sq_by_step += np.sum(err**2, axis=0)
    return {
        "mse": float(per_mse.mean()),
        "mae": float(per_mae.mean()),
        "n_windows": len(windows),
        "per_window_mse": per_mse,
        "per_window_mae": per_mae,
        "per_step_mse": sq_by_step / len(windows),
    }


def _aggregate(rows: Sequence[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for row in rows:
        key = (row["method"], row["dataset"], row["lookback"], row["horizon"])
        groups[key].append(row)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(x) for x in k)):
        rs = groups[key]
        vals = {m: np.array([float(r[m]) for r in rs]) for m in ("mse", "mae")}
        out.append(
            {
                "method": key[0],
                "dataset": key[1],
                "lookback": key[2],
                "horizon": key[3],
                "n_seeds": len(rs),
                "mse_mean": float(vals["mse"].mean()),
                "mse_std": float(vals["mse"].std(ddof=1)) if len(rs) > 1 else 0.0,
                "mae_mean": float(vals["mae"].mean()),
                "mae_std": float(vals["mae"].std(ddof=1)) if len(rs) > 1 else 0.0,
            }
        )
    return out


def emit_table(rows: Sequence[dict]) -> tuple[str, str]:
    """Aggregate per-seed rows into (CSV text, aligned text table).

    One output row per (method, dataset, lookback, horizon) with the seed
    mean and sample standard deviation of each metric. Empty input yields
    header-only outputs.
    """
    agg = _aggregate(rows)
    buf = io.StringIO()
    writer = csv.writer(buf)
    header = [
        "method", "dataset", "lookback", "horizon", "n_seeds",
        "mse_mean", "mse_std", "mae_mean", "mae_std",
    ]
    writer.writerow(header)
    for row in agg:
        writer.writerow([row[k] for k in header])

    cols = ["method", "dataset", "lookback", "horizon", "MSE", "MAE"]
    lines = []
    body = []
    for row in agg:
        body.append(
            [
                str(row["method"]),
                str(row["dataset"]),
                str(row["lookback"]),
                str(row["horizon"]),
                f"{row['mse_mean']:.4f} ± {row['mse_std']:.4f}",
                f"{row['mae_mean']:.4f} ± {row['mae_std']:.4f}",
            ]
        )
    widths = [
        max(len(cols[i]), *(len(r[i]) for r in body)) if body else len(cols[i])
        for i in range(len(cols))
    ]
    lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(cols)))
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(cols))))
    return buf.getvalue(), "\n".join(lines) + "\n"


def write_results_csv(rows: Sequence[dict], path) -> None:
    """Raw per-seed results with the canonical column schema."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULT_FIELDS)
        for row in rows:
            writer.writerow([row[k] for k in RESULT_FIELDS])
