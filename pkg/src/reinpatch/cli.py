"""Command-line interface: train, evaluate, export, patch, and plot.

Exit codes: 0 success, 2 usage/config error, 3 data or I/O error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .adaptation import (
    PolicyPatcher,
    StreamState,
    auto_boundaries,
    stream_decide,
    topk_boundaries,
)
from .backbone import Forecaster
from .baselines import RandomPatcher, StaticPatcher, VariancePatcher
from .boundaries import CompressionConfig
from .config import (
    ConfigError,
    DataConfig,
    RunConfig,
    apply_overrides,
    build_run_config,
    load_config_file,
)
from .data import (
    DataError,
    SeriesTable,
    SplitSpec,
    load_csv,
    make_windows,
    synth_piecewise,
    table_from_array,
)
from .evaluation import emit_table, evaluate, write_results_csv
from .persistence import ContainerError, load_patcher, read_container, save_patcher
from .persistence import load_checkpoint
from .policy import PatchPolicy, boundary_logit
from .trainer import GrpgTrainer, NonFiniteLossError, train_backbone_with_patcher

__all__ = ["main", "entrypoint"]


def _default_out_dir() -> str:
    return os.environ.get("REINPATCH_OUT", "reinpatch-out")


def _build_table(dc: DataConfig) -> tuple[SeriesTable, str]:
    if dc.csv:
        return load_csv(dc.csv), Path(dc.csv).stem
    series, _ = synth_piecewise(
        dc.synth_segments,
        (dc.synth_len_min, dc.synth_len_max),
        dc.synth_noise,
        np.random.default_rng(dc.synth_seed),
    )
    return table_from_array(series), "synthetic"


def _split_windows(table: SeriesTable, dc: DataConfig, split: str):
    spec = SplitSpec(ratios=dc.ratios, mode=dc.split_mode)
    return make_windows(
        table, dc.lookback, dc.horizon, split, spec, stride=dc.stride
    )


def _load_run_config(args) -> RunConfig:
    mapping = load_config_file(args.config) if args.config else {}
    mapping = apply_overrides(mapping, args.set or [])
    if getattr(args, "seed", None) is not None:
        mapping["train.seed"] = args.seed
    if getattr(args, "lookback", None) is not None:
        mapping["data.lookback"] = args.lookback
    if getattr(args, "horizon", None) is not None:
        mapping["data.horizon"] = args.horizon
    if getattr(args, "data", None):
        mapping["data.csv"] = str(args.data)
    return build_run_config(mapping)


# --- subcommands ----------------------------------------------------------


def _cmd_train(args) -> int:
    run = _load_run_config(args)
    table, name = _build_table(run.data)
    windows = _split_windows(table, run.data, "train")
    torch.manual_seed(run.train.seed)
    policy = PatchPolicy(run.policy)
    backbone = Forecaster(run.backbone)
    trainer = GrpgTrainer(policy, backbone, run.train)
    out_dir = Path(args.out_dir)
    history = trainer.train(windows, out_dir=out_dir)
    last = history[-1]
    print(
        f"trained {len(history)} steps on {name} "
        f"({len(windows)} windows); final backbone loss "
        f"{last['backbone_loss']:.6f}, mean reward {last['mean_reward']:.6f}"
    )
    print(f"checkpoint: {out_dir / 'checkpoint.rpf1'}")
    print(f"metrics:    {out_dir / 'metrics.csv'}")
    return 0


def _cmd_export_patcher(args) -> int:
    trainer = load_checkpoint(args.checkpoint)
    save_patcher(trainer.policy, args.out)
    print(f"exported patcher to {args.out}")
    return 0


def _make_baseline(args, run: RunConfig, seed: int):
    rate = args.rate if args.rate is not None else run.train.min_rate
    if args.patcher == "static":
        return StaticPatcher(args.patch_size)
    if args.patcher == "random":
        return RandomPatcher(rate, np.random.default_rng(seed))
    if args.patcher == "variance":
        return VariancePatcher(rate)
    raise ConfigError(f"unknown patcher {args.patcher!r}")


def _cmd_eval(args) -> int:
    run = _load_run_config(args)
    table, dataset = _build_table(run.data)
    test_windows = _split_windows(table, run.data, "test")
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    compression = CompressionConfig(min_rate=run.train.min_rate)
    rows = []

    source_kind = None
    if args.source:
        source_kind = read_container(args.source)[0]["kind"]

    for seed in seeds:
        if args.patcher == "reinpatch":
            if source_kind is None:
                raise ConfigError("reinpatch eval needs a checkpoint or patcher file")
            if source_kind == "checkpoint":
                trainer = load_checkpoint(args.source)
                if args.frozen:
                    trainer.policy.freeze()
                backbone = trainer.backbone
                patcher = PolicyPatcher(
                    trainer.policy, rule="argmax", compression=trainer.compression
                )
                method = "reinpatch"
            else:
                policy = load_patcher(args.source, frozen=True)
                patcher = PolicyPatcher(
                    policy, rule="argmax", compression=compression
                )
                torch.manual_seed(seed)
                backbone = Forecaster(run.backbone)
                train_windows = _split_windows(table, run.data, "train")
                train_backbone_with_patcher(
                    backbone,
                    train_windows,
                    patcher,
                    replace(run.train, seed=seed),
                    compression=compression,
                )
                method = "reinpatch-zeroshot"
        else:
            patcher = _make_baseline(args, run, seed)
            torch.manual_seed(seed)
            backbone = Forecaster(run.backbone)
            train_windows = _split_windows(table, run.data, "train")
            train_backbone_with_patcher(
                backbone,
                train_windows,
                patcher,
                replace(run.train, seed=seed),
                compression=compression,
            )
            method = args.patcher
        res = evaluate(backbone, patcher, test_windows, compression=compression)
        rows.append(
            {
                "method": method,
                "dataset": dataset,
                "lookback": run.data.lookback,
                "horizon": run.data.horizon,
                "seed": seed,
                "mse": res["mse"],
                "mae": res["mae"],
            }
        )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_results_csv(rows, out_dir / "results.csv")
    csv_text, table_text = emit_table(rows)
    (out_dir / "summary.csv").write_text(csv_text)
    (out_dir / "summary.txt").write_text(table_text)
    print(table_text, end="")
    return 0


def _cmd_patch(args) -> int:
    if args.mode == "causal" and args.rate is None:
        raise ConfigError("causal mode requires --rate")
    policy = load_patcher(args.patcher_file, frozen=True, mode=args.mode)
    table = load_csv(args.data)
    channel = args.channel or table.channel_names[0]
    if channel not in table.channels:
        raise DataError(f"unknown channel {channel!r}")
    series = table.channels[channel]
    lookback = args.lookback
    if series.size < lookback:
        raise DataError("series shorter than one window")
    lines = []
    for start in range(0, series.size - lookback + 1, lookback):
        window = series[start : start + lookback]
        std = max(float(window.std()), 1e-5)
        with torch.no_grad():
            out = policy((window - window.mean()) / std)
        logits = boundary_logit(out, 1)
        if args.mode == "contextual":
            markers = (
                topk_boundaries(logits, args.rate)
                if args.rate is not None
                else auto_boundaries(logits)
            )
        else:
            state = StreamState(
                target_rate=args.rate,
                window_size=max(2, min(64, lookback // 2)),
            )
            markers = np.zeros(lookback, dtype=np.int64)
            for t in range(lookback):
                markers[t], state = stream_decide(state, float(logits[t]))
        lines.append(",".join(str(i) for i in np.flatnonzero(markers)))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(lines)} windows of boundaries to {args.out}")
    return 0


def _render_window_svg(window: np.ndarray, bounds: list[int]) -> str:
    width, height, margin = 800.0, 240.0, 10.0
    lo, hi = float(window.min()), float(window.max())
    span = hi - lo if hi > lo else 1.0
    n = window.size
    xs = [margin + (width - 2 * margin) * t / max(n - 1, 1) for t in range(n)]
    ys = [
        height - margin - (height - 2 * margin) * (v - lo) / span for v in window
    ]
    points = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" '
        f'height="{height:.0f}">',
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
        f'<polyline points="{points}" fill="none" stroke="#1f77b4" '
        'stroke-width="1.5"/>',
    ]
    for idx in bounds:
        x = xs[idx]
        parts.append(
            f'<line x1="{x:.2f}" y1="{margin:.2f}" x2="{x:.2f}" '
            f'y2="{height - margin:.2f}" stroke="#d62728" stroke-width="1" '
            'stroke-dasharray="4 3"/>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _cmd_plot(args) -> int:
    table = load_csv(args.data)
    channel = args.channel or table.channel_names[0]
    if channel not in table.channels:
        raise DataError(f"unknown channel {channel!r}")
    series = table.channels[channel]
    lines = Path(args.boundaries).read_text().splitlines()
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lookback = args.lookback
    for i, line in enumerate(lines):
        start = i * lookback
        if start + lookback > series.size:
            raise DataError(
                f"boundary line {i + 1} exceeds the series length"
            )
        bounds = [int(tok) for tok in line.split(",") if tok.strip()]
        if any(not 0 <= b < lookback for b in bounds):
            raise DataError(f"boundary index out of range on line {i + 1}")
        svg = _render_window_svg(series[start : start + lookback], bounds)
        (out_dir / f"window_{i:04d}.svg").write_text(svg)
    print(f"wrote {len(lines)} SVG files to {out_dir}")
    return 0


# --- parser ---------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reinpatch",
        description="Reinforcement-learned sequence patching for forecasting.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="joint policy + backbone training")
    p_train.add_argument("--config", required=True, help="key = value config file")
    p_train.add_argument("--out-dir", default=_default_out_dir())
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_train.set_defaults(func=_cmd_train)

    p_export = sub.add_parser("export-patcher", help="extract the policy from a checkpoint")
    p_export.add_argument("checkpoint")
    p_export.add_argument("out")
    p_export.set_defaults(func=_cmd_export_patcher)

    p_eval = sub.add_parser("eval", help="evaluate a patcher + backbone")
    p_eval.add_argument("source", nargs="?", default=None,
                        help="checkpoint or exported patcher file")
    p_eval.add_argument("--data", default=None, help="dataset CSV")
    p_eval.add_argument("--config", default=None)
    p_eval.add_argument(
        "--patcher",
        choices=("reinpatch", "static", "random", "variance"),
        default="reinpatch",
    )
    p_eval.add_argument("--patch-size", type=int, default=16)
    p_eval.add_argument("--rate", type=float, default=None)
    p_eval.add_argument("--frozen", action="store_true")
    p_eval.add_argument("--lookback", type=int, default=None)
    p_eval.add_argument("--horizon", type=int, default=None)
    p_eval.add_argument("--seeds", default="0")
    p_eval.add_argument("--out-dir", default=_default_out_dir())
    p_eval.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p_eval.set_defaults(func=_cmd_eval)

    p_patch = sub.add_parser("patch", help="emit boundaries for a series")
    p_patch.add_argument("patcher_file")
    p_patch.add_argument("data", help="series CSV")
    p_patch.add_argument("--out", required=True)
    group = p_patch.add_mutually_exclusive_group(required=True)
    group.add_argument("--rate", type=float, default=None)
    group.add_argument("--auto", action="store_true")
    p_patch.add_argument("--mode", choices=("contextual", "causal"),
                         default="contextual")
    p_patch.add_argument("--lookback", type=int, default=96)
    p_patch.add_argument("--channel", default=None)
    p_patch.set_defaults(func=_cmd_patch)

    p_plot = sub.add_parser("plot", help="boundary overlay SVGs")
    p_plot.add_argument("data", help="series CSV")
    p_plot.add_argument("boundaries", help="boundary file from `patch`")
    p_plot.add_argument("out_dir")
    p_plot.add_argument("--lookback", type=int, default=96)
    p_plot.add_argument("--channel", default=None)
    p_plot.set_defaults(func=_cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"config error: {exc}{key}", file=sys.stderr)
        return 2
    except (DataError, ContainerError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteLossError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
