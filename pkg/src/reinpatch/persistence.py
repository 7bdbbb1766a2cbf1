"""Single-file container for exported patchers and training checkpoints.

Layout of an RPF1 file:

    bytes 0..3    magic ``RPF1``
    bytes 4..7    little-endian uint32 header length
    header        UTF-8 JSON: format_version, kind, config, extra, and a
                  tensor manifest (name, shape, dtype, byte offset)
    payload       contiguous little-endian float32 tensor data
    trailer       little-endian uint32 CRC-32 of everything prior

The same container carries both artifact kinds: ``patcher`` (policy config +
weights, reloadable frozen for zero-shot reuse) and ``checkpoint`` (policy,
backbone, optimizer moments, RNG state, and step counters, sufficient to
resume training bit-identically).
"""

from __future__ import annotations

import base64
import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig, Forecaster
from .policy import PatchPolicy, PolicyConfig

__all__ = [
    "ContainerError",
    "BadMagicError",
    "VersionError",
    "ChecksumError",
    "ManifestError",
    "write_container",
    "read_container",
    "save_patcher",
    "load_patcher",
    "save_checkpoint",
    "load_checkpoint",
]

MAGIC = b"RPF1"
FORMAT_VERSION = 1


class ContainerError(Exception):
    """Base error for malformed or mismatched containers."""


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


class ManifestError(ContainerError):
    pass


def write_container(
    path: str | Path,
    kind: str,
    config: dict,
    tensors: dict[str, np.ndarray],
    extra: dict | None = None,
) -> None:
    manifest = []
    payload = bytearray()
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "f32",
                "offset": len(payload),
            }
        )
        payload.extend(arr.tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
        "tensors": manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + bytes(payload)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    Path(path).write_bytes(body + struct.pack("<I", crc))


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not an RPF1 container")
    if len(raw) < 12:
        raise ChecksumError(f"{path}: truncated container")
    stored_crc = struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError(f"{path}: checksum mismatch (corrupt or truncated)")
    header_len = struct.unpack("<I", raw[4:8])[0]
    header_end = 8 + header_len
    if header_end > len(raw) - 4:
        raise ChecksumError(f"{path}: header extends past end of file")
    try:
        header = json.loads(raw[8:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"{path}: unsupported format version {header.get('format_version')!r}"
        )
    payload = raw[header_end:-4]
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + 4 * count
        if entry["dtype"] != "f32" or end > len(payload):
            raise ManifestError(f"{path}: bad manifest entry {entry['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return header, tensors


def _state_tensors(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for name, tensor in module.state_dict().items():
        if tensor.dtype != torch.float32:
            raise ContainerError(
                f"tensor {name!r} is {tensor.dtype}; containers store float32"
            )
        out[prefix + name] = tensor.detach().numpy()
    return out


def _load_state(
    module: torch.nn.Module, tensors: dict[str, np.ndarray], prefix: str = ""
) -> None:
    state = module.state_dict()
    loaded = {}
    for name, tensor in state.items():
        key = prefix + name
        if key not in tensors:
            raise ManifestError(f"missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise ManifestError(
                f"shape mismatch for {key!r}: file {arr.shape}, model "
                f"{tuple(tensor.shape)}"
            )
        loaded[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(loaded)


# --- foundation patcher -------------------------------------------------


def save_patcher(policy: PatchPolicy, path: str | Path) -> None:
    """Export the policy (config + weights) as a standalone patcher file."""
    write_container(
        path,
        kind="patcher",
        config={"policy": asdict(policy.cfg)},
        tensors=_state_tensors(policy),
    )


def load_patcher(
    path: str | Path, frozen: bool = False, mode: str | None = None
) -> PatchPolicy:
    """Reload an exported patcher; ``frozen=True`` forbids any future update.

    ``mode`` optionally overrides the visibility mode (the weights are shared
    between contextual and causal masking).
    """
    header, tensors = read_container(path)
    if header["kind"] != "patcher":
        raise ManifestError(f"{path}: container kind is {header['kind']!r}")
    cfg_dict = dict(header["config"]["policy"])
    if mode is not None:
        cfg_dict["mode"] = mode
    policy = PatchPolicy(PolicyConfig(**cfg_dict))
    _load_state(policy, tensors)
    if frozen:
        policy.freeze()
    return policy


# --- training checkpoints -------------------------------------------------


def _optimizer_tensors(
    opt: torch.optim.Optimizer, prefix: str
) -> tuple[dict[str, np.ndarray], list[float]]:
    tensors: dict[str, np.ndarray] = {}
    steps: list[float] = []
    params = [p for g in opt.param_groups for p in g["params"]]
    for i, p in enumerate(params):
        state = opt.state.get(p, {})
        if not state:
            steps.append(-1.0)
            continue
        steps.append(float(state["step"]))
        tensors[f"{prefix}.{i}.exp_avg"] = state["exp_avg"].detach().numpy()
        tensors[f"{prefix}.{i}.exp_avg_sq"] = state["exp_avg_sq"].detach().numpy()
    return tensors, steps


def _restore_optimizer(
    opt: torch.optim.Optimizer,
    tensors: dict[str, np.ndarray],
    steps: list[float],
    prefix: str,
) -> None:
    params = [p for g in opt.param_groups for p in g["params"]]
    if len(steps) != len(params):
        raise ManifestError(f"optimizer {prefix!r} has {len(params)} params, "
                            f"checkpoint has {len(steps)}")
    sd = opt.state_dict()
    for i in range(len(params)):
        if steps[i] < 0:
            continue
        sd["state"][i] = {
            "step": torch.tensor(steps[i]),
            "exp_avg": torch.from_numpy(tensors[f"{prefix}.{i}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(
                tensors[f"{prefix}.{i}.exp_avg_sq"].copy()
            ),
        }
    opt.load_state_dict(sd)


def save_checkpoint(path: str | Path, trainer) -> None:
    """Full training state: models, optimizer moments, RNG, and counters."""
    tensors = _state_tensors(trainer.policy, "policy.")
    tensors.update(_state_tensors(trainer.backbone, "backbone."))
    opt_b, steps_b = _optimizer_tensors(trainer.backbone_opt, "opt_backbone")
    tensors.update(opt_b)
    extra = {
        "global_step": trainer.global_step,
        "epoch": trainer.epoch,
        "policy_update_count": trainer.policy.update_count,
        "policy_frozen": trainer.policy.frozen,
        "train_policy": trainer.train_policy,
        "opt_backbone_steps": steps_b,
        "rng_state": base64.b64encode(
            trainer.sample_rng.get_state().numpy().tobytes()
        ).decode("ascii"),
    }
    if trainer.policy_opt is not None:
        opt_p, steps_p = _optimizer_tensors(trainer.policy_opt, "opt_policy")
        tensors.update(opt_p)
        extra["opt_policy_steps"] = steps_p
    compression = trainer.compression
    write_container(
        path,
        kind="checkpoint",
        config={
            "policy": asdict(trainer.policy.cfg),
            "backbone": asdict(trainer.backbone.cfg),
            "train": asdict(trainer.cfg),
            "compression": {
                "min_rate": compression.min_rate,
                "target_rate": compression.target_rate,
                "level_rates": list(compression.level_rates)
                if compression.level_rates
                else None,
            },
        },
        tensors=tensors,
        extra=extra,
    )


def load_checkpoint(path: str | Path):
    """Rebuild a trainer whose next step reproduces the original run."""
    from .boundaries import CompressionConfig
    from .trainer import GrpgTrainer, TrainConfig

    header, tensors = read_container(path)
    if header["kind"] != "checkpoint":
        raise ManifestError(f"{path}: container kind is {header['kind']!r}")
    cfg = header["config"]
    extra = header["extra"]
    policy = PatchPolicy(PolicyConfig(**cfg["policy"]))
    _load_state(policy, tensors, "policy.")
    if extra["policy_frozen"]:
        policy.freeze()
    policy.update_count = int(extra["policy_update_count"])
    backbone = Forecaster(BackboneConfig(**cfg["backbone"]))
    _load_state(backbone, tensors, "backbone.")
    comp = cfg["compression"]
    compression = CompressionConfig(
        min_rate=comp["min_rate"],
        target_rate=comp["target_rate"],
        level_rates=tuple(comp["level_rates"]) if comp["level_rates"] else None,
    )
    trainer = GrpgTrainer(
        policy,
        backbone,
        TrainConfig(**cfg["train"]),
        compression=compression,
        train_policy=extra["train_policy"],
    )
    _restore_optimizer(
        trainer.backbone_opt, tensors, extra["opt_backbone_steps"], "opt_backbone"
    )
    if trainer.policy_opt is not None:
        _restore_optimizer(
            trainer.policy_opt, tensors, extra["opt_policy_steps"], "opt_policy"
        )
    state = np.frombuffer(
        base64.b64decode(extra["rng_state"]), dtype=np.uint8
    ).copy()
    trainer.sample_rng.set_state(torch.from_numpy(state))
    trainer.global_step = int(extra["global_step"])
    trainer.epoch = int(extra["epoch"])
    return trainer
