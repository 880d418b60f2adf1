"""Checkpoint format: manifest.json + params.bin.

The manifest carries the model config, training step/epoch, and an ordered
tensor table (name, shape, dtype, byte offset). params.bin is the matching
concatenation of little-endian float32 tensors. Optimizer moments are stored
with an ``opt.`` name prefix so a checkpoint can resume training exactly.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import InputError
from .model import CroboModel, ModelConfig, build_model

FORMAT_TAG = "crobo-checkpoint-v1"


def _tensor_bytes(t: torch.Tensor) -> bytes:
    arr = t.detach().cpu().to(torch.float32).numpy()
    return np.ascontiguousarray(arr).astype("<f4").tobytes()


def save_checkpoint(
    ckpt_dir: Path | str,
    model: CroboModel,
    step: int,
    epoch: int = 0,
    opt_state: dict[str, dict[str, torch.Tensor]] | None = None,
) -> Path:
    """Write manifest.json + params.bin under ckpt_dir; returns the directory."""
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0

    def add(name: str, tensor: torch.Tensor) -> None:
        nonlocal offset
        raw = _tensor_bytes(tensor)
        entries.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)

    for name, p in model.named_parameters():
        add(name, p)
    if opt_state is not None:
        for moment in ("exp_avg", "exp_avg_sq"):
            for name in opt_state[moment]:
                add(f"opt.{moment}.{name}", opt_state[moment][name])

    manifest = {
        "format": FORMAT_TAG,
        "config": model.cfg.to_json(),
        "step": int(step),
        "epoch": int(epoch),
        "optimizer_step": int(opt_state["step"]) if opt_state is not None else None,
        "tensors": entries,
    }
    (out / "params.bin").write_bytes(b"".join(blobs))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_checkpoint(
    ckpt_dir: Path | str,
) -> tuple[CroboModel, int, int, dict | None]:
    """Rebuild (model, step, epoch, opt_state) from a checkpoint directory."""
    cdir = Path(ckpt_dir)
    manifest_path = cdir / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json under {cdir}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT_TAG:
        raise InputError(f"unrecognized checkpoint format in {manifest_path}")
    raw = (cdir / "params.bin").read_bytes()

    tensors: dict[str, torch.Tensor] = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.copy()).reshape(e["shape"])

    cfg = ModelConfig.from_json(manifest["config"])
    model = build_model(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise InputError(f"checkpoint missing tensor {name}")
            p.copy_(tensors[name])

    opt_state = None
    if manifest.get("optimizer_step") is not None:
        opt_state = {"step": int(manifest["optimizer_step"]), "exp_avg": {}, "exp_avg_sq": {}}
        for name, _ in model.named_parameters():
            opt_state["exp_avg"][name] = tensors[f"opt.exp_avg.{name}"]
            opt_state["exp_avg_sq"][name] = tensors[f"opt.exp_avg_sq.{name}"]
    return model, int(manifest["step"]), int(manifest["epoch"]), opt_state


def checkpoint_hash(ckpt_dir: Path | str) -> str:
    """sha256 of params.bin, used to tag downstream reports."""
    return hashlib.sha256((Path(ckpt_dir) / "params.bin").read_bytes()).hexdigest()
