"""Training loop: warmup+cosine schedule, decoupled-weight-decay Adam, metrics,
checkpointing, and the target-construction x masking-ratio ablation matrix.

Batching is deterministic: the epoch's sample list (every frame of every clip,
``repeated_sampling`` times) is shuffled with a seed derived from
(run seed, epoch), and each item's view/mask draws come from a stream derived
from (run seed, epoch, clip id, frame, repeat). Resuming from a checkpoint at
an epoch boundary therefore reproduces the uninterrupted run exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, InputError, NumericError
from .model import ModelConfig, build_model, masked_mse
from .seeding import derive_seed, spawn_rng
from .synthvideo import ClipFrames, read_dataset
from .views import (
    VARIANT_CROP,
    VARIANT_TIME,
    VARIANT_TIMECROP,
    ViewConfig,
    batch_patchify,
    make_view_pair,
    sample_mask,
)

METRICS_COLUMNS = ("step", "lr", "loss", "loss_per_elem", "seconds")


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float
    warmup_steps: int
    total_steps: int
    min_lr: float = 0.0

    def validate(self) -> None:
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ConfigError(
                f"need 0 <= warmup_steps < total_steps, got {self.warmup_steps}, {self.total_steps}"
            )


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear ramp to base_lr over warmup, then cosine decay to min_lr."""
    sched.validate()
    if not (0 <= step <= sched.total_steps):
        raise InputError(f"step {step} outside [0, {sched.total_steps}]")
    if step < sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    return sched.min_lr + (sched.base_lr - sched.min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class AdamWParams:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05


def init_opt_state(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "exp_avg": {k: torch.zeros_like(v) for k, v in params.items()},
        "exp_avg_sq": {k: torch.zeros_like(v) for k, v in params.items()},
    }


def decay_applies(param: torch.Tensor) -> bool:
    """Weight decay hits matrices only; norm scales, biases and tokens are exempt."""
    return param.ndim >= 2


@torch.no_grad()
def adamw_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: dict,
    lr: float,
    hp: AdamWParams = AdamWParams(),
) -> dict:
    """One decoupled-weight-decay Adam step, in place; returns the state."""
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - hp.beta1**t
    bc2 = 1.0 - hp.beta2**t
    for name, p in params.items():
        g = grads[name]
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for {name}")
        m = state["exp_avg"][name]
        v = state["exp_avg_sq"][name]
        m.mul_(hp.beta1).add_(g, alpha=1.0 - hp.beta1)
        v.mul_(hp.beta2).addcmul_(g, g, value=1.0 - hp.beta2)
        denom = (v / bc2).sqrt_().add_(hp.eps)
        p.addcdiv_(m / bc1, denom, value=-lr)
        if hp.weight_decay != 0.0 and decay_applies(p):
            p.mul_(1.0 - lr * hp.weight_decay)
    return state


# ---------------------------------------------------------------------------
# run configuration


@dataclass(frozen=True)
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    batch_size: int = 32
    epochs: int = 30
    repeated_sampling: int = 2
    mask_ratio: float = 0.9
    variant: str = VARIANT_CROP
    view: ViewConfig = field(default_factory=ViewConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    base_lr: float = 1.5e-4
    min_lr: float = 0.0
    warmup_epochs: int = 3
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.05
    grad_clip: float | None = None
    checkpoint_every: int = 10
    deterministic: bool = False

    def validate(self) -> None:
        if self.repeated_sampling < 1:
            raise ConfigError(f"repeated_sampling must be >= 1, got {self.repeated_sampling}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be >= 1")
        if self.view.view_size != self.model.view_size or self.view.patch_size != self.model.patch_size:
            raise ConfigError(
                f"view {self.view.view_size}/P{self.view.patch_size} inconsistent with "
                f"model {self.model.view_size}/P{self.model.patch_size}"
            )
        if not (0 <= self.warmup_epochs < self.epochs):
            raise ConfigError("need 0 <= warmup_epochs < epochs")

    def effective_view(self) -> ViewConfig:
        """View config with the run-level variant and masking ratio applied."""
        return replace(self.view, variant=self.variant, mask_ratio=self.mask_ratio)

    def resolved_model(self) -> ModelConfig:
        """Model config with seed 0 replaced by a seed derived from the run seed."""
        if self.model.seed != 0:
            return self.model
        return replace(self.model, seed=derive_seed(self.seed, "model"))

    def adamw(self) -> AdamWParams:
        return AdamWParams(self.beta1, self.beta2, self.adam_eps, self.weight_decay)

    def to_json(self) -> dict:
        d = {
            k: getattr(self, k)
            for k in self.__dataclass_fields__
            if k not in ("view", "model")
        }
        d["view"] = self.view.to_json()
        d["model"] = self.model.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunConfig":
        kwargs = {k: d[k] for k in cls.__dataclass_fields__ if k in d and k not in ("view", "model")}
        if "view" in d:
            kwargs["view"] = ViewConfig.from_json(d["view"])
        if "model" in d:
            kwargs["model"] = ModelConfig.from_json(d["model"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()


@dataclass(eq=False)
class TrainResult:
    checkpoint_dir: Path
    metrics_path: Path
    steps: int
    initial_loss: float
    final_loss: float


# ---------------------------------------------------------------------------
# training


def _epoch_samples(clips: list[ClipFrames], run: RunConfig) -> list[tuple[int, int, int]]:
    """(clip_index, frame, repeat) triples for one epoch, pre-shuffle."""
    min_gap = run.view.time_gap[0]
    samples = []
    for ci, clip in enumerate(clips):
        t_max = len(clip.frames) - 1
        if run.variant in (VARIANT_TIME, VARIANT_TIMECROP):
            t_max = len(clip.frames) - 1 - min_gap
        for t in range(t_max + 1):
            for rep in range(run.repeated_sampling):
                samples.append((ci, t, rep))
    if not samples:
        raise InputError("dataset leaves no usable frames for this variant")
    return samples


def _build_batch(
    clips: list[ClipFrames],
    items: list[tuple[int, int, int]],
    run: RunConfig,
    epoch: int,
    vcfg: ViewConfig,
) -> dict[str, torch.Tensor]:
    n = vcfg.n_patches
    sources, targets, vis_idx, masked_rows = [], [], [], []
    for ci, t, rep in items:
        clip = clips[ci]
        rng = spawn_rng(run.seed, "pair", epoch, clip.clip_id, t, rep)
        pair = make_view_pair(clip, t, run.variant, rng, vcfg)
        mask = sample_mask(n, run.mask_ratio, rng)
        sources.append(pair.source)
        targets.append(pair.target)
        vis_idx.append(mask.visible)
        row = np.zeros(n, dtype=bool)
        row[mask.masked] = True
        masked_rows.append(row)

    src = batch_patchify(np.stack(sources), vcfg.patch_size)
    tgt = batch_patchify(np.stack(targets), vcfg.patch_size)
    tgt64 = tgt.astype(np.float64)
    mean = tgt64.mean(axis=2, keepdims=True)
    std = np.sqrt(tgt64.var(axis=2, keepdims=True) + 1e-6)
    tgt_norm = ((tgt64 - mean) / std).astype(np.float32)
    vis = np.stack(vis_idx)
    visible_patches = np.take_along_axis(tgt, vis[:, :, None], axis=1)
    return {
        "source_patches": torch.from_numpy(src),
        "target_visible": torch.from_numpy(visible_patches),
        "visible_idx": torch.from_numpy(vis).long(),
        "masked_flags": torch.from_numpy(np.stack(masked_rows)),
        "target_norm": torch.from_numpy(tgt_norm),
    }


def train(run: RunConfig, resume: Path | str | None = None) -> TrainResult:
    """Run the optimization loop; returns paths of the final checkpoint/metrics."""
    run.validate()
    torch.set_num_threads(1)  # fastest at this scale and reduction-order stable

    data_dir = Path(run.data_dir)
    if not (data_dir / "manifest.json").exists():
        raise InputError(f"dataset missing: no manifest.json under {data_dir}")
    clips = read_dataset(data_dir)
    vcfg = run.effective_view()

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps(run.to_json(), indent=2))

    start_epoch = 0
    if resume is not None:
        model, step, start_epoch, opt_state = load_checkpoint(resume)
        if opt_state is None:
            raise InputError(f"checkpoint {resume} carries no optimizer state; cannot resume")
    else:
        model = build_model(run.resolved_model())
        step = 0
        opt_state = init_opt_state(dict(model.named_parameters()))
    model.train()

    samples = _epoch_samples(clips, run)
    steps_per_epoch = math.ceil(len(samples) / run.batch_size)
    sched = ScheduleConfig(
        base_lr=run.base_lr,
        warmup_steps=run.warmup_epochs * steps_per_epoch,
        total_steps=run.epochs * steps_per_epoch,
        min_lr=run.min_lr,
    )
    sched.validate()
    hp = run.adamw()
    params = dict(model.named_parameters())
    patch_len = vcfg.patch_size**2 * 3

    metrics_path = out / "metrics.csv"
    fresh_metrics = not (resume is not None and metrics_path.exists())
    metrics_file = metrics_path.open("w" if fresh_metrics else "a", newline="")
    writer = csv.writer(metrics_file)
    if fresh_metrics:
        writer.writerow(METRICS_COLUMNS)

    initial_loss = math.nan
    final_loss = math.nan
    try:
        for epoch in range(start_epoch, run.epochs):
            order = spawn_rng(run.seed, "shuffle", epoch).permutation(len(samples))
            for b0 in range(0, len(samples), run.batch_size):
                t_start = time.perf_counter()
                items = [samples[i] for i in order[b0 : b0 + run.batch_size]]
                batch = _build_batch(clips, items, run, epoch, vcfg)
                lr = lr_at(step, sched)

                model.zero_grad(set_to_none=True)
                pred = model(batch["source_patches"], batch["target_visible"], batch["visible_idx"])
                loss = masked_mse(pred, batch["target_norm"], batch["masked_flags"])
                loss_val = float(loss.detach())
                if not math.isfinite(loss_val):
                    save_checkpoint(out / "ckpt_diagnostic", model, step, epoch, opt_state)
                    raise NumericError(
                        f"non-finite loss {loss_val} at step {step}; diagnostic checkpoint saved"
                    )
                loss.backward()
                if run.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), run.grad_clip)
                grads = {name: p.grad for name, p in params.items()}
                adamw_update(params, grads, opt_state, lr, hp)

                step += 1
                if math.isnan(initial_loss):
                    initial_loss = loss_val
                final_loss = loss_val
                seconds = 0.0 if run.deterministic else time.perf_counter() - t_start
                writer.writerow(
                    [step, repr(lr), repr(loss_val), repr(loss_val / patch_len), f"{seconds:.6f}"]
                )
            if run.checkpoint_every and (epoch + 1) % run.checkpoint_every == 0 and epoch + 1 < run.epochs:
                save_checkpoint(out / f"ckpt_ep{epoch + 1:04d}", model, step, epoch + 1, opt_state)
            metrics_file.flush()
    finally:
        metrics_file.close()

    ckpt = save_checkpoint(out / "ckpt_final", model, step, run.epochs, opt_state)
    return TrainResult(
        checkpoint_dir=ckpt,
        metrics_path=metrics_path,
        steps=step,
        initial_loss=initial_loss,
        final_loss=final_loss,
    )


# ---------------------------------------------------------------------------
# ablation matrix


def run_ablation_matrix(
    base: RunConfig,
    variants: tuple[str, ...] = (VARIANT_CROP, VARIANT_TIME, VARIANT_TIMECROP),
    ratios: tuple[float, ...] = (0.75, 0.9, 0.95),
    probe_lambda: float = 1e-3,
    probe_seed: int = 0,
) -> dict:
    """Train one model per (variant, ratio) cell under identical seeds/budget.

    Emits report.json and report.csv under base.out_dir with final losses and
    frozen-encoder probe scores per cell. The (crop, 0.90) cell is flagged as
    the default configuration.
    """
    from .probe import build_probe_dataset, eval_probe, fit_ridge

    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clips = read_dataset(base.data_dir)
    rows = []
    for variant in variants:
        for ratio in ratios:
            cell = replace(
                base,
                variant=variant,
                mask_ratio=float(ratio),
                out_dir=str(out / f"cell_{variant}_{int(round(ratio * 100)):02d}"),
            )
            result = train(cell)
            model, _, _, _ = load_checkpoint(result.checkpoint_dir)
            ds = build_probe_dataset(model, clips, view_size=cell.view.view_size, seed=probe_seed)
            probe = fit_ridge(ds, probe_lambda)
            scores = eval_probe(probe, ds)
            rows.append(
                {
                    "variant": variant,
                    "mask_ratio": float(ratio),
                    "steps": result.steps,
                    "final_loss": result.final_loss,
                    "pos_mae_px": scores["pos_mae_px"],
                    "shape_acc": scores["shape_acc"],
                    "color_acc": scores["color_acc"],
                    "config_hash": cell.config_hash(),
                    "checkpoint": str(result.checkpoint_dir),
                    "highlighted": variant == VARIANT_CROP and abs(ratio - 0.9) < 1e-9,
                }
            )
    report = {"cells": rows, "default_cell": {"variant": VARIANT_CROP, "mask_ratio": 0.9}}
    (out / "report.json").write_text(json.dumps(report, indent=2))
    with (out / "report.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    return report
