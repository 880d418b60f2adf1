"""Frozen-encoder probing: does the bottleneck token know what is where?

Each frame of each clip is embedded with a frozen encoder; ridge regression
then predicts the largest sprite's center (in view pixels) and its shape and
color categories from the embedding alone. Clips are split 80/20 at the clip
level so no clip contributes frames to both sides. Position error in pixels
is directly comparable to the patch size.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import center_square_geometry, embed_frames
from .errors import InputError, NumericError
from .model import CroboModel
from .seeding import spawn_rng
from .synthvideo import PALETTE, PALETTE_NAMES, SHAPES, ClipFrames

TARGET_COLUMNS = (
    ("pos", 2),
    ("shape", len(SHAPES)),
    ("color", len(PALETTE_NAMES)),
)
N_TARGETS = sum(n for _, n in TARGET_COLUMNS)

_PALETTE_ARRAY = np.array([PALETTE[name] for name in PALETTE_NAMES], dtype=np.float64) / 255.0


@dataclass(eq=False)
class ProbeDataset:
    features: np.ndarray  # (M, D)
    targets: np.ndarray  # (M, N_TARGETS): x, y, shape one-hot, color one-hot
    train_rows: np.ndarray
    test_rows: np.ndarray
    view_size: int


@dataclass(eq=False)
class RidgeProbe:
    weights: np.ndarray  # (D, K)
    bias: np.ndarray  # (K,)
    lam: float


def _largest_sprite(frame_meta) -> int:
    radii = [sp.radius_px for sp in frame_meta]
    return int(np.argmax(radii))


def _color_index(color: tuple[float, float, float]) -> int:
    d = ((_PALETTE_ARRAY - np.asarray(color)) ** 2).sum(axis=1)
    return int(np.argmin(d))


def frame_targets(frame_meta, frame_h: int, frame_w: int, view_size: int) -> np.ndarray:
    """Ground-truth row for one frame: largest sprite's view-space center + classes."""
    x0, y0, side = center_square_geometry(frame_h, frame_w)
    scale = view_size / side
    sp = frame_meta[_largest_sprite(frame_meta)]
    row = np.zeros(N_TARGETS)
    row[0] = (sp.position[0] - x0) * scale
    row[1] = (sp.position[1] - y0) * scale
    row[2 + SHAPES.index(sp.shape_kind)] = 1.0
    row[2 + len(SHAPES) + _color_index(sp.color)] = 1.0
    return row


def build_probe_dataset(
    model: CroboModel,
    clips: list[ClipFrames],
    view_size: int | None = None,
    seed: int = 0,
    train_frac: float = 0.8,
) -> ProbeDataset:
    """Embed every frame and pair it with sprite ground truth; split by clip."""
    if not clips:
        raise InputError("no clips given")
    size = view_size if view_size is not None else model.cfg.view_size
    feats, targs, clip_of_row = [], [], []
    for ci, clip in enumerate(clips):
        if not clip.metadata or any(len(m) == 0 for m in clip.metadata):
            raise InputError(f"clip {clip.clip_id} lacks sprite metadata")
        frames = np.stack(clip.frames)
        feats.append(embed_frames(model, frames, size))
        h, w = frames.shape[1:3]
        targs.extend(frame_targets(m, h, w, size) for m in clip.metadata)
        clip_of_row.extend([ci] * len(clip.frames))

    features = np.concatenate(feats, axis=0)
    targets = np.stack(targs)
    clip_of_row = np.array(clip_of_row)

    order = spawn_rng(seed, "probe-split").permutation(len(clips))
    n_train_clips = max(1, int(round(train_frac * len(clips))))
    if len(clips) > 1:
        n_train_clips = min(n_train_clips, len(clips) - 1)
    train_clips = set(order[:n_train_clips].tolist())
    is_train = np.array([ci in train_clips for ci in clip_of_row])
    return ProbeDataset(
        features=features,
        targets=targets,
        train_rows=np.flatnonzero(is_train),
        test_rows=np.flatnonzero(~is_train),
        view_size=size,
    )


def fit_ridge(ds: ProbeDataset, lam: float) -> RidgeProbe:
    """Closed-form ridge on mean-centered training features; bias absorbs means."""
    x = ds.features[ds.train_rows].astype(np.float64)
    y = ds.targets[ds.train_rows].astype(np.float64)
    n, d = x.shape
    if n < d and lam <= 0.0:
        raise NumericError(f"{n} rows < {d} features; use lambda > 0")
    x_mean = x.mean(axis=0)
    y_mean = y.mean(axis=0)
    xc = x - x_mean
    yc = y - y_mean
    gram = xc.T @ xc + lam * np.eye(d)
    try:
        weights = np.linalg.solve(gram, xc.T @ yc)
    except np.linalg.LinAlgError as e:
        raise NumericError(f"singular normal equations at lambda={lam}; use lambda > 0") from e
    if not np.isfinite(weights).all():
        raise NumericError(f"non-finite ridge solution at lambda={lam}; use lambda > 0")
    bias = y_mean - x_mean @ weights
    return RidgeProbe(weights=weights, bias=bias, lam=float(lam))


def predict(probe, features: np.ndarray) -> np.ndarray:
    if isinstance(probe, RidgeProbe):
        return features.astype(np.float64) @ probe.weights + probe.bias
    return probe.predict(features)


def eval_probe(probe, ds: ProbeDataset) -> dict:
    """Held-out position MAE (view pixels) and argmax accuracies, as JSON-ready dict.

    Accuracies are reported only when the targets carry the canonical
    pos + shape one-hot + color one-hot layout.
    """
    if len(ds.test_rows) < 1:
        raise InputError("empty held-out split")
    pred = predict(probe, ds.features[ds.test_rows])
    true = ds.targets[ds.test_rows]
    pos_mae = float(np.abs(pred[:, :2] - true[:, :2]).mean())
    shape_acc = color_acc = None
    if true.shape[1] == N_TARGETS:
        s0, s1 = 2, 2 + len(SHAPES)
        c0, c1 = s1, s1 + len(PALETTE_NAMES)
        shape_acc = float((pred[:, s0:s1].argmax(1) == true[:, s0:s1].argmax(1)).mean())
        color_acc = float((pred[:, c0:c1].argmax(1) == true[:, c0:c1].argmax(1)).mean())
    return {
        "pos_mae_px": pos_mae,
        "shape_acc": shape_acc,
        "color_acc": color_acc,
        "n_train": int(len(ds.train_rows)),
        "n_test": int(len(ds.test_rows)),
        "lambda": getattr(probe, "lam", None),
    }


def write_probe_report(scores: dict, path: Path | str, ckpt_hash: str = "") -> None:
    out = dict(scores)
    out["ckpt_hash"] = ckpt_hash
    Path(path).write_text(json.dumps(out, indent=2))


# ---------------------------------------------------------------------------
# optional MLP head (qualitative parity check; not used by any acceptance gate)


def fit_mlp_probe(
    ds: ProbeDataset,
    hidden: int = 256,
    steps: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
) -> "MlpProbe":
    """Small two-hidden-layer regression head trained on the frozen features."""
    import torch

    torch.set_num_threads(1)
    g = torch.Generator().manual_seed(seed)
    d, k = ds.features.shape[1], ds.targets.shape[1]
    layers = [d, hidden, hidden, k]
    weights = [
        torch.randn(layers[i], layers[i + 1], generator=g, dtype=torch.float64)
        * (2.0 / layers[i]) ** 0.5
        for i in range(3)
    ]
    biases = [torch.zeros(layers[i + 1], dtype=torch.float64) for i in range(3)]
    for w in weights:
        w.requires_grad_(True)
    for b in biases:
        b.requires_grad_(True)
    x = torch.from_numpy(ds.features[ds.train_rows].astype(np.float64))
    y = torch.from_numpy(ds.targets[ds.train_rows].astype(np.float64))
    opt = torch.optim.Adam(weights + biases, lr=lr)
    for _ in range(steps):
        opt.zero_grad()
        h = x
        for i in range(3):
            h = h @ weights[i] + biases[i]
            if i < 2:
                h = torch.relu(h)
        loss = ((h - y) ** 2).mean()
        loss.backward()
        opt.step()
    return MlpProbe(
        weights=[w.detach().numpy() for w in weights],
        biases=[b.detach().numpy() for b in biases],
    )


@dataclass(eq=False)
class MlpProbe:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def predict(self, features: np.ndarray) -> np.ndarray:
        h = features.astype(np.float64)
        for i in range(3):
            h = h @ self.weights[i] + self.biases[i]
            if i < 2:
                h = np.maximum(h, 0.0)
        return h
