"""Trajectory geometry of bottleneck embeddings, plus reconstruction rendering.

A clip's trajectory is the sequence of class-token embeddings of its frames
(each frame center-cropped to a square, resized, and encoded unmasked). Local
curvature is the angle between consecutive difference vectors of that
trajectory; straight motion in embedding space gives 0 degrees, direction
reversal 180. Angles are scale- and translation-free by construction, so raw
class tokens are used without any post-normalization.

PCA projection is fit per trajectory and reports the top-2 explained
variances, so a dense eigendecomposition of the sample covariance can serve
as an independent cross-check.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import InputError
from .model import CroboModel
from .synthvideo import ClipFrames, _save_frame_png
from .views import (
    MaskSet,
    PatchGrid,
    ViewPair,
    batch_patchify,
    denormalize_patches,
    patchify,
    resize_bicubic,
    unpatchify,
)


@dataclass(eq=False)
class Trajectory:
    embeddings: np.ndarray  # (T, D) float64
    clip_id: str = ""

    def __post_init__(self) -> None:
        if self.embeddings.ndim != 2:
            raise InputError(f"trajectory must be (T, D), got shape {self.embeddings.shape}")


@dataclass(eq=False)
class CurvatureSeries:
    angles_deg: np.ndarray
    mean_deg: float
    skipped: int


@dataclass(eq=False)
class PCAProjection:
    points: np.ndarray  # (T, 2)
    explained_variance: np.ndarray  # (2,)
    total_variance: float
    degenerate: bool


def center_square_geometry(h: int, w: int) -> tuple[int, int, int]:
    """(x0, y0, side) of the largest centered square inside an h x w frame."""
    side = min(h, w)
    return (w - side) // 2, (h - side) // 2, side


def embed_frames(model: CroboModel, frames: np.ndarray, view_size: int) -> np.ndarray:
    """Class-token embeddings for (T, H, W, 3) frames, encoded unmasked."""
    t, h, w = frames.shape[:3]
    x0, y0, side = center_square_geometry(h, w)
    if side < model.cfg.patch_size:
        raise InputError(f"frame {w}x{h} smaller than one {model.cfg.patch_size}px patch")
    if (x0, y0, side) != (0, 0, view_size):
        imgs = np.stack(
            [resize_bicubic(f[y0 : y0 + side, x0 : x0 + side], view_size, view_size) for f in frames]
        )
    else:
        imgs = frames.astype(np.float32, copy=False)
    patches = torch.from_numpy(batch_patchify(imgs, model.cfg.patch_size))
    all_idx = torch.arange(model.cfg.n_patches, dtype=torch.long)
    dtype = next(model.parameters()).dtype
    out = []
    model.eval()
    with torch.no_grad():
        for b0 in range(0, t, 256):
            cls, _ = model.encode(patches[b0 : b0 + 256].to(dtype), all_idx)
            out.append(cls.double().numpy())
    return np.concatenate(out, axis=0)


def embed_clip(model: CroboModel, clip: ClipFrames, view_size: int | None = None) -> Trajectory:
    """One bottleneck embedding per frame of a clip."""
    size = view_size if view_size is not None else model.cfg.view_size
    frames = np.stack(clip.frames)
    return Trajectory(embeddings=embed_frames(model, frames, size), clip_id=clip.clip_id)


def curvature(traj: Trajectory, eps: float = 1e-12) -> CurvatureSeries:
    """Angles (degrees) between consecutive trajectory difference vectors.

    Differences with norm below eps (static segments) are skipped rather than
    counted as zero angles; the skip count is reported.
    """
    z = np.asarray(traj.embeddings, dtype=np.float64)
    if z.shape[0] < 3:
        raise InputError(f"need at least 3 embeddings for curvature, got {z.shape[0]}")
    diffs = z[1:] - z[:-1]
    norms = np.sqrt((diffs**2).sum(axis=1))
    angles = []
    skipped = 0
    for i in range(len(diffs) - 1):
        if norms[i] < eps or norms[i + 1] < eps:
            skipped += 1
            continue
        cosang = float(diffs[i] @ diffs[i + 1] / (norms[i] * norms[i + 1]))
        cosang = min(1.0, max(-1.0, cosang))
        angles.append(math.degrees(math.acos(cosang)))
    arr = np.array(angles, dtype=np.float64)
    mean = float(arr.mean()) if arr.size else math.nan
    return CurvatureSeries(angles_deg=arr, mean_deg=mean, skipped=skipped)


def mean_curvature(trajs: list[Trajectory], first_k_frames: int = 50) -> dict:
    """Per-clip mean curvature over each clip's first frames, then the overall mean."""
    if not trajs:
        raise InputError("no trajectories given")
    rows = []
    means = []
    for traj in trajs:
        t = min(traj.embeddings.shape[0], first_k_frames)
        series = curvature(Trajectory(traj.embeddings[:t], traj.clip_id))
        rows.append(
            {
                "clip_id": traj.clip_id,
                "n_angles": int(series.angles_deg.size),
                "mean_deg": series.mean_deg,
                "skipped": series.skipped,
            }
        )
        if not math.isnan(series.mean_deg):
            means.append(series.mean_deg)
    overall = float(np.mean(means)) if means else math.nan
    return {"clips": rows, "mean_deg": overall, "n_clips": len(rows)}


def write_curvature_csv(summary: dict, path: Path | str) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["clip_id", "n_angles", "mean_deg", "skipped"])
        writer.writeheader()
        writer.writerows(summary["clips"])


def _principal_sign(v: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip an eigenvector so its first non-negligible coordinate is positive."""
    for x in v:
        if abs(x) > tol:
            return v if x > 0 else -v
    return v


def pca2(traj: Trajectory) -> PCAProjection:
    """Project a trajectory onto its top-2 principal directions.

    Implemented via SVD of the centered embeddings; explained variances are
    squared singular values over (T - 1). A zero-variance trajectory yields
    all-origin points with the degenerate flag set.
    """
    z = np.asarray(traj.embeddings, dtype=np.float64)
    t = z.shape[0]
    if t < 3:
        raise InputError(f"need at least 3 embeddings for PCA, got {t}")
    centered = z - z.mean(axis=0)
    total_var = float((centered**2).sum() / (t - 1))
    if total_var == 0.0:
        return PCAProjection(
            points=np.zeros((t, 2)),
            explained_variance=np.zeros(2),
            total_variance=0.0,
            degenerate=True,
        )
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    basis = np.stack([_principal_sign(vt[i]) for i in range(min(2, vt.shape[0]))])
    points = centered @ basis.T
    if points.shape[1] < 2:
        points = np.pad(points, ((0, 0), (0, 2 - points.shape[1])))
    ev = np.zeros(2)
    ev[: min(2, s.size)] = (s[:2] ** 2) / (t - 1)
    return PCAProjection(
        points=points, explained_variance=ev, total_variance=total_var, degenerate=False
    )


def write_pca_csv(proj: PCAProjection, path: Path | str) -> None:
    with Path(path).open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "p1", "p2"])
        for i, (p1, p2) in enumerate(proj.points):
            writer.writerow([i, repr(float(p1)), repr(float(p2))])


# ---------------------------------------------------------------------------
# reconstruction


def predict_target_patches(model: CroboModel, pair: ViewPair, mask: MaskSet) -> np.ndarray:
    """De-normalized predictions for all N target patches of one pair (N, L)."""
    from .model import prepare_pair_tensors

    dtype = next(model.parameters()).dtype
    pt = prepare_pair_tensors(pair, mask, model.cfg.patch_size, dtype=dtype)
    model.eval()
    with torch.no_grad():
        pred = model(pt.source_patches, pt.target_visible, pt.visible_idx)[0]
    stats = pt.target_stats
    return denormalize_patches(pred.float().numpy().astype(np.float64), stats.mean.astype(np.float64), stats.std.astype(np.float64))


def compose_reconstruction(
    model: CroboModel, pair: ViewPair, mask: MaskSet
) -> tuple[np.ndarray, np.ndarray]:
    """(masked_view, reconstruction): visible patches copied from the target,
    masked patches gray in the first image and predicted in the second."""
    p = model.cfg.patch_size
    grid = patchify(pair.target, p)
    pred = predict_target_patches(model, pair, mask)
    masked_patches = grid.patches.copy()
    recon_patches = grid.patches.copy()
    masked_patches[mask.masked] = 0.5
    # clip predictions only; visible patches stay bit-identical to the target
    recon_patches[mask.masked] = np.clip(pred[mask.masked], 0.0, 1.0).astype(np.float32)
    masked_img = unpatchify(PatchGrid(masked_patches, grid.grid_side, p))
    recon_img = unpatchify(PatchGrid(recon_patches, grid.grid_side, p))
    return masked_img, recon_img


def render_reconstruction(
    model: CroboModel, pair: ViewPair, mask: MaskSet, out_path: Path | str
) -> np.ndarray:
    """Write a 4-panel PNG: source view | masked target | reconstruction | target."""
    masked_img, recon_img = compose_reconstruction(model, pair, mask)
    panels = [np.clip(pair.source, 0, 1), masked_img, recon_img, np.clip(pair.target, 0, 1)]
    gutter = 2
    s = pair.source.shape[0]
    canvas = np.ones((s, 4 * s + 3 * gutter, 3), dtype=np.float32)
    for i, panel in enumerate(panels):
        x = i * (s + gutter)
        canvas[:, x : x + s] = panel
    _save_frame_png(canvas, Path(out_path))
    return canvas


def masked_psnr(model: CroboModel, pairs_and_masks: list[tuple[ViewPair, MaskSet]]) -> float:
    """PSNR (dB, max=1) over masked patches only, in de-normalized pixel space,
    pooled across all given pairs; predictions are clipped to [0, 1]."""
    if not pairs_and_masks:
        raise InputError("no pairs given")
    sq_sum = 0.0
    count = 0
    p = model.cfg.patch_size
    for pair, mask in pairs_and_masks:
        pred = np.clip(predict_target_patches(model, pair, mask), 0.0, 1.0)
        truth = patchify(pair.target, p).patches.astype(np.float64)
        diff = pred[mask.masked] - truth[mask.masked]
        sq_sum += float((diff**2).sum())
        count += diff.size
    mse = sq_sum / max(count, 1)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)
