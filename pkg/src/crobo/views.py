"""Source/target view construction: crops, resize, flip, patches, masks.

A pair consists of a *source* view (a large random crop of a frame, resized
to a square) and a *target* view. Three target constructions are supported:

- ``crop``: the target is a smaller crop sampled inside the resized source
  view, so the source strictly contains everything the target shows.
- ``time``: the target is an independent large crop of a later frame.
- ``timecrop``: the target is a smaller crop inside a later frame's large crop.

Horizontal flipping uses one shared coin per pair and is applied to both
resized views (or neither), after crop and resize, so containment holds up
to mirror. All randomness flows through an explicit numpy Generator, making
every pair a pure function of (seed, config).

Resize uses a fixed separable Catmull-Rom kernel (a = -0.5) with clamped
borders, implemented here so outputs do not depend on any image library's
kernel choices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .synthvideo import ClipFrames

PARENT_FRAME = "frame"
PARENT_GLOBAL_VIEW = "global_view"

VARIANT_CROP = "crop"
VARIANT_TIME = "time"
VARIANT_TIMECROP = "timecrop"
VARIANTS = (VARIANT_CROP, VARIANT_TIME, VARIANT_TIMECROP)

ASPECT_RANGE = (0.75, 4.0 / 3.0)


@dataclass(frozen=True)
class CropGeometry:
    """An axis-aligned crop box in its parent image's pixel grid."""

    x0: int
    y0: int
    w: int
    h: int
    parent: str = PARENT_FRAME

    def validate(self, parent_w: int, parent_h: int) -> None:
        if self.x0 < 0 or self.y0 < 0 or self.w < 1 or self.h < 1:
            raise InputError(f"degenerate crop {self}")
        if self.x0 + self.w > parent_w or self.y0 + self.h > parent_h:
            raise InputError(f"crop {self} exceeds parent {parent_w}x{parent_h}")
        # exact rational check of 3/4 <= w/h <= 4/3, except the full-parent fallback
        if (self.w, self.h) != (parent_w, parent_h):
            if 4 * self.w < 3 * self.h or 3 * self.w > 4 * self.h:
                raise InputError(f"crop aspect {self.w}/{self.h} outside [3/4, 4/3]")

    def slice_from(self, img: np.ndarray) -> np.ndarray:
        return img[self.y0 : self.y0 + self.h, self.x0 : self.x0 + self.w]

    def to_json(self) -> dict:
        return {"x0": self.x0, "y0": self.y0, "w": self.w, "h": self.h, "parent": self.parent}


@dataclass(frozen=True)
class ViewConfig:
    view_size: int = 64
    patch_size: int = 8
    global_scale: tuple[float, float] = (0.5, 1.0)
    local_scale: tuple[float, float] = (0.3, 0.6)
    aspect: tuple[float, float] = ASPECT_RANGE
    mask_ratio: float = 0.9
    variant: str = VARIANT_CROP
    time_gap: tuple[int, int] = (4, 48)
    flip_prob: float = 0.5

    def validate(self) -> None:
        if self.view_size % self.patch_size != 0:
            raise InputError(f"view_size {self.view_size} not divisible by patch_size {self.patch_size}")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise InputError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if self.variant not in VARIANTS:
            raise InputError(f"unknown variant {self.variant!r}")
        if self.time_gap[0] < 1 or self.time_gap[0] > self.time_gap[1]:
            raise InputError(f"invalid time_gap {self.time_gap}")

    @property
    def grid_side(self) -> int:
        return self.view_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid_side**2

    def to_json(self) -> dict:
        return {
            "view_size": self.view_size,
            "patch_size": self.patch_size,
            "global_scale": list(self.global_scale),
            "local_scale": list(self.local_scale),
            "aspect": list(self.aspect),
            "mask_ratio": self.mask_ratio,
            "variant": self.variant,
            "time_gap": list(self.time_gap),
            "flip_prob": self.flip_prob,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ViewConfig":
        base = cls()
        return cls(
            view_size=int(d.get("view_size", base.view_size)),
            patch_size=int(d.get("patch_size", base.patch_size)),
            global_scale=tuple(d.get("global_scale", base.global_scale)),
            local_scale=tuple(d.get("local_scale", base.local_scale)),
            aspect=tuple(d.get("aspect", base.aspect)),
            mask_ratio=float(d.get("mask_ratio", base.mask_ratio)),
            variant=str(d.get("variant", base.variant)),
            time_gap=tuple(d.get("time_gap", base.time_gap)),
            flip_prob=float(d.get("flip_prob", base.flip_prob)),
        )


@dataclass(eq=False)
class ViewPair:
    source: np.ndarray  # view_size x view_size x 3 float32
    target: np.ndarray
    source_geom: CropGeometry
    target_geom: CropGeometry
    flip: bool
    variant: str
    frame_index_source: int
    frame_index_target: int


@dataclass(eq=False)
class PatchGrid:
    patches: np.ndarray  # (N, P*P*3), row-major patch order
    grid_side: int
    patch_size: int


@dataclass(eq=False)
class MaskSet:
    masked: np.ndarray  # sorted int64 indices
    visible: np.ndarray
    ratio: float


@dataclass(eq=False)
class TargetPatches:
    normalized: np.ndarray  # (N, L)
    mean: np.ndarray  # (N,)
    std: np.ndarray  # (N,), sqrt(population variance + eps)


# ---------------------------------------------------------------------------
# resize


def _catmull_rom(t: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5 evaluated at |t|."""
    t = np.abs(t)
    out = np.zeros_like(t)
    near = t <= 1.0
    far = (t > 1.0) & (t < 2.0)
    out[near] = (1.5 * t[near] - 2.5) * t[near] ** 2 + 1.0
    out[far] = ((-0.5 * t[far] + 2.5) * t[far] - 4.0) * t[far] + 2.0
    return out


def _resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) interpolation matrix; border taps clamp to the edge."""
    scale = n_in / n_out
    x = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    base = np.floor(x).astype(np.int64)
    taps = base[:, None] + np.arange(-1, 3)[None, :]  # (n_out, 4)
    w = _catmull_rom(x[:, None] - taps)
    taps = np.clip(taps, 0, n_in - 1)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.repeat(np.arange(n_out), 4)
    np.add.at(mat, (rows, taps.ravel()), w.ravel())
    return mat


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable Catmull-Rom resize of an HxWxC image; identity when sizes match."""
    h, w = img.shape[:2]
    arr = img.astype(np.float64, copy=False)
    if h != out_h:
        arr = np.tensordot(_resize_weights(h, out_h), arr, axes=(1, 0))
    if w != out_w:
        arr = np.tensordot(_resize_weights(w, out_w), arr, axes=(1, 1)).transpose(1, 0, 2)
    return np.ascontiguousarray(arr, dtype=np.float32)


def hflip(img: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(img[:, ::-1])


# ---------------------------------------------------------------------------
# crop sampling


def _sample_crop(
    parent_w: int,
    parent_h: int,
    scale: tuple[float, float],
    aspect: tuple[float, float],
    rng: np.random.Generator,
    parent: str,
    tries: int = 10,
) -> CropGeometry | None:
    """Rejection-sample a crop whose rounded box still meets the area and
    aspect bounds exactly; None after `tries` failures."""
    area = parent_w * parent_h
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(tries):
        frac = rng.uniform(scale[0], scale[1])
        ar = math.exp(rng.uniform(log_lo, log_hi))
        target_area = frac * area
        w = round_int(math.sqrt(target_area * ar))
        h = round_int(math.sqrt(target_area / ar))
        if w < 1 or h < 1 or w > parent_w or h > parent_h:
            continue
        if 4 * w < 3 * h or 3 * w > 4 * h:
            continue
        if not (scale[0] * area <= w * h <= scale[1] * area):
            continue
        x0 = int(rng.integers(0, parent_w - w + 1))
        y0 = int(rng.integers(0, parent_h - h + 1))
        return CropGeometry(x0, y0, w, h, parent)
    return None


def round_int(x: float) -> int:
    return int(math.floor(x + 0.5))


def sample_global_crop(
    frame_w: int,
    frame_h: int,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.5, 1.0),
    aspect: tuple[float, float] = ASPECT_RANGE,
) -> CropGeometry:
    """Large crop of a frame; falls back to the full frame after 10 rejections."""
    geom = _sample_crop(frame_w, frame_h, scale, aspect, rng, PARENT_FRAME)
    if geom is None:
        geom = CropGeometry(0, 0, frame_w, frame_h, PARENT_FRAME)
    return geom


def sample_local_crop(
    view_w: int,
    view_h: int,
    rng: np.random.Generator,
    scale: tuple[float, float] = (0.3, 0.6),
    aspect: tuple[float, float] = ASPECT_RANGE,
) -> CropGeometry:
    """Small crop inside a resized larger view.

    The fallback after 10 rejections is a centered square at the midpoint of
    the scale range (the full view would violate the area bound, so it is
    clamped down to a box that always satisfies both bounds).
    """
    geom = _sample_crop(view_w, view_h, scale, aspect, rng, PARENT_GLOBAL_VIEW)
    if geom is None:
        mid = math.sqrt(0.5 * (scale[0] + scale[1]))
        side = max(1, round_int(min(view_w, view_h) * mid))
        geom = CropGeometry((view_w - side) // 2, (view_h - side) // 2, side, side, PARENT_GLOBAL_VIEW)
    return geom


# ---------------------------------------------------------------------------
# pair construction


def _draw_gap(rng: np.random.Generator, t: int, n_frames: int, gap: tuple[int, int]) -> int:
    hi = min(gap[1], n_frames - 1 - t)
    if hi < gap[0]:
        raise InputError(
            f"clip too short for time variant at t={t}: need t+{gap[0]} <= {n_frames - 1}"
        )
    return int(rng.integers(gap[0], hi + 1))


def make_view_pair(
    clip: ClipFrames,
    t: int,
    variant: str,
    rng: np.random.Generator,
    cfg: ViewConfig,
    flip: bool | None = None,
) -> ViewPair:
    """Build one (source, target) pair from frame t of a clip.

    Draw order is fixed: source geometry, then (for time variants) the frame
    gap and target geometry, then the shared flip coin. Passing ``flip``
    skips the coin without consuming other draws, which lets tests compare a
    forced-flip pair against its unflipped twin from the same stream.
    """
    cfg.validate()
    if not (0 <= t < len(clip.frames)):
        raise InputError(f"frame index {t} outside clip of length {len(clip.frames)}")
    frame = clip.frames[t]
    fh, fw = frame.shape[:2]
    if min(fh, fw) < 2 * cfg.patch_size:
        raise InputError(f"frame {fw}x{fh} too small for patch size {cfg.patch_size}")
    s = cfg.view_size

    src_geom = sample_global_crop(fw, fh, rng, cfg.global_scale, cfg.aspect)
    source = resize_bicubic(src_geom.slice_from(frame), s, s)

    if variant == VARIANT_CROP:
        t_target = t
        tgt_geom = sample_local_crop(s, s, rng, cfg.local_scale, cfg.aspect)
        target = resize_bicubic(tgt_geom.slice_from(source), s, s)
    elif variant == VARIANT_TIME:
        k = _draw_gap(rng, t, len(clip.frames), cfg.time_gap)
        t_target = t + k
        tgt_geom = sample_global_crop(fw, fh, rng, cfg.global_scale, cfg.aspect)
        target = resize_bicubic(tgt_geom.slice_from(clip.frames[t_target]), s, s)
    elif variant == VARIANT_TIMECROP:
        k = _draw_gap(rng, t, len(clip.frames), cfg.time_gap)
        t_target = t + k
        future_global = sample_global_crop(fw, fh, rng, cfg.global_scale, cfg.aspect)
        future_view = resize_bicubic(future_global.slice_from(clip.frames[t_target]), s, s)
        tgt_geom = sample_local_crop(s, s, rng, cfg.local_scale, cfg.aspect)
        target = resize_bicubic(tgt_geom.slice_from(future_view), s, s)
    else:
        raise InputError(f"unknown variant {variant!r}")

    if flip is None:
        flip = bool(rng.random() < cfg.flip_prob)
    if flip:
        source = hflip(source)
        target = hflip(target)

    return ViewPair(
        source=source,
        target=target,
        source_geom=src_geom,
        target_geom=tgt_geom,
        flip=flip,
        variant=variant,
        frame_index_source=t,
        frame_index_target=t_target,
    )


# ---------------------------------------------------------------------------
# patches, masks, targets


def patchify(view: np.ndarray, patch_size: int) -> PatchGrid:
    """Split a square SxSx3 view into non-overlapping patches, row-major."""
    s = view.shape[0]
    if view.ndim != 3 or view.shape[1] != s:
        raise InputError(f"expected square HxWx3 view, got shape {view.shape}")
    if s % patch_size != 0:
        raise InputError(f"view side {s} not divisible by patch size {patch_size}")
    gs = s // patch_size
    p = patch_size
    patches = (
        view.reshape(gs, p, gs, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gs * gs, p * p * 3)
    )
    return PatchGrid(patches=np.ascontiguousarray(patches), grid_side=gs, patch_size=p)


def unpatchify(grid: PatchGrid) -> np.ndarray:
    gs, p = grid.grid_side, grid.patch_size
    view = (
        grid.patches.reshape(gs, gs, p, p, 3)
        .transpose(0, 2, 1, 3, 4)
        .reshape(gs * p, gs * p, 3)
    )
    return np.ascontiguousarray(view)


def batch_patchify(views: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, S, S, 3) -> (B, N, P*P*3) with the same row-major layout as patchify."""
    b, s = views.shape[0], views.shape[1]
    gs, p = s // patch_size, patch_size
    return np.ascontiguousarray(
        views.reshape(b, gs, p, gs, p, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, gs * gs, p * p * 3)
    )


def mirror_index(i: int, grid_side: int) -> int:
    """Patch index after horizontally mirroring the view."""
    row, col = divmod(i, grid_side)
    return row * grid_side + (grid_side - 1 - col)


def mirror_patch(vec: np.ndarray, patch_size: int) -> np.ndarray:
    """Horizontally mirror one flattened patch vector."""
    p = patch_size
    return np.ascontiguousarray(vec.reshape(p, p, 3)[:, ::-1, :]).reshape(-1)


def sample_mask(n: int, ratio: float, rng: np.random.Generator) -> MaskSet:
    """Uniform mask of exactly floor(ratio * n) patch indices."""
    if not (0.0 <= ratio < 1.0):
        raise InputError(f"mask ratio must be in [0, 1), got {ratio}")
    m = int(math.floor(ratio * n))
    perm = rng.permutation(n)
    masked = np.sort(perm[:m]).astype(np.int64)
    visible = np.sort(perm[m:]).astype(np.int64)
    return MaskSet(masked=masked, visible=visible, ratio=float(ratio))


def normalize_targets(grid: PatchGrid, eps: float = 1e-6) -> TargetPatches:
    """Standardize each patch to zero mean / unit variance (population, +eps guard).

    Constant patches map to all-zero vectors; the stored (mean, std) pair
    inverts the mapping for rendering.
    """
    x = grid.patches.astype(np.float64)
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    std = np.sqrt(var + eps)
    normalized = (x - mean[:, None]) / std[:, None]
    return TargetPatches(
        normalized=normalized.astype(np.float32),
        mean=mean.astype(np.float32),
        std=std.astype(np.float32),
    )


def denormalize_patches(normalized: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return normalized * std[:, None] + mean[:, None]


def dump_pair(pair: ViewPair, out_dir: Path | str, name: str) -> None:
    """Debug dump: geometries as JSON plus PNGs of both views."""
    from .synthvideo import _save_frame_png  # lazy: PIL only needed here

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    info = {
        "variant": pair.variant,
        "flip": pair.flip,
        "frame_index_source": pair.frame_index_source,
        "frame_index_target": pair.frame_index_target,
        "source_geom": pair.source_geom.to_json(),
        "target_geom": pair.target_geom.to_json(),
    }
    (out / f"{name}.json").write_text(json.dumps(info, indent=2))
    _save_frame_png(np.clip(pair.source, 0.0, 1.0), out / f"{name}_source.png")
    _save_frame_png(np.clip(pair.target, 0.0, 1.0), out / f"{name}_target.png")
