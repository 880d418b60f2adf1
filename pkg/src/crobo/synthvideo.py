"""Deterministic sprite-video generation with exact ground truth.

Clips are short sequences of RGB frames showing colored sprites (circles,
squares, triangles) drifting over a light-gray background with a dark floor
band near the bottom. The floor band is a fixed asymmetric landmark so that
the vertical position of a crop is inferable from its content. Sprites move
with constant velocity and bounce elastically off the frame borders.

Rendering is pure integer rasterization on a uint8 canvas (round-half-up
center rounding, no anti-aliasing), so frames are bit-reproducible across
platforms and survive a PNG round trip unchanged. Per-frame sprite metadata
is retained as ground truth for probing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DatasetWriteError, InputError

SHAPES = ("circle", "square", "triangle")

# Discrete sprite colors (uint8) so that color is a categorical ground-truth
# attribute; sprites never blend with the background or the floor band.
PALETTE: dict[str, tuple[int, int, int]] = {
    "red": (230, 40, 40),
    "green": (40, 200, 60),
    "blue": (50, 70, 230),
    "yellow": (240, 210, 40),
    "magenta": (220, 50, 200),
    "cyan": (40, 200, 220),
}
PALETTE_NAMES = tuple(PALETTE)

# neutral grays: constant-color patches then normalize to exactly zero targets
BACKGROUND_RGB = (204, 204, 204)
FLOOR_RGB = (70, 70, 70)
FLOOR_FRACTION = 0.8  # rows below this fraction of the height are floor


def round_half_up(x: float) -> int:
    """Round to nearest integer with .5 always going up (platform-stable)."""
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class SpriteSpec:
    """One sprite's state at a single frame."""

    shape_kind: str
    color: tuple[float, float, float]  # RGB in [0, 1]
    radius_px: int
    position: tuple[float, float]  # (x, y) in pixels, float
    velocity: tuple[float, float]  # (vx, vy) in pixels/frame

    def to_json(self) -> dict:
        return {
            "shape": self.shape_kind,
            "color": list(self.color),
            "radius": self.radius_px,
            "pos": list(self.position),
            "vel": list(self.velocity),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SpriteSpec":
        return cls(
            shape_kind=d["shape"],
            color=tuple(d["color"]),
            radius_px=int(d["radius"]),
            position=tuple(d["pos"]),
            velocity=tuple(d["vel"]),
        )


@dataclass(frozen=True)
class ClipConfig:
    frame_size: int = 64
    n_frames: int = 30
    n_sprites_range: tuple[int, int] = (2, 4)
    velocity_range: tuple[float, float] = (0.5, 2.0)  # per-component speed
    radius_range: tuple[int, int] | None = None  # default derived from frame_size
    fps_equivalent: int = 10

    def validate(self) -> None:
        if self.frame_size < 32:
            raise ConfigError(f"frame_size must be >= 32, got {self.frame_size}")
        if self.n_frames < 3:
            raise ConfigError(f"n_frames must be >= 3, got {self.n_frames}")
        lo, hi = self.n_sprites_range
        if not (1 <= lo <= hi <= 8):
            raise ConfigError(f"n_sprites_range must lie within [1, 8], got {self.n_sprites_range}")
        vlo, vhi = self.velocity_range
        if not (0 <= vlo <= vhi) or vhi >= self.frame_size / 4:
            raise ConfigError(f"velocity_range invalid for frame_size {self.frame_size}: {self.velocity_range}")
        rlo, rhi = self.radii()
        if not (2 <= rlo <= rhi <= self.frame_size // 4):
            raise ConfigError(f"radius_range must lie within [2, frame_size/4], got {(rlo, rhi)}")

    def radii(self) -> tuple[int, int]:
        if self.radius_range is not None:
            return self.radius_range
        return (3, max(3, self.frame_size // 8))

    def to_json(self) -> dict:
        return {
            "frame_size": self.frame_size,
            "n_frames": self.n_frames,
            "n_sprites_range": list(self.n_sprites_range),
            "velocity_range": list(self.velocity_range),
            "radius_range": list(self.radii()),
            "fps_equivalent": self.fps_equivalent,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ClipConfig":
        return cls(
            frame_size=int(d["frame_size"]),
            n_frames=int(d["n_frames"]),
            n_sprites_range=tuple(d["n_sprites_range"]),
            velocity_range=tuple(d["velocity_range"]),
            radius_range=tuple(d["radius_range"]) if d.get("radius_range") else None,
            fps_equivalent=int(d.get("fps_equivalent", 10)),
        )


@dataclass(eq=False)
class ClipFrames:
    """Rendered frames plus the exact sprite states that produced them."""

    frames: list[np.ndarray]  # each HxWx3 float32 in [0, 1], values on the /255 grid
    metadata: list[list[SpriteSpec]]
    seed: int
    cfg: ClipConfig
    clip_id: str = ""
    fps_equivalent: int = field(default=10)

    def __post_init__(self) -> None:
        if len(self.metadata) != len(self.frames):
            raise InputError("metadata length must equal frame count")


def render_frame(sprites: list[SpriteSpec], frame_size: int) -> np.ndarray:
    """Rasterize sprites over the fixed background; later sprites occlude earlier.

    Hard edges, integer-only coverage tests; out-of-bound sprites are clipped
    at raster time. Returns float32 HxWx3 in [0, 1] with values on the k/255 grid.
    """
    s = int(frame_size)
    canvas = np.empty((s, s, 3), dtype=np.uint8)
    canvas[:, :, :] = np.array(BACKGROUND_RGB, dtype=np.uint8)
    floor_y = int(FLOOR_FRACTION * s)
    canvas[floor_y:, :, :] = np.array(FLOOR_RGB, dtype=np.uint8)

    yy, xx = np.mgrid[0:s, 0:s]
    for sp in sprites:
        cx = round_half_up(sp.position[0])
        cy = round_half_up(sp.position[1])
        r = int(sp.radius_px)
        dx = xx - cx
        dy = yy - cy
        if sp.shape_kind == "circle":
            mask = dx * dx + dy * dy <= r * r
        elif sp.shape_kind == "square":
            mask = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        elif sp.shape_kind == "triangle":
            # apex up at (cx, cy - r), base at dy = r; half-width grows linearly
            mask = (dy >= -r) & (dy <= r) & (2 * np.abs(dx) <= dy + r)
        else:
            raise InputError(f"unknown shape kind {sp.shape_kind!r}")
        color_u8 = np.array([round_half_up(c * 255.0) for c in sp.color], dtype=np.uint8)
        canvas[mask] = color_u8
    return canvas.astype(np.float32) / np.float32(255.0)


def _reflect(pos: float, lo: float, hi: float, vel: float) -> tuple[float, float]:
    """Elastic bounce of one coordinate into [lo, hi]; speed magnitude preserved."""
    p = pos + vel
    while p < lo or p > hi:
        if p < lo:
            p = 2.0 * lo - p
            vel = -vel
        elif p > hi:
            p = 2.0 * hi - p
            vel = -vel
    return p, vel


def step_sprite(sp: SpriteSpec, frame_size: int) -> SpriteSpec:
    """Advance one sprite by one frame under constant velocity + border bounce."""
    lo = float(sp.radius_px)
    hi = float(frame_size - 1 - sp.radius_px)
    x, vx = _reflect(sp.position[0], lo, hi, sp.velocity[0])
    y, vy = _reflect(sp.position[1], lo, hi, sp.velocity[1])
    return SpriteSpec(sp.shape_kind, sp.color, sp.radius_px, (x, y), (vx, vy))


def _init_sprites(rng: np.random.Generator, cfg: ClipConfig) -> list[SpriteSpec]:
    n = int(rng.integers(cfg.n_sprites_range[0], cfg.n_sprites_range[1] + 1))
    rlo, rhi = cfg.radii()
    vlo, vhi = cfg.velocity_range
    sprites = []
    for _ in range(n):
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        cname = PALETTE_NAMES[int(rng.integers(0, len(PALETTE_NAMES)))]
        color = tuple(c / 255.0 for c in PALETTE[cname])
        r = int(rng.integers(rlo, rhi + 1))
        lo, hi = float(r), float(cfg.frame_size - 1 - r)
        pos = (float(rng.uniform(lo, hi)), float(rng.uniform(lo, hi)))
        vel = tuple(
            float(rng.uniform(vlo, vhi)) * (1.0 if rng.random() < 0.5 else -1.0)
            for _ in range(2)
        )
        sprites.append(SpriteSpec(shape, color, r, pos, vel))
    return sprites


def generate_clip(seed: int, cfg: ClipConfig, clip_id: str = "") -> ClipFrames:
    """Simulate and render one clip; a pure function of (seed, cfg)."""
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    sprites = _init_sprites(rng, cfg)
    frames: list[np.ndarray] = []
    metadata: list[list[SpriteSpec]] = []
    for _ in range(cfg.n_frames):
        metadata.append(list(sprites))
        frames.append(render_frame(sprites, cfg.frame_size))
        sprites = [step_sprite(sp, cfg.frame_size) for sp in sprites]
    return ClipFrames(
        frames=frames,
        metadata=metadata,
        seed=int(seed),
        cfg=cfg,
        clip_id=clip_id or f"clip_seed{seed}",
        fps_equivalent=cfg.fps_equivalent,
    )


def frame_to_png_bytes(frame: np.ndarray) -> bytes:
    import io

    u8 = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(u8, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def _save_frame_png(frame: np.ndarray, path: Path) -> None:
    u8 = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def _load_frame_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        u8 = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return u8.astype(np.float32) / np.float32(255.0)


def write_dataset(clips: list[ClipFrames], out_dir: Path | str) -> dict:
    """Write clips as PNG frames + metadata.json each, plus a top-level manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, clip in enumerate(clips):
            name = f"clip_{i:04d}"
            cdir = out / name
            cdir.mkdir(exist_ok=True)
            for t, frame in enumerate(clip.frames):
                _save_frame_png(frame, cdir / f"frame_{t:04d}.png")
            meta = {
                "seed": clip.seed,
                "cfg": clip.cfg.to_json(),
                "frames": [[sp.to_json() for sp in frame_meta] for frame_meta in clip.metadata],
            }
            (cdir / "metadata.json").write_text(json.dumps(meta))
            entries.append({"dir": name, "seed": clip.seed, "n_frames": len(clip.frames)})
        manifest = {"clips": entries}
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as e:
        raise DatasetWriteError(f"failed writing dataset under {out}: {e}") from e
    return manifest


def read_clip(clip_dir: Path | str, clip_id: str = "") -> ClipFrames:
    cdir = Path(clip_dir)
    meta = json.loads((cdir / "metadata.json").read_text())
    cfg = ClipConfig.from_json(meta["cfg"])
    metadata = [[SpriteSpec.from_json(d) for d in frame_meta] for frame_meta in meta["frames"]]
    frames = [
        _load_frame_png(cdir / f"frame_{t:04d}.png") for t in range(len(metadata))
    ]
    return ClipFrames(
        frames=frames,
        metadata=metadata,
        seed=int(meta["seed"]),
        cfg=cfg,
        clip_id=clip_id or cdir.name,
        fps_equivalent=cfg.fps_equivalent,
    )


def read_dataset(data_dir: Path | str) -> list[ClipFrames]:
    root = Path(data_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"no manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    return [read_clip(root / e["dir"], clip_id=e["dir"]) for e in manifest["clips"]]


def clips_equal(a: ClipFrames, b: ClipFrames) -> bool:
    """Bit-exact equality of frames and metadata (used by round-trip tests)."""
    if len(a.frames) != len(b.frames) or a.seed != b.seed:
        return False
    if any(not np.array_equal(fa, fb) for fa, fb in zip(a.frames, b.frames)):
        return False
    return a.metadata == b.metadata
