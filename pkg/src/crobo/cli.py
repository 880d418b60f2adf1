"""Command-line entry point.

Subcommands: generate-data, pretrain, reconstruct, straightness, probe,
ablate. Configuration resolves as defaults < --config file < explicit flags.
Every run writes a run_manifest.json next to its outputs with the resolved
config, the seed, timestamps, and sha256 hashes of the emitted artifacts.

Setting CROBO_DETERMINISTIC=1 is equivalent to passing --deterministic:
wall-clock columns are zeroed so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__
from .errors import CroboError
from .seeding import derive_seed, spawn_rng

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    """Bad invocation (missing config file, malformed flag values): exit 1."""


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _iter_output_files(paths: list[Path]) -> list[Path]:
    files = []
    for p in paths:
        if p.is_dir():
            files.extend(sorted(q for q in p.rglob("*") if q.is_file() and q.name != "run_manifest.json"))
        elif p.is_file():
            files.append(p)
    return files


def write_run_manifest(
    out_dir: Path, command: str, config: dict, seed: int, started: float, outputs: list[Path]
) -> Path:
    """Atomically write run_manifest.json describing a completed run."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "started_at": started,
        "finished_at": time.time(),
        "outputs": [
            {"path": str(f), "sha256": _sha256(f)} for f in _iter_output_files(outputs)
        ],
    }
    path = out_dir / "run_manifest.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(path)
    return path


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise _UsageError(f"config file not found: {p}")
    return json.loads(p.read_text())


def _deterministic(args) -> bool:
    return bool(getattr(args, "deterministic", False)) or os.environ.get(
        "CROBO_DETERMINISTIC", ""
    ) == "1"


# ---------------------------------------------------------------------------
# subcommands


def _cmd_generate_data(args) -> int:
    from .synthvideo import ClipConfig, generate_clip, write_dataset

    started = time.time()
    file_cfg = _load_config_file(args.config)
    cfg = ClipConfig(
        frame_size=args.size if args.size is not None else file_cfg.get("frame_size", 64),
        n_frames=args.frames if args.frames is not None else file_cfg.get("n_frames", 30),
        n_sprites_range=tuple(file_cfg.get("n_sprites_range", (2, 4))),
        velocity_range=tuple(file_cfg.get("velocity_range", (0.5, 2.0))),
    )
    seed = args.seed if args.seed is not None else file_cfg.get("seed", 0)
    n_clips = args.clips if args.clips is not None else file_cfg.get("clips", 8)
    clips = [generate_clip(derive_seed(seed, "clip", i), cfg) for i in range(n_clips)]
    out = Path(args.out)
    write_dataset(clips, out)
    write_run_manifest(out, "generate-data", {"cfg": cfg.to_json(), "clips": n_clips}, seed, started, [out])
    print(f"wrote {n_clips} clips ({cfg.n_frames} frames, {cfg.frame_size}px) to {out}")
    return EXIT_OK


def _run_config_from_args(args) -> "RunConfig":
    from .trainer import RunConfig

    run = RunConfig.from_json(_load_config_file(args.config))
    overrides = {}
    for key in ("data_dir", "out_dir", "batch_size", "epochs", "mask_ratio", "variant", "seed", "base_lr"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if _deterministic(args):
        overrides["deterministic"] = True
    return replace(run, **overrides) if overrides else run


def _cmd_pretrain(args) -> int:
    from .trainer import train

    started = time.time()
    run = _run_config_from_args(args)
    result = train(run, resume=args.resume)
    out = Path(run.out_dir)
    write_run_manifest(out, "pretrain", run.to_json(), run.seed, started, [out])
    print(
        f"trained {result.steps} steps: loss {result.initial_loss:.4f} -> {result.final_loss:.4f}; "
        f"checkpoint at {result.checkpoint_dir}"
    )
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    from .analysis import render_reconstruction
    from .checkpoint import load_checkpoint
    from .synthvideo import read_dataset
    from .views import ViewConfig, make_view_pair, sample_mask

    started = time.time()
    model, _, _, _ = load_checkpoint(args.ckpt)
    clips = read_dataset(args.data)
    vcfg = ViewConfig(
        view_size=model.cfg.view_size,
        patch_size=model.cfg.patch_size,
        mask_ratio=args.mask_ratio,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng_master = spawn_rng(args.seed, "reconstruct")
    for i in range(args.n):
        clip = clips[i % len(clips)]
        t = int(rng_master.integers(0, len(clip.frames)))
        rng = spawn_rng(args.seed, "reconstruct-pair", i)
        pair = make_view_pair(clip, t, vcfg.variant, rng, vcfg)
        mask = sample_mask(vcfg.n_patches, vcfg.mask_ratio, rng)
        render_reconstruction(model, pair, mask, out / f"recon_{i:03d}.png")
    write_run_manifest(
        out, "reconstruct",
        {"ckpt": str(args.ckpt), "data": str(args.data), "n": args.n, "mask_ratio": args.mask_ratio},
        args.seed, started, [out],
    )
    print(f"wrote {args.n} reconstruction panels to {out}")
    return EXIT_OK


def _cmd_straightness(args) -> int:
    from .analysis import embed_clip, mean_curvature, write_curvature_csv
    from .checkpoint import load_checkpoint
    from .synthvideo import read_dataset

    started = time.time()
    model, _, _, _ = load_checkpoint(args.ckpt)
    clips = read_dataset(args.data)
    trajs = [embed_clip(model, clip) for clip in clips]
    summary = mean_curvature(trajs, first_k_frames=args.first_k)
    out = Path(args.out)
    write_curvature_csv(summary, out)
    write_run_manifest(
        out.parent, "straightness",
        {"ckpt": str(args.ckpt), "data": str(args.data), "first_k": args.first_k},
        0, started, [out],
    )
    print(f"mean curvature over {summary['n_clips']} clips: {summary['mean_deg']:.2f} deg -> {out}")
    return EXIT_OK


def _cmd_probe(args) -> int:
    from .checkpoint import checkpoint_hash, load_checkpoint
    from .probe import build_probe_dataset, eval_probe, fit_mlp_probe, fit_ridge, write_probe_report
    from .synthvideo import read_dataset

    started = time.time()
    model, _, _, _ = load_checkpoint(args.ckpt)
    clips = read_dataset(args.data)
    ds = build_probe_dataset(model, clips, seed=args.seed)
    if args.mlp:
        head = fit_mlp_probe(ds, seed=args.seed)
    else:
        head = fit_ridge(ds, args.ridge_lambda)
    scores = eval_probe(head, ds)
    out = Path(args.out)
    write_probe_report(scores, out, ckpt_hash=checkpoint_hash(args.ckpt))
    write_run_manifest(
        out.parent, "probe",
        {"ckpt": str(args.ckpt), "data": str(args.data), "lambda": args.ridge_lambda, "mlp": args.mlp},
        args.seed, started, [out],
    )
    print(
        f"probe: pos MAE {scores['pos_mae_px']:.2f}px, shape acc {scores['shape_acc']:.2f}, "
        f"color acc {scores['color_acc']:.2f} -> {out}"
    )
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .trainer import run_ablation_matrix

    started = time.time()
    run = _run_config_from_args(args)
    if args.epochs is not None:
        run = replace(run, epochs=args.epochs)
    variants = tuple(args.variants.split(","))
    ratios = tuple(float(r) for r in args.ratios.split(","))
    report = run_ablation_matrix(run, variants=variants, ratios=ratios)
    out = Path(run.out_dir)
    write_run_manifest(out, "ablate", run.to_json(), run.seed, started, [out])
    print(f"ablation over {len(report['cells'])} cells -> {out / 'report.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


def build_parser() -> _Parser:
    parser = _Parser(prog="crobo", description=__doc__.splitlines()[0] if __doc__ else "")
    parser.add_argument("--version", action="version", version=f"crobo {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("generate-data", parents=[], help="render a synthetic sprite-video dataset")
    p.add_argument("--config", default=None, help="JSON config file (flags win)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--clips", type=int, default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("pretrain", help="train the bottleneck reconstruction model")
    p.add_argument("--config", default=None, help="run config JSON (flags win)")
    p.add_argument("--resume", default=None, help="checkpoint directory to resume from")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--data", dest="data_dir", default=None)
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)
    p.add_argument("--variant", choices=("crop", "time", "timecrop"), default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("reconstruct", help="render 4-panel reconstruction images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_reconstruct)

    p = sub.add_parser("straightness", help="trajectory curvature report over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--first-k", dest="first_k", type=int, default=50)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_straightness)

    p = sub.add_parser("probe", help="frozen-encoder ridge probe of sprite attributes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=1e-3)
    p.add_argument("--mlp", action="store_true", help="use the MLP head instead of ridge")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_probe)

    p = sub.add_parser("ablate", help="target-construction x masking-ratio matrix")
    p.add_argument("--config", default=None, help="base run config JSON (flags win)")
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--data", dest="data_dir", default=None)
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variants", default="crop,time,timecrop")
    p.add_argument("--ratios", default="0.75,0.9,0.95")
    p.set_defaults(func=_cmd_ablate)
    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "command", None) is None:
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.func(args)
    except _UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CroboError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
