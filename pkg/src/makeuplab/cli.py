"""Command-line entry point for the full pipeline.

One executable, one subcommand per pipeline stage.  Exit codes: 0 success,
1 usage error, 2 runtime error.  Every random choice in a subcommand flows
from its single ``--seed`` flag.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__

logger = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse reports usage problems with exit code 2; this CLI uses 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_threads() -> int:
    return os.cpu_count() or 1


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="makeuplab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
        p.add_argument(
            "--threads",
            type=int,
            default=_default_threads(),
            help="worker threads; 1 forces the serial deterministic path",
        )
        p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
        return p

    p = add("gen-data", "sample materials, render on portraits, write a crop dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, default=2000, help="number of records")
    p.add_argument("--target", choices=["lips", "eyes"], default="lips")
    p.add_argument("--crop-size", type=int, default=64)
    p.add_argument("--expansion", type=float, default=0.4)
    p.add_argument("--feather", type=float, default=2.0)
    p.add_argument("--portraits", help="directory of <name>.png + <name>.json portrait pairs")
    p.add_argument("--synthetic", type=int, default=20, help="size of the generated portrait corpus when --portraits is not given")
    p.add_argument("--portrait-size", type=int, default=256, help="synthetic portrait side length")
    p.add_argument("--presets", help="preset file to fit the sampling distribution from")
    p.add_argument("--dist", help="existing distribution file (overrides --presets)")
    p.add_argument("--uniform-weight", type=float, default=0.5)
    p.add_argument("--split", type=float, help="also write manifest_train/manifest_eval at this train fraction")

    p = add("train", "train the inverse regressor on a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest", help="explicit validation manifest")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--epochs", type=int, default=60)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--val-fraction", type=float, default=0.15)
    p.add_argument("--log", help="write per-epoch train_loss/val_mae rows to this file")

    p = add("estimate", "estimate material parameters from one reference image")
    p.add_argument("--model", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--target", choices=["lips", "eyes"], default="lips")
    p.add_argument("--out", help="write the parameter document here instead of stdout")

    p = add("render", "render makeup parameters onto one image")
    p.add_argument("--image", required=True)
    p.add_argument("--geometry", required=True)
    p.add_argument("--params", required=True, help="parameter document (JSON)")
    p.add_argument("--target", choices=["lips", "eyes"], default="lips")
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--feather", type=float, default=2.0)
    p.add_argument("--out", required=True, help="output PNG")

    p = add("render-video", "render a frame directory with shared parameters")
    p.add_argument("--frames", required=True, help="directory of numbered source PNGs")
    p.add_argument("--geometry", required=True, help="per-frame geometry container JSON")
    p.add_argument("--params", required=True)
    p.add_argument("--target", choices=["lips", "eyes"], default="lips")
    p.add_argument("--intensity", type=float, default=1.0)
    p.add_argument("--feather", type=float, default=2.0)
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval-triplets", "score makeup transfer against ground-truth triplets")
    p.add_argument("--triplets", required=True, help="triplet list file")
    p.add_argument("--model", required=True)
    p.add_argument("--target", choices=["lips", "eyes"], default="lips")
    p.add_argument("--out", help="write the per-instance report CSV here")

    p = add("eval-recovery", "parameter-recovery MAE and round-trip L1 on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--round-trip-limit", type=int)
    p.add_argument("--out", help="write the report CSV here")

    p = add("oracle", "derivative-free parameter recovery for one target image")
    p.add_argument("--image", required=True, help="bare source image")
    p.add_argument("--geometry", required=True)
    p.add_argument("--target-image", required=True, help="image rendered with unknown parameters")
    p.add_argument("--target", choices=["lips", "eyes"], default="lips")
    p.add_argument("--method", choices=["nelder_mead", "coordinate_search"], default="nelder_mead")
    p.add_argument("--max-evals", type=int, default=2000)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("profile", "per-stage render timing with warmup")
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--measured", type=int, default=500)
    p.add_argument("--corpus", type=int, default=8, help="distinct synthetic frames to cycle")
    p.add_argument("--params", help="parameter document; defaults to a glossy preset")
    p.add_argument("--json", help="also write the machine-readable report here")

    p = add("serve", "HTTP service exposing estimate and render")
    p.add_argument("--model", required=True)
    p.add_argument("--bind", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8008)
    p.add_argument("--static", help="static bundle directory served at /")
    p.add_argument("--max-inflight", type=int, default=8)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _dispatch(args)
    except BrokenPipeError:
        return 2
    except Exception as exc:  # runtime errors exit 2 with a one-line message
        logger.debug("unhandled error", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


def _dispatch(args: argparse.Namespace) -> int:
    handler = {
        "gen-data": _cmd_gen_data,
        "train": _cmd_train,
        "estimate": _cmd_estimate,
        "render": _cmd_render,
        "render-video": _cmd_render_video,
        "eval-triplets": _cmd_eval_triplets,
        "eval-recovery": _cmd_eval_recovery,
        "oracle": _cmd_oracle,
        "profile": _cmd_profile,
        "serve": _cmd_serve,
    }[args.command]
    return handler(args)


def _load_portrait_corpus(args) -> list:
    from .portraits import load_portrait_dir, synthetic_corpus

    if args.portraits:
        return load_portrait_dir(args.portraits)
    return synthetic_corpus(
        args.synthetic, seed=args.seed, width=args.portrait_size, height=args.portrait_size
    )


def _cmd_gen_data(args) -> int:
    from .datagen import generate_dataset, save_manifest, split_dataset, verify_manifest
    from .geometry import Target
    from .params import (
        BUNDLED_PRESETS,
        fit_expert_distribution,
        load_distribution,
        load_presets,
    )

    if args.dist:
        dist = load_distribution(args.dist)
    else:
        presets = load_presets(args.presets) if args.presets else list(BUNDLED_PRESETS)
        dist = fit_expert_distribution(presets, uniform_weight=args.uniform_weight)
    portraits = _load_portrait_corpus(args)
    manifest = generate_dataset(
        out_dir=args.out,
        portraits=portraits,
        dist=dist,
        n=args.n,
        target=Target(args.target),
        crop_size=args.crop_size,
        seed=args.seed,
        expansion=args.expansion,
        feather_sigma=args.feather,
        threads=args.threads,
    )
    verify_manifest(manifest, sample=10, seed=args.seed)
    if args.split is not None:
        train_part, eval_part = split_dataset(manifest, args.split, seed=args.seed)
        save_manifest(train_part, Path(args.out) / "manifest_train.json")
        save_manifest(eval_part, Path(args.out) / "manifest_eval.json")
    logger.info("wrote %d records to %s", manifest.count, args.out)
    return 0


def _cmd_train(args) -> int:
    from .datagen import load_manifest
    from .encoder import TrainConfig, init_model, save_model, train, write_train_log

    train_manifest = load_manifest(args.manifest)
    val_manifest = load_manifest(args.val_manifest) if args.val_manifest else None
    config = TrainConfig(
        learning_rate=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        optimizer=args.optimizer,
        validation_fraction=args.val_fraction,
    )
    model = init_model(
        config={"input_size": train_manifest.crop_size}, seed=args.seed
    )
    best, log = train(model, train_manifest, val_manifest, config)
    save_model(best, args.out)
    if args.log:
        write_train_log(log, args.log)
    final = log[-1]
    logger.info(
        "trained %d epochs: final train_loss=%.5f best val_mae=%.5f -> %s",
        len(log),
        final.train_loss,
        min(row.val_mae for row in log),
        args.out,
    )
    return 0


def _cmd_estimate(args) -> int:
    from .encoder import estimate, load_model
    from .geometry import Target, load_geometry
    from .image import load_png
    from .params import params_to_json

    model = load_model(args.model)
    params = estimate(
        model, load_png(args.image), load_geometry(args.geometry), Target(args.target)
    )
    doc = params_to_json(params)
    if args.out:
        Path(args.out).write_text(doc)
    else:
        sys.stdout.write(doc)
    return 0


def _cmd_render(args) -> int:
    from .geometry import Target, load_geometry
    from .image import load_png, save_png
    from .params import load_params
    from .renderer import RenderRequest, render

    out = render(
        RenderRequest(
            source=load_png(args.image),
            geometry=load_geometry(args.geometry),
            params=load_params(args.params),
            target=Target(args.target),
            user_intensity=args.intensity,
            feather_sigma=args.feather,
        )
    )
    save_png(out, args.out)
    return 0


def _cmd_render_video(args) -> int:
    from .geometry import Target, load_geometry_sequence
    from .image import load_png, save_png
    from .params import load_params
    from .renderer import render_sequence

    frame_paths = sorted(Path(args.frames).glob("*.png"))
    if not frame_paths:
        raise FileNotFoundError(f"no PNG frames in {args.frames}")
    geometries = load_geometry_sequence(args.geometry)
    if len(geometries) == 1:
        geometries = geometries * len(frame_paths)
    if len(geometries) != len(frame_paths):
        raise ValueError(
            f"{len(frame_paths)} frames but {len(geometries)} geometry documents"
        )
    frames = [(load_png(p), g) for p, g in zip(frame_paths, geometries)]
    outputs = render_sequence(
        frames,
        load_params(args.params),
        Target(args.target),
        args.intensity,
        args.feather,
        threads=args.threads,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for path, image in zip(frame_paths, outputs):
        save_png(image, out_dir / path.name)
    logger.info("rendered %d frames to %s", len(outputs), out_dir)
    return 0


def _cmd_eval_triplets(args) -> int:
    from .encoder import load_model
    from .geometry import Target
    from .metrics import evaluate_triplets, load_triplets, write_eval_report

    report = evaluate_triplets(
        load_triplets(args.triplets), load_model(args.model), Target(args.target)
    )
    if args.out:
        write_eval_report(report, args.out)
    print(
        f"l1={report.mean_l1:.6f} one_minus_msssim={report.mean_one_minus_msssim:.6f} "
        f"evaluated={report.evaluated} failed={report.failed}"
    )
    return 0


def _cmd_eval_recovery(args) -> int:
    from .datagen import load_manifest
    from .encoder import load_model
    from .metrics import evaluate_recovery, write_recovery_report

    report = evaluate_recovery(
        load_manifest(args.manifest),
        load_model(args.model),
        round_trip_limit=args.round_trip_limit,
    )
    if args.out:
        write_recovery_report(report, args.out)
    print(json.dumps(report.as_dict(), indent=2))
    return 0


def _cmd_oracle(args) -> int:
    from .geometry import Target, load_geometry
    from .image import load_png
    from .oracle import SearchConfig, oracle_estimate

    result = oracle_estimate(
        source=load_png(args.image),
        geometry=load_geometry(args.geometry),
        target_image=load_png(args.target_image),
        target=Target(args.target),
        config=SearchConfig(
            method=args.method,
            max_evaluations=args.max_evals,
            tolerance=args.tolerance,
            seed=args.seed,
        ),
    )
    print(
        json.dumps(
            {
                "params": result.params.to_json_dict(),
                "residual": result.residual,
                "evaluations": result.evaluations,
                "converged": result.converged,
                "unidentifiable": list(result.unidentifiable),
            },
            indent=2,
        )
    )
    return 0


def _cmd_profile(args) -> int:
    from .params import GraphicsParams, load_params
    from .portraits import synthetic_corpus
    from .renderer import profile

    params = (
        load_params(args.params)
        if args.params
        else GraphicsParams(0.8, 196, 32, 48, 0.8, 0.3, 0.5)
    )
    corpus = synthetic_corpus(args.corpus, seed=args.seed, width=args.width, height=args.height)
    frames = [(p.image, p.geometry) for p in corpus]
    report = profile(frames, params, warmup=args.warmup, measured=args.measured)
    sys.stdout.write(report.as_text())
    if args.json:
        Path(args.json).write_text(json.dumps(report.as_dict(), indent=2) + "\n")
    return 0


def _cmd_serve(args) -> int:
    from .service import serve

    serve(
        model_path=args.model,
        bind=args.bind,
        port=args.port,
        static_dir=args.static,
        max_inflight=args.max_inflight,
    )
    return 0
