"""Command-line entry points.

Sub-commands: ``run`` (full pipeline), ``synth`` (fixture generator),
``eval`` (metrics/report), ``warmup-sim`` (mask-model training loop on a
directory of render/ground-truth pairs), ``sample-views`` (co-visibility
clustering). Config precedence is flags > config file > defaults; the
effective config is echoed into the run manifest.

Exit codes: 0 ok, 2 validation, 3 attention missing, 4 VLM, 5 load/IO.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import PipelineConfig, load_config
from .errors import (
    AttentionUnavailableError,
    MaskPriorError,
    SceneLoadError,
    SceneValidationError,
    VlmError,
    VlmParseError,
)

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_ATTENTION = 3
EXIT_VLM = 4
EXIT_IO = 5


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, AttentionUnavailableError):
        return EXIT_ATTENTION
    if isinstance(exc, (VlmError, VlmParseError)):
        return EXIT_VLM
    if isinstance(exc, SceneLoadError):
        return EXIT_IO
    if isinstance(exc, (SceneValidationError, MaskPriorError, ValueError)):
        return EXIT_VALIDATION
    if isinstance(exc, OSError):
        return EXIT_IO
    raise exc


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--recall-threshold", type=float, dest="recall_threshold")
    parser.add_argument("--cd-threshold", type=float, dest="cd_threshold")
    parser.add_argument("--score-frac", type=float, dest="score_frac")
    parser.add_argument("--min-region-pixels", type=int, dest="min_region_pixels")
    parser.add_argument("--warmup-iters", type=int, dest="warmup_iters")
    parser.add_argument("--occupancy-frac", type=float, dest="occupancy_frac")
    parser.add_argument("--max-query-tokens", type=int, dest="max_query_tokens")
    parser.add_argument("--point-stride", type=int, dest="point_stride")
    parser.add_argument("--jobs", type=int, dest="jobs")
    parser.add_argument("--seed", type=int, dest="seed")
    parser.add_argument("--vlm", choices=["off", "http"], dest="vlm_mode")
    parser.add_argument("--vlm-url", dest="vlm_url")
    parser.add_argument("--vlm-model", dest="vlm_model")
    parser.add_argument("--vlm-timeout", type=float, dest="vlm_timeout")


def _config_from_args(args: argparse.Namespace) -> PipelineConfig:
    overrides = {
        key: getattr(args, key, None)
        for key in (
            "recall_threshold",
            "cd_threshold",
            "score_frac",
            "min_region_pixels",
            "warmup_iters",
            "occupancy_frac",
            "max_query_tokens",
            "point_stride",
            "jobs",
            "seed",
            "vlm_mode",
            "vlm_url",
            "vlm_model",
            "vlm_timeout",
        )
    }
    return load_config(getattr(args, "config", None), overrides)


def _cmd_run(args: argparse.Namespace) -> int:
    from .pipeline import run_pipeline

    config = _config_from_args(args)
    manifest = run_pipeline(args.scene, args.out, config)
    n_static = sum(1 for c in manifest["classifications"].values() if c == "static")
    print(
        f"run complete: {manifest['n_views']} views, "
        f"{len(manifest['classifications'])} entities ({n_static} static), "
        f"{manifest['points_kept']}/{manifest['points_total']} points kept"
    )
    return 0


def _cmd_synth(args: argparse.Namespace) -> int:
    from .synth import SynthSpec, generate

    if args.spec:
        with open(args.spec, "r", encoding="utf-8") as fh:
            spec = SynthSpec.from_dict(json.load(fh))
    else:
        spec = SynthSpec(
            seed=args.seed,
            num_views=args.views,
            num_entities=args.entities,
            num_transients=args.transients,
            noise=args.noise,
        )
    result = generate(spec, out_dir=args.out)
    print(f"scene written to {args.out}: {result.bundle.N} views, "
          f"{len(result.scene.entities)} entities")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from .evaluation import render_csv, render_table, report
    from .prior_assembly import EntityDecision, PriorMask
    from .scene_io import load_prior_mask_images, load_scene

    scene = load_scene(args.scene)
    static_maps = load_prior_mask_images(args.priors)
    priors = [
        PriorMask(view=i, static_map=static_maps[i], per_entity={
            m.entity_id: EntityDecision("unknown", 0.0, [])
            for m in scene.views[i].entity_masks
        })
        for i in range(scene.N)
    ]
    gt_masks = None
    if args.gt_masks:
        gt_masks = {}
        for i in range(scene.N):
            path = Path(args.gt_masks) / f"{i:04d}.png"
            if path.is_file():
                gt_masks[i] = np.asarray(Image.open(path)) > 0
    rep = report(scene_name=Path(args.scene).name, priors=priors, gt_transient_masks=gt_masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(render_csv(rep), encoding="utf-8")
    table = render_table(rep)
    (out / "report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def _cmd_warmup_sim(args: argparse.Namespace) -> int:
    from .prior_assembly import PriorMask
    from .scene_io import EntityMask
    from .warmup import ResidualFrame, step_warmup

    frames_dir = Path(args.frames)
    renders = sorted(frames_dir.glob("render_*.png"))
    if not renders:
        raise SceneLoadError(f"no render_*.png frames in {frames_dir}")
    pairs = []
    for render_path in renders:
        gt_path = frames_dir / render_path.name.replace("render_", "gt_")
        if not gt_path.is_file():
            raise SceneLoadError(f"missing ground truth for {render_path.name}")
        pairs.append(
            (np.asarray(Image.open(render_path)), np.asarray(Image.open(gt_path)))
        )

    prior_path = Path(args.prior) if args.prior else frames_dir / "prior.png"
    if prior_path.is_file():
        static_map = np.asarray(Image.open(prior_path)) > 0
    else:
        static_map = np.ones(pairs[0][0].shape[:2], dtype=bool)
    prior = PriorMask(view=0, static_map=static_map, per_entity={})

    entity_masks = ()
    if args.entities:
        masks = []
        for path in sorted(Path(args.entities).glob("*.png")):
            pixels = np.asarray(Image.open(path)) > 0
            masks.append(EntityMask(int(path.stem), pixels, int(pixels.sum())))
        entity_masks = tuple(masks)

    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    state = None
    rows = []
    for iteration in range(1, args.iters + 1):
        render, gt = pairs[(iteration - 1) % len(pairs)]
        frame = ResidualFrame.from_images(render, gt)
        state = step_warmup(
            state, frame, prior, entity_masks, args.warmup_iters,
            args.reg_weight, args.lr,
        )
        rows.append(
            [
                iteration,
                (iteration - 1) % len(pairs),
                f"{state.losses[0]:.6f}",
                f"{state.losses[1]:.6f}",
                f"{state.M_hat.mean():.6f}",
            ]
        )
        if iteration % args.mask_every == 0 or iteration == args.iters:
            Image.fromarray(state.M_effective.astype(np.uint8) * 255).save(
                out / "masks" / f"iter_{iteration:06d}.png", format="PNG"
            )
    with open(out / "losses.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["iteration", "frame", "mask_model_loss", "masked_image_loss", "mean_m_hat"]
        )
        writer.writerows(rows)
    print(f"warm-up simulation complete: {args.iters} iterations, "
          f"final mean inlier probability {state.M_hat.mean():.3f}")
    return 0


def _cmd_sample_views(args: argparse.Namespace) -> int:
    from .geometry import sample_view_cluster
    from .scene_io import load_scene

    scene = load_scene(args.scene)
    selected, exhausted = sample_view_cluster(
        scene, args.k, args.seed, min_covisible=args.min_covisible
    )
    result = {"selected": selected, "exhausted": exhausted}
    print(json.dumps(result))
    if args.out:
        Path(args.out).write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskprior",
        description="Static-mask priors for distractor-free sparse-view 3DGS",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full pipeline on a scene directory")
    p_run.add_argument("--scene", required=True, type=Path)
    p_run.add_argument("--out", required=True, type=Path)
    _add_config_flags(p_run)
    p_run.set_defaults(func=_cmd_run)

    p_synth = sub.add_parser("synth", help="generate a synthetic oracle scene")
    p_synth.add_argument("--spec", type=Path, help="SynthSpec JSON")
    p_synth.add_argument("--out", required=True, type=Path)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--views", type=int, default=4)
    p_synth.add_argument("--entities", type=int, default=6)
    p_synth.add_argument("--transients", type=int, default=1)
    p_synth.add_argument("--noise", type=float, default=0.0)
    p_synth.set_defaults(func=_cmd_synth)

    p_eval = sub.add_parser("eval", help="evaluate saved priors against ground truth")
    p_eval.add_argument("--scene", required=True, type=Path)
    p_eval.add_argument("--priors", required=True, type=Path)
    p_eval.add_argument("--out", required=True, type=Path)
    p_eval.add_argument("--gt-masks", type=Path, dest="gt_masks")
    p_eval.set_defaults(func=_cmd_eval)

    p_warm = sub.add_parser("warmup-sim", help="simulate the warm-up mask schedule")
    p_warm.add_argument("--frames", required=True, type=Path)
    p_warm.add_argument("--out", required=True, type=Path)
    p_warm.add_argument("--iters", type=int, default=700)
    p_warm.add_argument("--warmup-iters", type=int, default=500, dest="warmup_iters")
    p_warm.add_argument("--reg-weight", type=float, default=0.1, dest="reg_weight")
    p_warm.add_argument("--lr", type=float, default=20.0)
    p_warm.add_argument("--prior", type=Path)
    p_warm.add_argument("--entities", type=Path)
    p_warm.add_argument("--mask-every", type=int, default=1, dest="mask_every")
    p_warm.set_defaults(func=_cmd_warmup_sim)

    p_sample = sub.add_parser("sample-views", help="co-visibility view clustering")
    p_sample.add_argument("--scene", required=True, type=Path)
    p_sample.add_argument("--k", required=True, type=int)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--min-covisible", type=int, default=20, dest="min_covisible")
    p_sample.add_argument("--out", type=Path)
    p_sample.set_defaults(func=_cmd_sample_views)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single funnel to exit codes
        stage = getattr(exc, "pipeline_stage", None)
        tag = f" [stage: {stage}]" if stage else ""
        print(f"error{tag}: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
