"""`scene-extract`: dump a capture into the maskprior scene format."""

import argparse
import logging
import sys
from pathlib import Path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scene-extract",
        description="Run the geometry model + segmenter over images and write "
        "a maskprior scene directory",
    )
    parser.add_argument("--images", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--pairs", default="all", help="'all' or e.g. 0-1,1-0")
    parser.add_argument(
        "--attention", choices=["full", "masks"], default="full",
        help="whole-grid rows per pair, or rows restricted to mask tokens",
    )
    parser.add_argument(
        "--backend", choices=["vggt", "mock"], default="vggt",
        help="'mock' runs a tiny deterministic stand-in model",
    )
    parser.add_argument("--weights", default="facebook/VGGT-1B")
    parser.add_argument("--device", default="auto")
    parser.add_argument("--masks", type=Path, help="directory of precomputed entity masks")
    parser.add_argument(
        "--grid-segments", type=int, default=2,
        help="fallback grid segmenter size when --masks is not given",
    )
    parser.add_argument(
        "--per-pair-forward", action="store_true",
        help="re-run the forward per pair (bounded memory, slower)",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    from .extract import extract_scene
    from .segmenters import GridSegmenter, MaskDirSegmenter

    try:
        if args.backend == "mock":
            from .backends import MockGeometryBackend

            backend = MockGeometryBackend()
        else:
            from .backends import VggtBackend

            backend = VggtBackend(weights=args.weights, device=args.device)
        segmenter = (
            MaskDirSegmenter(args.masks) if args.masks else GridSegmenter(args.grid_segments)
        )
        extract_scene(
            args.images,
            args.out,
            backend,
            segmenter,
            pairs=args.pairs,
            attention=args.attention,
            per_pair_forward=args.per_pair_forward,
        )
    except Exception as exc:  # noqa: BLE001 - CLI error funnel
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"scene written to {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
