"""Extraction orchestration: images -> model forward with attention taps ->
scene directory.

Attention rows are dumped only for mask-occupied query tokens (size
O(S * L * h * w) per ordered pair) unless ``attention="full"`` requests
whole-grid dumps, which the matching pipeline needs for reverse lookups at
desk scale. For memory-constrained runs, ``per_pair_forward=True`` re-runs
the forward per ordered pair instead of keeping all layers resident.
"""

import logging
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .hooks import AttentionTap, pair_rows
from .writer import SceneWriter

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def occupied_tokens(mask: np.ndarray, patch_size: int, occupancy_frac: float = 0.5):
    """Grid tokens at least half covered by the mask, any-pixel fallback.

    Mirrors the consumer's token-selection contract so per-mask dumps line
    up with the rows the pipeline will request.
    """
    H, W = mask.shape
    h, w = H // patch_size, W // patch_size
    counts = mask.reshape(h, patch_size, w, patch_size).sum(axis=(1, 3))
    selected = counts >= occupancy_frac * patch_size * patch_size
    if not selected.any() and mask.any():
        selected = counts > 0
    return [(int(r), int(c)) for r, c in np.argwhere(selected)]


def parse_pairs(spec: str, n_views: int) -> list[tuple[int, int]]:
    """Parse ``all`` or an explicit ``0-1,1-0,...`` ordered-pair list."""
    if spec == "all":
        return [(i, j) for i in range(n_views) for j in range(n_views) if i != j]
    pairs = []
    for chunk in spec.split(","):
        try:
            a, b = (int(v) for v in chunk.split("-"))
        except ValueError as exc:
            raise ValueError(f"bad pair {chunk!r}; expected like 0-1") from exc
        if not (0 <= a < n_views and 0 <= b < n_views) or a == b:
            raise ValueError(f"pair {chunk!r} out of range for {n_views} views")
        pairs.append((a, b))
    return pairs


def load_images(image_dir: str | Path) -> tuple[list[Path], np.ndarray]:
    image_dir = Path(image_dir)
    paths = sorted(
        p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not paths:
        raise FileNotFoundError(f"no images in {image_dir}")
    arrays = []
    for path in paths:
        arr = np.asarray(Image.open(path).convert("RGB"))
        arrays.append(arr)
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ValueError(f"views differ in resolution: {sorted(shapes)}")
    return paths, np.stack(arrays)


def extract_scene(
    image_dir: str | Path,
    out_dir: str | Path,
    backend,
    segmenter,
    pairs: str = "all",
    attention: str = "full",
    per_pair_forward: bool = False,
) -> Path:
    """Run the backend and segmenter over a capture and write the scene.

    ``attention`` is "full" (whole-grid rows per ordered pair) or "masks"
    (rows restricted to each query mask's occupied tokens).
    """
    paths, images = load_images(image_dir)
    n, H, W = images.shape[:3]
    patch = backend.patch_size
    if H % patch or W % patch:
        raise ValueError(f"image size {H}x{W} not a multiple of patch size {patch}")
    h, w = H // patch, W // patch

    logger.info("running backend over %d views", n)
    tap = AttentionTap(backend.softmax_modules())
    with tap:
        outputs = backend.forward(images)
        layers = list(tap.layers)
    if not layers:
        raise RuntimeError("attention tap captured nothing; wrong hook modules?")

    masks_per_view = []
    for path, image in zip(paths, images):
        masks = segmenter.masks_for(path, image)
        if not masks:
            logger.warning("no entity masks for %s", path.name)
        masks_per_view.append(masks)

    writer = SceneWriter(out_dir, patch_size=patch, image_size=(H, W))
    for v in range(n):
        point_map = None if outputs.point_maps is None else outputs.point_maps[v]
        writer.add_view(
            image=images[v],
            intrinsics=outputs.intrinsics[v],
            extrinsics=outputs.extrinsics[v],
            depth=outputs.depths[v],
            masks=masks_per_view[v],
            point_map=point_map,
        )

    ordered = parse_pairs(pairs, n)
    for i, j in ordered:
        if per_pair_forward:
            tap.reset()
            with AttentionTap(backend.softmax_modules()) as pair_tap:
                backend.forward(images)
                layers = list(pair_tap.layers)
        if attention == "full":
            rows = list(range(h * w))
            tensor = pair_rows(layers, i, j, h * w, rows, (h, w))
            writer.add_attention(i, j, None, tensor, None, backend.feature_dim)
        else:
            for entity_id, mask in sorted(masks_per_view[i].items()):
                tokens = occupied_tokens(mask, patch)
                if not tokens:
                    continue
                flat = [r * w + c for r, c in tokens]
                tensor = pair_rows(layers, i, j, h * w, flat, (h, w))
                writer.add_attention(i, j, entity_id, tensor, tokens, backend.feature_dim)

    manifest = writer.finish(
        extra={
            "tool": "scene-extract",
            "tool_version": __version__,
            "backend": type(backend).__name__,
            "attention_mode": attention,
            "images": [p.name for p in paths],
        }
    )
    logger.info("scene written to %s", out_dir)
    return manifest
