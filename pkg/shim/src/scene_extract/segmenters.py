"""Entity-mask sources.

The real pipeline runs an entity-level segmenter offline; ``MaskDirSegmenter``
consumes its per-image PNG output. ``GridSegmenter`` is a trivial stand-in
for smoke tests without a segmenter. Masks within a view are made pairwise
disjoint before writing (overlaps go to the smaller mask), matching the
scene-format contract so downstream loads are warning-free.
"""

import re
from pathlib import Path

import numpy as np
from PIL import Image


def resolve_overlaps(masks: dict[int, np.ndarray]) -> dict[int, np.ndarray]:
    """Assign overlapping pixels to the smaller mask; drop emptied masks."""
    order = sorted(masks, key=lambda eid: (int(masks[eid].sum()), eid))
    claimed = None
    out = {}
    for entity_id in order:
        pixels = masks[entity_id].astype(bool)
        if claimed is None:
            claimed = np.zeros_like(pixels)
        pixels = pixels & ~claimed
        if not pixels.any():
            continue
        claimed |= pixels
        out[entity_id] = pixels
    return dict(sorted(out.items()))


class MaskDirSegmenter:
    """Reads precomputed masks named ``<image_stem>_<entity>.png``."""

    def __init__(self, mask_dir: str | Path):
        self.mask_dir = Path(mask_dir)
        if not self.mask_dir.is_dir():
            raise FileNotFoundError(f"mask directory missing: {self.mask_dir}")

    def masks_for(self, image_path: Path, image: np.ndarray) -> dict[int, np.ndarray]:
        pattern = re.compile(rf"^{re.escape(image_path.stem)}_(\d+)\.png$")
        found = {}
        for path in sorted(self.mask_dir.iterdir()):
            match = pattern.match(path.name)
            if not match:
                continue
            arr = np.asarray(Image.open(path).convert("L")) > 0
            if arr.shape != image.shape[:2]:
                raise ValueError(
                    f"mask {path.name} is {arr.shape}, image is {image.shape[:2]}"
                )
            if arr.any():
                found[int(match.group(1))] = arr
        return resolve_overlaps(found)


class GridSegmenter:
    """Splits each image into an n x n grid of block entities."""

    def __init__(self, n: int = 2):
        self.n = n

    def masks_for(self, image_path: Path, image: np.ndarray) -> dict[int, np.ndarray]:
        H, W = image.shape[:2]
        masks = {}
        entity_id = 1
        for r in range(self.n):
            for c in range(self.n):
                pixels = np.zeros((H, W), dtype=bool)
                pixels[
                    r * H // self.n : (r + 1) * H // self.n,
                    c * W // self.n : (c + 1) * W // self.n,
                ] = True
                masks[entity_id] = pixels
                entity_id += 1
        return masks
