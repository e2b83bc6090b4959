"""Mapping between pixel-space entity masks and the patch-token grid."""

from dataclasses import dataclass

import numpy as np

from .errors import SceneValidationError
from .scene_io import EntityMask


@dataclass(frozen=True)
class TokenSet:
    """Deduplicated (row, col) grid indices of one view's query tokens."""

    view: int
    grid_indices: tuple[tuple[int, int], ...]
    patch_size: int
    grid_shape: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid_shape
        for r, c in self.grid_indices:
            if not (0 <= r < h and 0 <= c < w):
                raise SceneValidationError(f"token ({r},{c}) outside {h}x{w} grid")

    def __len__(self) -> int:
        return len(self.grid_indices)

    def __contains__(self, index: tuple[int, int]) -> bool:
        return tuple(index) in self._index_set

    @property
    def _index_set(self) -> frozenset:
        # cached lazily on the instance despite frozen dataclass
        cached = self.__dict__.get("_cached_set")
        if cached is None:
            cached = frozenset(self.grid_indices)
            self.__dict__["_cached_set"] = cached
        return cached


def tokens_for_mask(
    mask: EntityMask,
    patch_size: int,
    occupancy_frac: float = 0.5,
    view: int = 0,
) -> TokenSet:
    """Select the grid tokens occupied by a mask.

    A token is included iff its patch has at least ``occupancy_frac`` of its
    pixels masked. If that leaves nothing but the mask is non-empty, falls
    back to any-pixel inclusion so small entities still get query tokens.
    """
    if not 0.0 < occupancy_frac <= 1.0:
        raise SceneValidationError(f"occupancy_frac must be in (0, 1], got {occupancy_frac}")
    H, W = mask.pixels.shape
    if H % patch_size or W % patch_size:
        raise SceneValidationError(
            f"mask {H}x{W} not divisible by patch_size {patch_size}"
        )
    h, w = H // patch_size, W // patch_size
    counts = (
        mask.pixels.reshape(h, patch_size, w, patch_size)
        .sum(axis=(1, 3))
        .astype(np.int64)
    )
    threshold = occupancy_frac * patch_size * patch_size
    selected = counts >= threshold
    if not selected.any() and mask.pixels.any():
        selected = counts > 0
    indices = tuple(
        (int(r), int(c)) for r, c in np.argwhere(selected)
    )
    return TokenSet(view=view, grid_indices=indices, patch_size=patch_size, grid_shape=(h, w))


def mask_for_tokens(tokens: TokenSet) -> np.ndarray:
    """Union of the tokens' patch rectangles as an H x W binary map."""
    h, w = tokens.grid_shape
    p = tokens.patch_size
    out = np.zeros((h * p, w * p), dtype=bool)
    for r, c in tokens.grid_indices:
        out[r * p : (r + 1) * p, c * p : (c + 1) * p] = True
    return out


def subsample_tokens(tokens: TokenSet, max_count: int) -> TokenSet:
    """Cap a token set by uniform stride over its row-major ordering."""
    if max_count < 1:
        raise SceneValidationError("max_count must be >= 1")
    if len(tokens) <= max_count:
        return tokens
    ordered = sorted(tokens.grid_indices)
    picks = np.linspace(0, len(ordered) - 1, max_count).round().astype(int)
    kept = tuple(ordered[i] for i in sorted(set(int(i) for i in picks)))
    return TokenSet(
        view=tokens.view,
        grid_indices=kept,
        patch_size=tokens.patch_size,
        grid_shape=tokens.grid_shape,
    )
