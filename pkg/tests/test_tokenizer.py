import numpy as np
import pytest

from conftest import make_mask
from maskprior.errors import SceneValidationError
from maskprior.scene_io import EntityMask
from maskprior.tokenizer import mask_for_tokens, subsample_tokens, tokens_for_mask


def test_full_image_mask_yields_all_tokens():
    mask = make_mask(32, 1, (slice(None), slice(None)))
    tokens = tokens_for_mask(mask, 16)
    assert len(tokens) == 4


def test_empty_mask_yields_empty_token_set():
    pixels = np.zeros((32, 32), dtype=bool)
    mask = EntityMask(1, pixels, 0)
    assert len(tokens_for_mask(mask, 16)) == 0


def test_half_covered_patch_at_exact_occupancy():
    # 128 of 256 pixels of patch (0, 0); occupancy 0.5 is inclusive
    mask = make_mask(32, 1, (slice(0, 8), slice(0, 16)))
    assert mask.pixel_count == 128
    tokens = tokens_for_mask(mask, 16, occupancy_frac=0.5)
    assert tokens.grid_indices == ((0, 0),)


def test_below_occupancy_patch_drops_while_another_remains():
    # patch (0,0) fully covered, patch (0,1) at 127 of 256 pixels
    pixels = np.zeros((32, 32), dtype=bool)
    pixels[:16, :16] = True
    pixels[:8, 16:32] = True
    pixels[0, 16] = False
    mask = EntityMask(1, pixels, int(pixels.sum()))
    tokens = tokens_for_mask(mask, 16, occupancy_frac=0.5)
    assert tokens.grid_indices == ((0, 0),)


def test_small_mask_falls_back_to_any_pixel():
    mask = make_mask(32, 1, (slice(0, 2), slice(0, 2)))
    tokens = tokens_for_mask(mask, 16, occupancy_frac=0.5)
    assert tokens.grid_indices == ((0, 0),)


def test_dimension_mismatch_is_error():
    pixels = np.zeros((30, 30), dtype=bool)
    pixels[0, 0] = True
    with pytest.raises(SceneValidationError, match="divisible"):
        tokens_for_mask(EntityMask(1, pixels, 1), 16)


def test_mask_for_tokens_empty_and_single():
    mask = make_mask(32, 1, (slice(0, 2), slice(0, 2)))
    empty = tokens_for_mask(EntityMask(1, np.zeros((32, 32), bool), 0), 16)
    assert not mask_for_tokens(empty).any()
    single = tokens_for_mask(mask, 16)
    out = mask_for_tokens(single)
    assert out[:16, :16].all() and out.sum() == 256


def test_coverage_property_minimum_occupancy():
    rng = np.random.default_rng(11)
    for _ in range(20):
        pixels = rng.uniform(size=(64, 64)) > 0.93
        if not pixels.any():
            continue
        mask = EntityMask(1, pixels, int(pixels.sum()))
        tokens = tokens_for_mask(mask, 16, occupancy_frac=1.0 / 256)
        covered = mask_for_tokens(tokens)
        assert (covered | ~pixels).all()  # every masked pixel covered


def test_monotonicity_raising_occupancy_never_adds_tokens():
    # blob mask large enough that the any-pixel fallback never triggers
    mask = make_mask(64, 1, (slice(3, 52), slice(9, 61)))
    previous = None
    for frac in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
        current = set(tokens_for_mask(mask, 16, occupancy_frac=frac).grid_indices)
        if previous is not None:
            assert current <= previous
        previous = current


def test_subsample_tokens_respects_cap_and_is_deterministic():
    mask = make_mask(64, 1, (slice(None), slice(None)))
    tokens = tokens_for_mask(mask, 16)
    assert len(tokens) == 16
    capped = subsample_tokens(tokens, 5)
    assert len(capped) <= 5
    again = subsample_tokens(tokens, 5)
    assert capped.grid_indices == again.grid_indices
    assert set(capped.grid_indices) <= set(tokens.grid_indices)


def test_token_set_contains():
    mask = make_mask(32, 1, (slice(0, 16), slice(0, 16)))
    tokens = tokens_for_mask(mask, 16)
    assert (0, 0) in tokens
    assert (1, 1) not in tokens
