import numpy as np
import pytest

from conftest import make_mask
from maskprior.errors import MaskPriorError
from maskprior.prior_assembly import PriorMask
from maskprior.synth import WarmupFixtureSpec, generate_warmup_frames
from maskprior.warmup import (
    ResidualFrame,
    WarmupState,
    effective_mask,
    image_loss,
    update_mask_model,
)


def flat_frame(residual_value, size=48):
    gt = np.full((size, size, 3), 0.4)
    render = np.clip(gt + residual_value, 0.0, 1.0)
    return ResidualFrame.from_images(render, gt)


# ------------------------------------------------------------- image_loss


def test_image_loss_zero_for_identical_images():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(24, 24, 3))
    mask = rng.uniform(size=(24, 24)) > 0.5
    assert image_loss(img, img, mask) == pytest.approx(0.0, abs=1e-12)


def test_image_loss_zero_mask_kills_l1_term():
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(24, 24, 3))
    b = rng.uniform(size=(24, 24, 3))
    mask = np.zeros((24, 24), dtype=bool)
    # masked-out images are identical (all zeros): SSIM term also vanishes
    assert image_loss(a, b, mask) == pytest.approx(0.0, abs=1e-12)


def _oracle_ssim(a, b):
    """Independent SSIM: explicit Gaussian window, direct 2D convolution."""
    sigma, truncate = 1.5, 5.0 / 1.5
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1)
    k1 = np.exp(-0.5 * (x / sigma) ** 2)
    k1 = k1 / k1.sum()
    kernel = np.outer(k1, k1)

    def conv(img):
        padded = np.pad(img, radius, mode="symmetric")
        out = np.zeros_like(img)
        H, W = img.shape
        for i in range(H):
            for j in range(W):
                out[i, j] = (padded[i : i + 2 * radius + 1, j : j + 2 * radius + 1] * kernel).sum()
        return out

    C1, C2 = 0.01**2, 0.03**2
    vals = []
    for ch in range(a.shape[2]):
        xch, ych = a[:, :, ch], b[:, :, ch]
        mx, my = conv(xch), conv(ych)
        sxx = conv(xch * xch) - mx * mx
        syy = conv(ych * ych) - my * my
        sxy = conv(xch * ych) - mx * my
        ssim_map = ((2 * mx * my + C1) * (2 * sxy + C2)) / (
            (mx**2 + my**2 + C1) * (sxx + syy + C2)
        )
        vals.append(ssim_map.mean())
    return float(np.mean(vals))


def test_image_loss_all_ones_mask_matches_pixel_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(20, 20, 3))
    b = rng.uniform(size=(20, 20, 3))
    mask = np.ones((20, 20), dtype=bool)
    got = image_loss(a, b, mask)
    l1 = 0.0
    for i in range(20):
        for j in range(20):
            for ch in range(3):
                l1 += abs(a[i, j, ch] - b[i, j, ch])
    l1 /= 20 * 20 * 3
    oracle = 0.8 * l1 + 0.2 * (1.0 - _oracle_ssim(a, b))
    assert got == pytest.approx(oracle, abs=1e-7)


def test_image_loss_shape_mismatch():
    with pytest.raises(MaskPriorError):
        image_loss(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((5, 5)))


# ------------------------------------------------------- update_mask_model


def test_uniform_residuals_converge_all_inlier():
    frame = flat_frame(0.05)
    state = None
    for _ in range(200):
        state = update_mask_model(state, frame)
    assert state.M_hat.mean() > 0.9


def test_bimodal_residuals_separate():
    # background 0.01, distractor block 0.5, as a synthetic separable fixture
    gt = np.full((48, 48, 3), 0.4)
    render = gt + 0.01
    render[8:24, 8:24] = gt[8:24, 8:24] + 0.5
    frame = ResidualFrame.from_images(np.clip(render, 0, 1), gt)
    block = np.zeros((48, 48), dtype=bool)
    block[8:24, 8:24] = True
    state = None
    for _ in range(200):
        state = update_mask_model(state, frame)
    assert state.M_hat[block].mean() < state.M_hat[~block].mean()
    assert state.M_hat[block].mean() < 0.3
    assert state.M_hat[~block].mean() > 0.7


def test_zero_reg_high_residuals_collapse():
    frame = flat_frame(0.6)
    state = None
    for _ in range(200):
        state = update_mask_model(state, frame, reg_weight=0.0)
    assert state.M_hat.mean() < 0.1


def test_update_loss_is_exactly_the_two_declared_terms():
    frame = flat_frame(0.2)
    reg = 0.1
    state = update_mask_model(None, frame, reg_weight=reg)
    # with zero initial weights M_hat is 0.5 everywhere before the step
    m0 = np.full_like(frame.residual, 0.5)
    expected = (m0 * frame.residual).mean() + reg * (1.0 - m0).mean()
    assert state.losses[0] == pytest.approx(expected, abs=1e-12)


def test_update_rejects_non_finite_residuals():
    frame = flat_frame(0.1)
    bad = ResidualFrame(
        render=frame.render,
        ground_truth=frame.ground_truth,
        residual=frame.residual * np.nan,
        blurred_residual=frame.blurred_residual,
    )
    with pytest.raises(MaskPriorError):
        update_mask_model(None, bad)


def test_update_does_not_mutate_inputs():
    frame = flat_frame(0.3)
    before = frame.residual.copy()
    update_mask_model(None, frame)
    assert np.array_equal(frame.residual, before)


# ---------------------------------------------------------- effective_mask


def _state(iteration, m_hat):
    return WarmupState(
        iteration=iteration,
        model_weights=np.zeros(3),
        M_hat=m_hat,
        losses=(0.0, 0.0),
    )


def test_warmup_phase_returns_prior_bit_exact():
    rng = np.random.default_rng(0)
    static = rng.uniform(size=(32, 32)) > 0.3
    prior = PriorMask(view=0, static_map=static, per_entity={})
    m_hat = rng.uniform(size=(32, 32))
    for iteration in (1, 250, 500):
        out = effective_mask(_state(iteration, m_hat), prior, (), warmup_iters=500)
        assert np.array_equal(out, static)


def test_after_warmup_snaps_to_entity_majority():
    m_hat = np.zeros((32, 32))
    m_hat[:, 16:] = 1.0  # right half inliers
    entity = make_mask(32, 1, (slice(0, 32), slice(8, 28)))  # majority inlier (12 of 20 cols)
    out = effective_mask(_state(501, m_hat), None, (entity,), warmup_iters=500)
    assert out[entity.pixels].all()
    assert not out[:, :8].any()
    assert out[:, 28:].all()


def test_after_warmup_uniform_one_gives_all_ones():
    out = effective_mask(_state(501, np.ones((16, 16))), None, (), warmup_iters=500)
    assert out.all()


def test_warmup_missing_prior_raises():
    with pytest.raises(MaskPriorError, match="prior"):
        effective_mask(_state(10, np.ones((8, 8))), None, (), warmup_iters=500)


def test_effective_mask_idempotent_and_deterministic():
    rng = np.random.default_rng(4)
    m_hat = rng.uniform(size=(32, 32))
    entity = make_mask(32, 2, (slice(4, 20), slice(4, 20)))
    a = effective_mask(_state(777, m_hat), None, (entity,))
    b = effective_mask(_state(777, m_hat), None, (entity,))
    assert np.array_equal(a, b)


# -------------------------------------------------------------- fixtures


def test_warmup_fixture_residual_separation():
    frames, distractor = generate_warmup_frames(WarmupFixtureSpec(seed=1))
    frame = ResidualFrame.from_images(*frames[0])
    bg_median = np.median(frame.residual[~distractor])
    assert (frame.residual[distractor] > 10 * bg_median).all()


def test_warmup_fixture_zero_area_render_equals_gt():
    spec = WarmupFixtureSpec(seed=2, distractor_size=(0, 0), background_noise=0.0)
    frames, distractor = generate_warmup_frames(spec)
    assert not distractor.any()
    for render, gt in frames:
        assert np.array_equal(render, gt)


def test_warmup_fixture_seeded_reproducibility(tmp_path):
    a, _ = generate_warmup_frames(WarmupFixtureSpec(seed=9), out_dir=tmp_path / "a")
    b, _ = generate_warmup_frames(WarmupFixtureSpec(seed=9), out_dir=tmp_path / "b")
    for (ra, ga), (rb, gb) in zip(a, b):
        assert np.array_equal(ra, rb) and np.array_equal(ga, gb)
    files_a = sorted((tmp_path / "a").iterdir())
    files_b = sorted((tmp_path / "b").iterdir())
    for fa, fb in zip(files_a, files_b):
        assert fa.read_bytes() == fb.read_bytes()
