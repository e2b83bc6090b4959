"""Residual-driven inlier mask model and prior-guided warm-up scheduling.

The mask model is a tiny logistic regression over per-pixel residual
features, trained by its own masked-image loss; during the first
``warmup_iters`` training iterations its output is replaced by the
precomputed static prior. The scene model itself lives in an external
trainer; nothing here touches its parameters.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter

from .errors import MaskPriorError
from .prior_assembly import PriorMask
from .scene_io import EntityMask

DEFAULT_SSIM_WEIGHT = 0.2
DEFAULT_REG_WEIGHT = 0.1
DEFAULT_LEARNING_RATE = 20.0
DEFAULT_BLUR_RADIUS = 8


@dataclass(frozen=True)
class ResidualFrame:
    """A (render, ground truth) pair with its residual features.

    ``residual`` is the per-pixel mean absolute color difference in [0, 1];
    ``blurred_residual`` is its box blur, encoding that distractor pixels
    are spatially correlated.
    """

    render: np.ndarray
    ground_truth: np.ndarray
    residual: np.ndarray
    blurred_residual: np.ndarray

    @classmethod
    def from_images(
        cls, render: np.ndarray, ground_truth: np.ndarray, blur_radius: int = DEFAULT_BLUR_RADIUS
    ) -> "ResidualFrame":
        render = _as_float_image(render)
        ground_truth = _as_float_image(ground_truth)
        if render.shape != ground_truth.shape:
            raise MaskPriorError(
                f"render {render.shape} vs ground truth {ground_truth.shape}"
            )
        residual = np.abs(render - ground_truth).mean(axis=2)
        blurred = uniform_filter(residual, size=2 * blur_radius + 1, mode="nearest")
        return cls(render, ground_truth, residual, blurred)


@dataclass(frozen=True)
class WarmupState:
    """Mask-model weights and outputs after ``iteration`` update steps.

    ``M_effective`` and the masked-image loss are filled by
    :func:`step_warmup`; a bare :func:`update_mask_model` leaves them unset.
    """

    iteration: int
    model_weights: np.ndarray  # (w_residual, w_blurred, bias)
    M_hat: np.ndarray
    losses: tuple[float, float]  # (mask model loss, masked image loss)
    M_effective: np.ndarray | None = None


def _as_float_image(image: np.ndarray) -> np.ndarray:
    if image.ndim != 3 or image.shape[2] != 3:
        raise MaskPriorError(f"expected HxWx3 image, got {image.shape}")
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def _ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM with the standard 11x11 Gaussian window (sigma 1.5)."""
    C1, C2 = 0.01**2, 0.03**2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        blur = lambda img: gaussian_filter(img, sigma=1.5, truncate=(5.0 / 1.5))
        mu_x, mu_y = blur(x), blur(y)
        sxx = blur(x * x) - mu_x * mu_x
        syy = blur(y * y) - mu_y * mu_y
        sxy = blur(x * y) - mu_x * mu_y
        num = (2 * mu_x * mu_y + C1) * (2 * sxy + C2)
        den = (mu_x**2 + mu_y**2 + C1) * (sxx + syy + C2)
        values.append(float((num / den).mean()))
    return float(np.mean(values))


def image_loss(
    render: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray,
    ssim_weight: float = DEFAULT_SSIM_WEIGHT,
) -> float:
    """Masked photometric loss: (1-w) * masked L1 + w * (1 - SSIM of masked images)."""
    render = _as_float_image(render)
    gt = _as_float_image(gt)
    if mask.shape != render.shape[:2]:
        raise MaskPriorError(f"mask {mask.shape} vs image {render.shape[:2]}")
    m = mask.astype(np.float64)[:, :, None]
    l1 = float((m * np.abs(render - gt)).mean())
    ssim = _ssim(m * render, m * gt)
    return (1.0 - ssim_weight) * l1 + ssim_weight * (1.0 - ssim)


def update_mask_model(
    state: WarmupState | None,
    frame: ResidualFrame,
    reg_weight: float = DEFAULT_REG_WEIGHT,
    learning_rate: float = DEFAULT_LEARNING_RATE,
) -> WarmupState:
    """One gradient step of the mask model on a frame's residuals.

    Minimizes mean(M_hat * residual) + reg_weight * mean(1 - M_hat), where
    M_hat = sigmoid(w . (residual, blurred_residual, 1)). The regularizer
    keeps the trivial all-distractor solution off the table. Passing
    ``state=None`` starts from zero weights (M_hat = 0.5 everywhere).
    """
    if not np.isfinite(frame.residual).all():
        raise MaskPriorError("non-finite residuals")
    if state is None:
        weights = np.zeros(3)
        iteration = 0
    else:
        weights = state.model_weights
        iteration = state.iteration

    r = frame.residual
    features = np.stack([r, frame.blurred_residual, np.ones_like(r)], axis=-1)
    z = features @ weights
    m_hat = 1.0 / (1.0 + np.exp(-z))
    loss = float((m_hat * r).mean() + reg_weight * (1.0 - m_hat).mean())
    sig_grad = m_hat * (1.0 - m_hat)
    grad = ((r - reg_weight) * sig_grad)[:, :, None] * features
    new_weights = weights - learning_rate * grad.mean(axis=(0, 1))

    z = features @ new_weights
    m_hat = 1.0 / (1.0 + np.exp(-z))
    return WarmupState(
        iteration=iteration + 1,
        model_weights=new_weights,
        M_hat=m_hat,
        losses=(loss, float("nan")),
    )


def effective_mask(
    state: WarmupState,
    prior: PriorMask | None,
    entity_masks: tuple[EntityMask, ...] = (),
    warmup_iters: int = 500,
) -> np.ndarray:
    """The binary training mask for the current iteration.

    Through iteration ``warmup_iters`` (inclusive) this is the prior's
    static map, bit-exact. Afterwards the learned M_hat is binarized at 0.5
    and snapped per entity to the entity's majority value (ties keep the
    pixel static); pixels outside every entity keep their binarized value.
    """
    if state.iteration < 1:
        raise MaskPriorError("effective_mask requires at least one update step")
    if state.iteration <= warmup_iters:
        if prior is None:
            raise MaskPriorError(
                f"iteration {state.iteration} is inside warm-up but no prior given"
            )
        return prior.static_map.copy()
    binary = state.M_hat >= 0.5
    out = binary.copy()
    for mask in entity_masks:
        votes = binary[mask.pixels]
        out[mask.pixels] = votes.sum() * 2 >= votes.size
    return out


def step_warmup(
    state: WarmupState | None,
    frame: ResidualFrame,
    prior: PriorMask | None,
    entity_masks: tuple[EntityMask, ...] = (),
    warmup_iters: int = 500,
    reg_weight: float = DEFAULT_REG_WEIGHT,
    learning_rate: float = DEFAULT_LEARNING_RATE,
) -> WarmupState:
    """One full training-iteration step: model update, mask, masked loss."""
    state = update_mask_model(state, frame, reg_weight, learning_rate)
    mask = effective_mask(state, prior, entity_masks, warmup_iters)
    masked = image_loss(frame.render, frame.ground_truth, mask)
    return WarmupState(
        iteration=state.iteration,
        model_weights=state.model_weights,
        M_hat=state.M_hat,
        losses=(state.losses[0], masked),
        M_effective=mask,
    )
