"""3D utilities: unprojection, Chamfer distance, robust depth alignment,
co-visibility counting and sparse-view cluster sampling.

All world coordinates live in the scene's normalized frame (the first
camera's frame); the Chamfer threshold of the matching stage is a length
in that frame, so distances here are plain Euclidean, never squared.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import MaskPriorError, SceneValidationError
from .scene_io import SceneBundle, ViewRecord

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PointSet:
    """3D points in the world frame with (view, token set) provenance."""

    points: np.ndarray
    source: tuple = ()

    def __post_init__(self):
        pts = self.points
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise SceneValidationError(f"points must be Mx3, got {pts.shape}")
        if pts.size and not np.isfinite(pts).all():
            raise SceneValidationError("non-finite point coordinates")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class AlignmentModel:
    """Affine depth alignment target ~ scale * predicted + shift."""

    scale: float
    shift: float
    inlier_mask: np.ndarray
    inlier_rmse: float


def unproject(view: ViewRecord, pixel_region: np.ndarray, source: tuple = ()) -> PointSet:
    """Lift the set pixels of ``pixel_region`` to world-frame 3D points.

    Pixel (u, v) unprojects through its center (u+0.5, v+0.5) using the
    view's depth map; pixels with zero depth carry no geometry and are
    skipped. World frame is the first camera's frame.
    """
    H, W = view.depth.shape
    if pixel_region.shape != (H, W):
        raise SceneValidationError(
            f"region shape {pixel_region.shape} does not match depth {(H, W)}"
        )
    K = view.camera.intrinsics
    if abs(np.linalg.det(K)) < 1e-12:
        raise SceneValidationError("singular intrinsics")
    vs, us = np.nonzero(pixel_region)
    if vs.size == 0:
        return PointSet(points=np.zeros((0, 3)), source=source)
    depth = view.depth[vs, us].astype(np.float64)
    keep = depth > 0
    vs, us, depth = vs[keep], us[keep], depth[keep]
    if vs.size == 0:
        return PointSet(points=np.zeros((0, 3)), source=source)
    homog = np.stack([us + 0.5, vs + 0.5, np.ones_like(depth)], axis=0)
    cam = np.linalg.inv(K) @ homog * depth
    R = view.camera.rotation
    t = view.camera.translation
    world = R.T @ (cam - t[:, None])
    return PointSet(points=world.T, source=source)


def project(view: ViewRecord, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project world points into a view.

    Returns (pixels Mx2 as continuous (u, v), camera-frame depth M). Points
    behind the camera get depth <= 0 and meaningless pixels.
    """
    R = view.camera.rotation
    t = view.camera.translation
    cam = points @ R.T + t
    z = cam[:, 2]
    safe = np.where(z != 0, z, 1.0)
    uv_h = cam @ view.camera.intrinsics.T
    uv = uv_h[:, :2] / safe[:, None]
    return uv, z


def chamfer(P: PointSet, Q: PointSet) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets.

    0.5 * (mean over P of the distance to the nearest Q point + the same
    with roles swapped). Unsquared, so the result is a length in scene units.
    """
    if len(P) == 0 or len(Q) == 0:
        raise MaskPriorError("empty point set")
    a = P.points.astype(np.float64)
    b = Q.points.astype(np.float64)
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


def subsample_points(points: PointSet, max_points: int, seed: int) -> PointSet:
    """Bound a point set by seeded uniform choice without replacement."""
    if len(points) <= max_points:
        return points
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(points), size=max_points, replace=False))
    return PointSet(points=points.points[idx], source=points.source)


def ransac_align(
    depth_samples: np.ndarray,
    iters: int = 500,
    inlier_tol: float | None = None,
    seed: int = 0,
) -> AlignmentModel:
    """Robustly fit target ~ scale * predicted + shift over (predicted, target) pairs.

    Minimal samples of 2 points propose a line; the model with the most
    inliers (|residual| <= inlier_tol) wins and is refit by least squares on
    its inliers. ``inlier_tol`` defaults to 2% of the median target depth.
    The RNG is seeded for reproducibility.
    """
    samples = np.asarray(depth_samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise MaskPriorError(f"depth_samples must be Mx2, got {samples.shape}")
    n = samples.shape[0]
    if n < 2:
        raise MaskPriorError(f"need >= 2 correspondences, got {n}")
    pred, target = samples[:, 0], samples[:, 1]
    if np.ptp(pred) == 0:
        raise MaskPriorError("rank deficient: all predicted depths identical")
    if inlier_tol is None:
        inlier_tol = 0.02 * float(np.median(np.abs(target)))
        if inlier_tol <= 0:
            raise MaskPriorError("cannot derive inlier tolerance from zero-depth targets")

    rng = np.random.default_rng(seed)
    best_count = -1
    best_inliers = None
    for _ in range(iters):
        ia, ib = rng.choice(n, size=2, replace=False)
        dp = pred[ib] - pred[ia]
        if dp == 0:
            continue
        scale = (target[ib] - target[ia]) / dp
        shift = target[ia] - scale * pred[ia]
        residual = np.abs(target - (scale * pred + shift))
        inliers = residual <= inlier_tol
        count = int(inliers.sum())
        if count > best_count:
            best_count = count
            best_inliers = inliers
    if best_inliers is None or best_count < 2:
        raise MaskPriorError("RANSAC found no 2-inlier model")

    A = np.stack([pred[best_inliers], np.ones(best_count)], axis=1)
    coef, _, rank, _ = np.linalg.lstsq(A, target[best_inliers], rcond=None)
    if rank < 2:
        raise MaskPriorError("rank deficient: inlier predicted depths identical")
    scale, shift = float(coef[0]), float(coef[1])
    if scale <= 0:
        raise MaskPriorError(f"alignment produced non-positive scale {scale:g}")
    residual = target[best_inliers] - (scale * pred[best_inliers] + shift)
    rmse = float(np.sqrt(np.mean(residual**2)))
    return AlignmentModel(
        scale=scale, shift=shift, inlier_mask=best_inliers, inlier_rmse=rmse
    )


def covisible_count(view_a: ViewRecord, view_b: ViewRecord, points: PointSet) -> int:
    """Count points landing inside both frusta with positive depth in both."""
    if len(points) == 0:
        return 0
    H, W = view_a.depth.shape
    count_ok = None
    for view in (view_a, view_b):
        uv, z = project(view, points.points)
        ok = (
            (z > 0)
            & (uv[:, 0] >= 0)
            & (uv[:, 0] < W)
            & (uv[:, 1] >= 0)
            & (uv[:, 1] < H)
        )
        count_ok = ok if count_ok is None else (count_ok & ok)
    return int(count_ok.sum())


def scene_sample_points(scene: SceneBundle, stride: int = 8) -> PointSet:
    """Pool a uniform pixel-grid unprojection from every view."""
    H, W = scene.image_size
    region = np.zeros((H, W), dtype=bool)
    region[stride // 2 :: stride, stride // 2 :: stride] = True
    chunks = [unproject(view, region).points for view in scene.views]
    pts = np.concatenate([c for c in chunks if len(c)], axis=0) if chunks else np.zeros((0, 3))
    return PointSet(points=pts, source=("scene-grid", stride))


def sample_view_cluster(
    scene: SceneBundle,
    k: int,
    seed: int,
    min_covisible: int = 20,
    points: PointSet | None = None,
) -> tuple[list[int], bool]:
    """Grow a view cluster: seeded first view, then scan-order additions.

    A view joins only if it shares more than ``min_covisible`` co-visible
    points with every view already selected. Returns (indices, exhausted)
    where ``exhausted`` is True when fewer than k views qualified.
    """
    if k < 1 or k > scene.N:
        raise MaskPriorError(f"k must be in [1, {scene.N}], got {k}")
    if points is None:
        points = scene_sample_points(scene)
    rng = np.random.default_rng(seed)
    first = int(rng.integers(scene.N))
    selected = [first]
    for idx in range(scene.N):
        if len(selected) >= k:
            break
        if idx in selected:
            continue
        if all(
            covisible_count(scene.views[idx], scene.views[s], points) > min_covisible
            for s in selected
        ):
            selected.append(idx)
    exhausted = len(selected) < k
    if exhausted:
        logger.warning(
            "view cluster exhausted: %d of %d requested views", len(selected), k
        )
    return selected, exhausted
