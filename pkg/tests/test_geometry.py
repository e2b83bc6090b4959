import math

import numpy as np
import pytest

from conftest import make_camera, make_view
from maskprior.errors import MaskPriorError
from maskprior.geometry import (
    AlignmentModel,
    PointSet,
    chamfer,
    covisible_count,
    project,
    ransac_align,
    sample_view_cluster,
    scene_sample_points,
    subsample_points,
    unproject,
)
from maskprior.scene_io import CameraParams, load_scene


def loop_chamfer(P, Q):
    """Exhaustive O(|P| * |Q|) nearest-neighbor oracle, plain loops."""

    def one_way(A, B):
        mins = []
        for a in A:
            best = math.inf
            for b in B:
                dx, dy, dz = a[0] - b[0], a[1] - b[1], a[2] - b[2]
                d = math.sqrt((dx * dx + dy * dy) + dz * dz)
                if d < best:
                    best = d
            mins.append(best)
        return np.asarray(mins)

    return float(0.5 * (one_way(P, Q).mean() + one_way(Q, P).mean()))


# ---------------------------------------------------------------- unproject


def test_unproject_principal_axis_point():
    # principal point at pixel center (8 + 0.5, 8 + 0.5)
    cam = make_camera(f=20.0, cx=8.5, cy=8.5)
    view = make_view(16, camera=cam, depth_value=2.5)
    region = np.zeros((16, 16), dtype=bool)
    region[8, 8] = True
    pts = unproject(view, region)
    assert np.allclose(pts.points, [[0.0, 0.0, 2.5]], atol=1e-12)


def test_unproject_empty_region():
    view = make_view(16)
    assert len(unproject(view, np.zeros((16, 16), bool))) == 0


def test_unproject_skips_zero_depth():
    view = make_view(16, depth_value=0.0)
    region = np.ones((16, 16), dtype=bool)
    assert len(unproject(view, region)) == 0


def test_unproject_matches_generator_ground_truth(synth_result):
    scene_dir, result = synth_result
    scene = load_scene(scene_dir)
    rng = np.random.default_rng(0)
    view_idx = 1
    view = scene.views[view_idx]
    for _ in range(20):
        v = int(rng.integers(scene.image_size[0]))
        u = int(rng.integers(scene.image_size[1]))
        if view.depth[v, u] == 0:
            continue
        region = np.zeros(scene.image_size, dtype=bool)
        region[v, u] = True
        got = unproject(view, region).points[0]
        truth = result.scene.surface_point(view_idx, u, v)
        assert np.abs(got - truth).max() < 1e-5


def test_unproject_project_identity(scene):
    view = scene.views[2]
    region = np.zeros(scene.image_size, dtype=bool)
    region[10:180:13, 7:180:17] = True
    region &= view.depth > 0
    pts = unproject(view, region)
    uv, z = project(view, pts.points)
    vs, us = np.nonzero(region)
    expect = np.stack([us + 0.5, vs + 0.5], axis=1)
    assert np.abs(uv - expect).max() < 0.5


def test_unproject_singular_intrinsics():
    K = np.array([[0.0, 0, 8], [0, 0.0, 8], [0, 0, 1.0]])
    E = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    view = make_view(16, camera=CameraParams(K, E))
    with pytest.raises(Exception, match="singular"):
        unproject(view, np.ones((16, 16), bool))


# ------------------------------------------------------------------ chamfer


def test_chamfer_identical_sets_zero():
    P = PointSet(points=np.random.default_rng(0).normal(size=(40, 3)))
    assert chamfer(P, P) == 0.0


def test_chamfer_unit_offset():
    P = PointSet(points=np.array([[0.0, 0.0, 0.0]]))
    Q = PointSet(points=np.array([[1.0, 0.0, 0.0]]))
    assert chamfer(P, Q) == 1.0


def test_chamfer_matches_loop_oracle_exactly():
    rng = np.random.default_rng(42)
    for _ in range(5):
        P = rng.uniform(-2, 2, size=(int(rng.integers(1, 65)), 3))
        Q = rng.uniform(-2, 2, size=(int(rng.integers(1, 65)), 3))
        got = chamfer(PointSet(points=P), PointSet(points=Q))
        assert got == loop_chamfer(P, Q)


def test_chamfer_symmetric_and_rigid_invariant():
    rng = np.random.default_rng(9)
    P = rng.normal(size=(50, 3))
    Q = rng.normal(size=(30, 3))
    a = chamfer(PointSet(points=P), PointSet(points=Q))
    b = chamfer(PointSet(points=Q), PointSet(points=P))
    assert a == b
    theta = 0.37
    R = np.array(
        [
            [np.cos(theta), -np.sin(theta), 0],
            [np.sin(theta), np.cos(theta), 0],
            [0, 0, 1.0],
        ]
    )
    t = np.array([0.4, -1.2, 3.0])
    c = chamfer(PointSet(points=P @ R.T + t), PointSet(points=Q @ R.T + t))
    assert abs(a - c) < 1e-9


def test_chamfer_empty_set_error():
    P = PointSet(points=np.zeros((0, 3)))
    Q = PointSet(points=np.ones((3, 3)))
    with pytest.raises(MaskPriorError, match="empty point set"):
        chamfer(P, Q)


def test_subsample_points_bounded_and_seeded():
    P = PointSet(points=np.random.default_rng(1).normal(size=(100, 3)))
    a = subsample_points(P, 10, seed=4)
    b = subsample_points(P, 10, seed=4)
    assert len(a) == 10
    assert np.array_equal(a.points, b.points)


# -------------------------------------------------------------- ransac_align


def test_ransac_clean_data_identity():
    pred = np.linspace(1.0, 5.0, 50)
    samples = np.stack([pred, pred], axis=1)
    model = ransac_align(samples, iters=100, seed=0)
    assert abs(model.scale - 1.0) < 1e-12
    assert abs(model.shift) < 1e-12
    assert model.inlier_mask.all()


def test_ransac_recovers_scale_shift_under_outliers():
    rng = np.random.default_rng(123)
    pred = rng.uniform(1.0, 6.0, size=200)
    target = 2.0 * pred + 0.3
    n_out = 60
    idx = rng.choice(200, size=n_out, replace=False)
    target[idx] = rng.uniform(0.0, 14.0, size=n_out)
    model = ransac_align(np.stack([pred, target], axis=1), iters=500, seed=7)
    assert abs(model.scale - 2.0) / 2.0 < 0.01
    assert abs(model.shift - 0.3) / 0.3 < 0.1 or abs(model.shift - 0.3) < 0.02


def test_ransac_outlier_free_matches_closed_form():
    rng = np.random.default_rng(5)
    pred = rng.uniform(1.0, 4.0, size=80)
    target = 1.7 * pred + 0.25 + rng.normal(0, 0.002, size=80)
    model = ransac_align(np.stack([pred, target], axis=1), iters=300, seed=2)
    # closed-form least squares via normal equations
    xm, ym = pred.mean(), target.mean()
    scale = ((pred - xm) * (target - ym)).sum() / ((pred - xm) ** 2).sum()
    shift = ym - scale * xm
    assert model.inlier_mask.all()
    assert abs(model.scale - scale) < 1e-9
    assert abs(model.shift - shift) < 1e-9


def test_ransac_too_few_correspondences():
    with pytest.raises(MaskPriorError, match=">= 2"):
        ransac_align(np.array([[1.0, 2.0]]))


def test_ransac_rank_deficient():
    samples = np.array([[1.0, 2.0], [1.0, 3.0], [1.0, 4.0]])
    with pytest.raises(MaskPriorError, match="rank deficient"):
        ransac_align(samples)


# -------------------------------------------------------- covisibility


def test_covisible_identical_views_sees_all(scene):
    view = scene.views[0]
    pts = unproject(view, (view.depth > 0))
    pts = subsample_points(pts, 200, seed=0)
    assert covisible_count(view, view, pts) == len(pts)


def test_covisible_opposite_facing_zero():
    flip = np.diag([1.0, -1.0, -1.0])
    cam_a = make_camera()
    cam_b = CameraParams(
        intrinsics=cam_a.intrinsics,
        extrinsics=np.concatenate([flip, np.zeros((3, 1))], axis=1),
    )
    view_a = make_view(32, camera=cam_a)
    view_b = make_view(32, camera=cam_b)
    pts = PointSet(points=np.array([[0.0, 0.0, 2.0], [0.1, 0.1, 3.0]]))
    assert covisible_count(view_a, view_b, pts) == 2 - 2  # behind camera b
    assert covisible_count(view_a, view_a, pts) == 2


def test_covisible_matches_per_point_projection_oracle(scene):
    pts = subsample_points(scene_sample_points(scene, stride=16), 300, seed=1)
    H, W = scene.image_size
    for a, b in [(0, 1), (1, 3)]:
        count = 0
        for p in pts.points:
            ok = True
            for view in (scene.views[a], scene.views[b]):
                R = view.camera.rotation
                t = view.camera.translation
                cam = R @ p + t
                if cam[2] <= 0:
                    ok = False
                    break
                uv = view.camera.intrinsics @ cam
                u, v = uv[0] / cam[2], uv[1] / cam[2]
                if not (0 <= u < W and 0 <= v < H):
                    ok = False
                    break
            count += ok
        assert covisible_count(scene.views[a], scene.views[b], pts) == count


# ------------------------------------------------------ view clustering


def test_sample_view_cluster_k1(scene):
    selected, exhausted = sample_view_cluster(scene, 1, seed=3)
    assert len(selected) == 1 and not exhausted


def test_sample_view_cluster_full_covisibility(scene):
    selected, exhausted = sample_view_cluster(scene, 4, seed=0)
    assert len(selected) == 4 and not exhausted
    assert sorted(selected) == [0, 1, 2, 3]


def test_sample_view_cluster_disjoint_views():
    # two co-located cameras facing opposite directions share nothing
    flip = np.diag([1.0, -1.0, -1.0])
    cam_a = make_camera(cx=16, cy=16)
    cam_b = CameraParams(
        intrinsics=cam_a.intrinsics,
        extrinsics=np.concatenate([flip, np.zeros((3, 1))], axis=1),
    )
    from conftest import make_bundle

    bundle = make_bundle(
        [make_view(32, camera=cam_a), make_view(32, camera=cam_b)], patch_size=16
    )
    selected, exhausted = sample_view_cluster(bundle, 2, seed=1)
    assert len(selected) == 1 and exhausted
