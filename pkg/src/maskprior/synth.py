"""Deterministic synthetic scenes with oracle labels and attention fixtures.

Scenes are flat-shaded axis-aligned boxes on a ground plane, ray-cast with
analytic depth from a ring of cameras. Transient boxes exist in exactly one
view each. Attention dumps are constructed from the true geometry: a token's
row peaks at its geometric correspondence when the surface is co-visible
(targets of entity tokens are clamped into the entity's token set in the
other view, so static entities are cycle-consistent by construction), and is
routed to a reserved sink cell when not. Transients therefore violate cycle
consistency in every reference view. A noise knob perturbs peak positions to
probe threshold robustness.

Everything is seeded; the same spec always produces bit-identical output.
"""

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import MaskPriorError
from .scene_io import (
    AttentionStack,
    CameraParams,
    EntityMask,
    SceneBundle,
    ViewRecord,
    save_scene,
)
from .tokenizer import tokens_for_mask

logger = logging.getLogger(__name__)

SKY = -1
GROUND = -2

_SINK = (0, 0)
# this token cell must stay entity-free so sink routing is always off-mask
_RESERVED_CELLS = ((0, 0),)

LABELS_NAME = "labels.json"


@dataclass(frozen=True)
class BoxEntity:
    """An axis-aligned box footprint on the ground plane."""

    entity_id: int
    center: tuple[float, float]
    size: tuple[float, float, float]
    static: bool
    view: int | None = None  # the single view a transient appears in

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        cx, cy = self.center
        sx, sy, sz = self.size
        lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
        hi = np.array([cx + sx / 2, cy + sy / 2, sz])
        return lo, hi


@dataclass
class SynthSpec:
    seed: int = 0
    num_views: int = 4
    num_entities: int = 6
    num_transients: int = 1
    image_size: tuple[int, int] = (192, 192)
    patch_size: int = 16
    noise: float = 0.0
    focal_factor: float = 1.3
    ring_radius: float = 0.56
    ring_height: float = 0.87
    attention_layers: int = 3
    feature_dim: int = 64
    entities: list[BoxEntity] | None = None

    def validate(self) -> None:
        H, W = self.image_size
        if H % self.patch_size or W % self.patch_size:
            raise MaskPriorError("image size must be a multiple of patch size")
        if self.num_views < 1:
            raise MaskPriorError("need at least one view")
        if self.num_transients >= self.num_entities:
            raise MaskPriorError("need at least one static entity")
        if not 0.0 <= self.noise <= 1.0:
            raise MaskPriorError("noise must be in [0, 1]")

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        data = dict(data)
        if "image_size" in data:
            data["image_size"] = tuple(data["image_size"])
        entities = data.pop("entities", None)
        spec = cls(**data)
        if entities is not None:
            spec.entities = [
                BoxEntity(
                    entity_id=int(e["entity_id"]),
                    center=tuple(e["center"]),
                    size=tuple(e["size"]),
                    static=bool(e["static"]),
                    view=e.get("view"),
                )
                for e in entities
            ]
        return spec


@dataclass
class SynthResult:
    bundle: SceneBundle
    labels: dict
    scene: "SynthScene"
    attention: list[tuple[AttentionStack, int | None]]


def _look_at(position: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera rotation/translation, CV convention (z forward, y down)."""
    forward = target - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    t = -R @ position
    return R, t


def _ray_box(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab-method ray/AABB intersection; inf where missed. dirs is Mx3."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None, :] - origin[None, :]) * inv
        t1 = (hi[None, :] - origin[None, :]) * inv
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    tau = np.where((near <= far) & (far > 1e-6), np.maximum(near, 1e-6), np.inf)
    return tau


class SynthScene:
    """Internal ground-truth state: build-frame geometry plus per-view renders."""

    def __init__(self, spec: SynthSpec, entities: list[BoxEntity]):
        self.spec = spec
        self.entities = entities
        H, W = spec.image_size
        f = spec.focal_factor * W
        self.K = np.array([[f, 0.0, W / 2], [0.0, f, H / 2], [0.0, 0.0, 1.0]])
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101]))
        self.cameras_build: list[tuple[np.ndarray, np.ndarray]] = []
        phase = rng.uniform(0, 2 * np.pi)
        for k in range(spec.num_views):
            angle = phase + 2 * np.pi * k / spec.num_views + rng.uniform(-0.08, 0.08)
            radius = spec.ring_radius * (1 + rng.uniform(-0.05, 0.05))
            height = spec.ring_height * (1 + rng.uniform(-0.05, 0.05))
            pos = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
            self.cameras_build.append(_look_at(pos, np.array([0.0, 0.0, 0.05])))
        # per-view render products, filled by _render_all
        self.hit_ids: list[np.ndarray] = []
        self.depths: list[np.ndarray] = []
        self.points: list[np.ndarray] = []
        self.images: list[np.ndarray] = []
        # per-view {entity_id: pixels the box would cover with no other boxes}
        self.solo_counts: list[dict[int, int]] = []
        self._render_all()

    # ------------------------------------------------------------------
    # rendering

    def _entities_in_view(self, view: int) -> list[BoxEntity]:
        return [e for e in self.entities if e.static or e.view == view]

    def _render_all(self) -> None:
        spec = self.spec
        H, W = spec.image_size
        us, vs = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
        pix = np.stack([us.ravel(), vs.ravel(), np.ones(H * W)], axis=0)
        cam_dirs = (np.linalg.inv(self.K) @ pix).T  # z-component is 1

        palette = _entity_palette(len(self.entities), spec.seed)
        for view in range(spec.num_views):
            R, t = self.cameras_build[view]
            origin = -R.T @ t
            dirs = cam_dirs @ R  # rows: R.T @ cam_dir
            boxes = self._entities_in_view(view)
            taus = np.full((len(boxes) + 1, H * W), np.inf)
            for b, box in enumerate(boxes):
                lo, hi = box.bounds()
                taus[b] = _ray_box(origin, dirs, lo, hi)
            with np.errstate(divide="ignore", invalid="ignore"):
                tau_ground = -origin[2] / dirs[:, 2]
            taus[-1] = np.where((dirs[:, 2] < 0) & (tau_ground > 1e-6), tau_ground, np.inf)

            winner = taus.argmin(axis=0)
            tau = taus[winner, np.arange(H * W)]
            hit = np.full(H * W, SKY, dtype=np.int32)
            ground_idx = len(boxes)
            box_hit = (winner < ground_idx) & np.isfinite(tau)
            ground_hit = (winner == ground_idx) & np.isfinite(tau)
            solo = {}
            for b, box in enumerate(boxes):
                hit[(winner == b) & box_hit] = box.entity_id
                solo[box.entity_id] = int((taus[b] < taus[-1]).sum())
            hit[ground_hit] = GROUND
            self.solo_counts.append(solo)

            depth = np.where(np.isfinite(tau), tau, 0.0)
            pts = origin[None, :] + tau[:, None] * dirs
            pts[~np.isfinite(tau)] = 0.0

            image = np.zeros((H * W, 3), dtype=np.float64)
            image[hit == SKY] = (202.0, 221.0, 240.0)
            gx = np.floor(pts[:, 0] * 6).astype(np.int64)
            gy = np.floor(pts[:, 1] * 6).astype(np.int64)
            checker = ((gx + gy) % 2 == 0)
            image[hit == GROUND] = 118.0
            image[(hit == GROUND) & checker] = 134.0
            for b, box in enumerate(boxes):
                sel = hit == box.entity_id
                if not sel.any():
                    continue
                shade = _face_shade(pts[sel], box)
                image[sel] = palette[box.entity_id] * shade[:, None]

            self.hit_ids.append(hit.reshape(H, W))
            self.depths.append(depth.reshape(H, W).astype(np.float32))
            self.points.append(pts.reshape(H, W, 3))
            self.images.append(np.clip(np.round(image), 0, 255).astype(np.uint8).reshape(H, W, 3))

    # ------------------------------------------------------------------
    # exported cameras (world = first-camera frame)

    def cameras_exported(self) -> list[CameraParams]:
        R0, t0 = self.cameras_build[0]
        out = []
        for R, t in self.cameras_build:
            R_new = R @ R0.T
            t_new = t - R_new @ t0
            out.append(
                CameraParams(
                    intrinsics=self.K.copy(),
                    extrinsics=np.concatenate([R_new, t_new[:, None]], axis=1),
                )
            )
        return out

    def surface_point(self, view: int, u: int, v: int) -> np.ndarray:
        """Ground-truth 3D point of a pixel, in the exported world frame."""
        R0, t0 = self.cameras_build[0]
        return R0 @ self.points[view][v, u] + t0

    def entity_masks(self, view: int) -> list[EntityMask]:
        masks = []
        for box in self._entities_in_view(view):
            pixels = self.hit_ids[view] == box.entity_id
            count = int(pixels.sum())
            if count:
                masks.append(EntityMask(box.entity_id, pixels, count))
        return masks


def _entity_palette(n: int, seed: int) -> dict[int, np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    colors = {}
    for entity_id in range(1, n + 1):
        hue = rng.uniform()
        base = np.array(
            [
                abs(hue * 6 % 2 - 1),
                abs((hue * 6 + 2) % 2 - 1),
                abs((hue * 6 + 4) % 2 - 1),
            ]
        )
        colors[entity_id] = 70.0 + 170.0 * (1 - base)
    return colors


def _face_shade(points: np.ndarray, box: BoxEntity) -> np.ndarray:
    """Flat per-face shading from which box face the hit point lies on."""
    lo, hi = box.bounds()
    eps = 1e-4
    shade = np.full(points.shape[0], 0.85)
    shade[np.abs(points[:, 2] - hi[2]) < eps] = 1.0
    shade[np.abs(points[:, 0] - lo[0]) < eps] = 0.72
    shade[np.abs(points[:, 0] - hi[0]) < eps] = 0.72
    shade[np.abs(points[:, 1] - lo[1]) < eps] = 0.6
    shade[np.abs(points[:, 1] - hi[1]) < eps] = 0.6
    return shade


# ----------------------------------------------------------------------
# entity placement


def _place_entities(spec: SynthSpec, attempt: int) -> list[BoxEntity] | None:
    """One seeded placement attempt on a jittered lattice.

    The lattice maximizes horizontal separation (keeping cross-view
    occlusion short at the steep camera pitch); None when a jittered cell
    still collides too much.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 303, attempt]))
    n = spec.num_entities
    n_static = n - spec.num_transients
    shrink = min(1.0, (6.0 / n) ** 0.35)
    half_field = 0.25 * min(1.3, (n / 6.0) ** 0.3)
    cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    cells = [(r, c) for r in range(rows) for c in range(cols)]
    rng.shuffle(cells)
    cell_x = 2 * half_field / cols
    cell_y = 2 * half_field / rows
    entities = []
    for idx in range(n):
        entity_id = idx + 1
        r, c = cells[idx]
        for _ in range(40):
            cx = -half_field + (c + 0.5) * cell_x + rng.uniform(-0.25, 0.25) * cell_x
            cy = -half_field + (r + 0.5) * cell_y + rng.uniform(-0.25, 0.25) * cell_y
            sx, sy = rng.uniform(0.14 * shrink, 0.21 * shrink, size=2)
            sz = rng.uniform(0.14, 0.24)
            candidate = BoxEntity(
                entity_id=entity_id,
                center=(float(cx), float(cy)),
                size=(float(sx), float(sy), float(sz)),
                static=idx < n_static,
                view=None if idx < n_static else int(rng.integers(spec.num_views)),
            )
            if _footprint_clear(candidate, entities):
                entities.append(candidate)
                break
        else:
            return None
    return entities


def _footprint_clear(candidate: BoxEntity, placed: list[BoxEntity]) -> bool:
    lo_a, hi_a = candidate.bounds()
    for other in placed:
        lo_b, hi_b = other.bounds()
        overlap_x = min(hi_a[0], hi_b[0]) - max(lo_a[0], lo_b[0])
        overlap_y = min(hi_a[1], hi_b[1]) - max(lo_a[1], lo_b[1])
        if overlap_x <= 0 or overlap_y <= 0:
            continue
        area = overlap_x * overlap_y
        smaller = min(
            (hi_a[0] - lo_a[0]) * (hi_a[1] - lo_a[1]),
            (hi_b[0] - lo_b[0]) * (hi_b[1] - lo_b[1]),
        )
        if area > 0.25 * smaller:
            return False
    return True


# a static entity's cross-view token-patch Chamfer distance must stay well
# below the 0.2 matching threshold for the oracle-soundness guarantee
_MAX_STATIC_CD = 0.055


def _scene_valid(scene: SynthScene, spec: SynthSpec) -> bool:
    """Check the layout constraints the attention construction relies on.

    Every required entity needs at least two half-occupied cells in every
    view it appears in (so the pipeline's token sets never hit the any-pixel
    fallback), token sets must not share cells, the sink cell must stay
    entity-free, and static entities must agree geometrically across views
    (small token-patch Chamfer distance) so the matching pipeline reproduces
    the labels at zero noise.
    """
    p = spec.patch_size
    per_view_sets = []
    for view in range(spec.num_views):
        hid = scene.hit_ids[view]
        for r, c in _RESERVED_CELLS:
            if (hid[r * p : (r + 1) * p, c * p : (c + 1) * p] > 0).any():
                return False
        token_sets = _view_token_sets(scene, view)
        occupied = _occupied_cells(scene, view)
        seen_cells: set = set()
        required = [e for e in scene.entities if e.static or e.view == view]
        for box in required:
            cells = occupied.get(box.entity_id, set())
            if len(cells) < 2:
                return False
            if set(token_sets.get(box.entity_id, ())) != cells:
                return False  # fallback kicked in or sets diverge
            if seen_cells & cells:
                return False  # a cell claimed by two entity token sets
            seen_cells |= cells
        per_view_sets.append(token_sets)
    return _static_chamfers_ok(scene, per_view_sets)


def _static_chamfers_ok(scene: SynthScene, per_view_sets: list[dict]) -> bool:
    """Pairwise token-patch Chamfer check for every static entity."""
    from scipy.spatial import cKDTree

    spec = scene.spec
    p = spec.patch_size
    samples: dict[tuple[int, int], np.ndarray] = {}
    stride = 3
    for view, token_sets in enumerate(per_view_sets):
        depth = scene.depths[view]
        pts = scene.points[view]
        for box in scene.entities:
            if not box.static:
                continue
            cells = token_sets.get(box.entity_id)
            if not cells:
                return False
            sel = np.zeros(spec.image_size, dtype=bool)
            for r, c in cells:
                sel[r * p : (r + 1) * p : stride, c * p : (c + 1) * p : stride] = True
            sel &= depth > 0
            samples[(view, box.entity_id)] = pts[sel]
    for box in scene.entities:
        if not box.static:
            continue
        for i in range(spec.num_views):
            for j in range(i + 1, spec.num_views):
                a = samples[(i, box.entity_id)]
                b = samples[(j, box.entity_id)]
                d_ab, _ = cKDTree(b).query(a)
                d_ba, _ = cKDTree(a).query(b)
                if 0.5 * (d_ab.mean() + d_ba.mean()) > _MAX_STATIC_CD:
                    return False
    return True


def _occupied_cells(scene: SynthScene, view: int) -> dict[int, set]:
    """Cells at least half covered by each entity, straight from pixel counts."""
    p = scene.spec.patch_size
    H, W = scene.spec.image_size
    h, w = H // p, W // p
    out: dict[int, set] = {}
    for mask in scene.entity_masks(view):
        counts = mask.pixels.reshape(h, p, w, p).sum(axis=(1, 3))
        cells = {(int(r), int(c)) for r, c in np.argwhere(counts * 2 >= p * p)}
        out[mask.entity_id] = cells
    return out


def _view_token_sets(scene: SynthScene, view: int) -> dict[int, tuple]:
    sets = {}
    for mask in scene.entity_masks(view):
        tokens = tokens_for_mask(mask, scene.spec.patch_size, 0.5, view=view)
        sets[mask.entity_id] = tokens.grid_indices
    return sets


# ----------------------------------------------------------------------
# attention construction


def _project_build(scene: SynthScene, view: int, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    R, t = scene.cameras_build[view]
    cam = points @ R.T + t
    z = cam[:, 2]
    uv = (cam @ scene.K.T)[:, :2] / np.where(z != 0, z, 1.0)[:, None]
    return uv, z


def _cell_targets(scene: SynthScene, i: int, j: int) -> list[tuple[int, int] | None]:
    """Per cell of view i, the peak cell in view j (None means sink)."""
    spec = scene.spec
    p = spec.patch_size
    H, W = spec.image_size
    h, w = H // p, W // p
    hid_i = scene.hit_ids[i]
    pts_i = scene.points[i]
    depth_j = scene.depths[j]
    tokens_i = _view_token_sets(scene, i)
    tokens_j = _view_token_sets(scene, j)
    owner_of_cell = {}
    for entity_id, cells in tokens_i.items():
        for cell in cells:
            owner_of_cell[cell] = entity_id
    entity_cells_j = {cell for cells in tokens_j.values() for cell in cells}

    targets: list[tuple[int, int] | None] = []
    for r in range(h):
        for c in range(w):
            cell = (r, c)
            block = hid_i[r * p : (r + 1) * p, c * p : (c + 1) * p]
            owner = owner_of_cell.get(cell)
            if owner is not None:
                ref_cells = tokens_j.get(owner)
                if not ref_cells:
                    targets.append(None)
                    continue
                sel = block == owner
                pts = pts_i[r * p : (r + 1) * p, c * p : (c + 1) * p][sel]
                mean_pt = pts.mean(axis=0)
                uv, z = _project_build(scene, j, mean_pt[None, :])
                centers = (np.array(ref_cells) + 0.5) * p
                d2 = (centers[:, 1] - uv[0, 0]) ** 2 + (centers[:, 0] - uv[0, 1]) ** 2
                targets.append(tuple(ref_cells[int(np.argmin(d2))]))
                continue
            # background cell: geometric correspondence with a depth test
            v_px, u_px = r * p + p // 2, c * p + p // 2
            if scene.depths[i][v_px, u_px] == 0:
                targets.append(None)
                continue
            point = pts_i[v_px, u_px]
            uv, z = _project_build(scene, j, point[None, :])
            u, v = uv[0]
            if z[0] <= 0 or not (0 <= u < W and 0 <= v < H):
                targets.append(None)
                continue
            seen = depth_j[int(v), int(u)]
            if seen == 0 or abs(z[0] - seen) > 0.1 * seen + 0.017:
                targets.append(None)
                continue
            cell_j = (int(v) // p, int(u) // p)
            # keep background reverse routes off entity token sets so the
            # cycle-consistency oracle never validates a transient by accident
            targets.append(None if cell_j in entity_cells_j else cell_j)
    return targets


def _pair_attention(scene: SynthScene, i: int, j: int) -> AttentionStack:
    spec = scene.spec
    H, W = spec.image_size
    p = spec.patch_size
    h, w = H // p, W // p
    L = spec.attention_layers
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 404, i, j]))

    targets = _cell_targets(scene, i, j)
    tensor = rng.uniform(0.001, 0.05, size=(h * w, L, h, w)).astype(np.float32)
    if spec.noise > 0:
        tensor += (spec.noise * 0.3 * rng.uniform(size=tensor.shape)).astype(np.float32)

    for flat, target in enumerate(targets):
        tr, tc = target if target is not None else _SINK
        if spec.noise > 0:
            # noise relocates peaks: occasional uniform corruption plus
            # one-cell jitter, both scaling with the noise level
            if rng.uniform() < spec.noise**2:
                tr, tc = int(rng.integers(h)), int(rng.integers(w))
            elif rng.uniform() < spec.noise / 2 and target is not None:
                tr = min(max(tr + int(rng.integers(-1, 2)), 0), h - 1)
                tc = min(max(tc + int(rng.integers(-1, 2)), 0), w - 1)
        tensor[flat, :, tr, tc] = rng.uniform(0.8, 1.0, size=L).astype(np.float32)

    token_ids = tuple((r, c) for r in range(h) for c in range(w))
    return AttentionStack(
        query_view=i,
        reference_view=j,
        tensor=tensor,
        token_ids=token_ids,
        feature_dim=spec.feature_dim,
    )


# ----------------------------------------------------------------------
# entry points


def generate(spec: SynthSpec, out_dir=None) -> SynthResult:
    """Build a synthetic scene; optionally write it in the interchange layout.

    The returned labels map every (view, entity) to its ground-truth class
    and are also written as ``labels.json`` (with per-view transient masks
    under ``gt_transient/``) next to the scene when ``out_dir`` is given.
    """
    spec.validate()
    if spec.entities is not None:
        scene = SynthScene(spec, spec.entities)
        if not _scene_valid(scene, spec):
            raise MaskPriorError("explicit entity layout violates fixture constraints")
    else:
        scene = None
        for attempt in range(200):
            entities = _place_entities(spec, attempt)
            if entities is None:
                continue
            candidate = SynthScene(spec, entities)
            if _scene_valid(candidate, spec):
                scene = candidate
                break
        if scene is None:
            raise MaskPriorError(f"no valid layout found for seed {spec.seed}")

    cameras = scene.cameras_exported()
    views = []
    for v in range(spec.num_views):
        views.append(
            ViewRecord(
                image=scene.images[v],
                camera=cameras[v],
                depth=scene.depths[v],
                entity_masks=tuple(scene.entity_masks(v)),
            )
        )
    bundle = SceneBundle(views=tuple(views), patch_size=spec.patch_size)

    attention = []
    for i in range(spec.num_views):
        for j in range(spec.num_views):
            if i != j:
                attention.append((_pair_attention(scene, i, j), None))

    labels = {
        "seed": spec.seed,
        "noise": spec.noise,
        "views": [
            {
                "view": v,
                "entities": [
                    {
                        "entity_id": m.entity_id,
                        "label": "static" if _is_static(scene, m.entity_id) else "transient",
                    }
                    for m in scene.entity_masks(v)
                ],
            }
            for v in range(spec.num_views)
        ],
    }

    if out_dir is not None:
        save_scene(bundle, out_dir, attention=attention)
        from pathlib import Path

        out_dir = Path(out_dir)
        with open(out_dir / LABELS_NAME, "w", encoding="utf-8") as fh:
            json.dump(labels, fh, indent=2, sort_keys=True)
            fh.write("\n")
        gt_dir = out_dir / "gt_transient"
        gt_dir.mkdir(exist_ok=True)
        for v in range(spec.num_views):
            gt = np.zeros(spec.image_size, dtype=np.uint8)
            for mask in scene.entity_masks(v):
                if not _is_static(scene, mask.entity_id):
                    gt[mask.pixels] = 255
            Image.fromarray(gt).save(gt_dir / f"{v:04d}.png", format="PNG")

    return SynthResult(bundle=bundle, labels=labels, scene=scene, attention=attention)


def _is_static(scene: SynthScene, entity_id: int) -> bool:
    for box in scene.entities:
        if box.entity_id == entity_id:
            return box.static
    raise KeyError(entity_id)


def load_labels(scene_dir) -> dict:
    from pathlib import Path

    with open(Path(scene_dir) / LABELS_NAME, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ----------------------------------------------------------------------
# warm-up fixtures


@dataclass
class WarmupFixtureSpec:
    seed: int = 0
    image_size: tuple[int, int] = (96, 96)
    num_frames: int = 4
    distractor_size: tuple[int, int] = (32, 32)
    background_noise: float = 0.02
    distractor_low: float = 0.55
    distractor_high: float = 0.95


def generate_warmup_frames(
    spec: WarmupFixtureSpec, out_dir=None
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """(render, ground truth) pairs with a known high-residual block.

    Background residuals are small (quantized ~spec.background_noise);
    distractor-region residuals are drawn from a well separated range so the
    mask model has a clean decision boundary to find. Returns the frame
    pairs and the distractor mask.
    """
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 505]))
    H, W = spec.image_size
    dh, dw = spec.distractor_size
    gy, gx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    base = np.stack([0.25 + 0.5 * gx, 0.3 + 0.4 * gy, 0.55 - 0.3 * gx * gy], axis=2)
    base += 0.08 * np.sin(12 * gx)[:, :, None]
    gt = np.clip(base, 0.0, 1.0)

    distractor = np.zeros((H, W), dtype=bool)
    if dh > 0 and dw > 0:
        top = int(rng.integers(0, H - dh + 1))
        left = int(rng.integers(0, W - dw + 1))
        distractor[top : top + dh, left : left + dw] = True

    frames = []
    for _ in range(spec.num_frames):
        render = gt + rng.uniform(-spec.background_noise, spec.background_noise, size=gt.shape)
        if distractor.any():
            magnitude = rng.uniform(spec.distractor_low, spec.distractor_high, size=(int(distractor.sum()), 3))
            sign = np.where(gt[distractor] > 0.5, -1.0, 1.0)
            render[distractor] = gt[distractor] + sign * magnitude
        render = np.clip(render, 0.0, 1.0)
        frames.append(
            (
                (render * 255).round().astype(np.uint8),
                (gt * 255).round().astype(np.uint8),
            )
        )

    if out_dir is not None:
        from pathlib import Path

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for idx, (render, truth) in enumerate(frames):
            Image.fromarray(render).save(out_dir / f"render_{idx:04d}.png", format="PNG")
            Image.fromarray(truth).save(out_dir / f"gt_{idx:04d}.png", format="PNG")
        Image.fromarray(distractor.astype(np.uint8) * 255).save(
            out_dir / "distractor_mask.png", format="PNG"
        )
        Image.fromarray((~distractor).astype(np.uint8) * 255).save(
            out_dir / "prior.png", format="PNG"
        )
        meta = {
            "seed": spec.seed,
            "num_frames": spec.num_frames,
            "image_size": list(spec.image_size),
            "distractor_pixels": int(distractor.sum()),
        }
        with open(out_dir / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    return frames, distractor
