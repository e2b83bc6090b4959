"""On-disk interchange format and in-memory data model for scenes.

A scene directory holds a JSON root manifest plus payload files::

    manifest.json
    images/0000.png            8-bit RGB, one per view
    depth/0000.bin             float32 H x W, row-major little-endian
    points/0000.bin            optional float32 H x W x 3 point map
    cameras.bin                float64 N x 21 (3x3 intrinsics + 3x4 extrinsics)
    masks/0000_<entity>.png    8-bit single channel, nonzero = masked
    attention/<i>_<j>_<m>.bin  float32 S x L x h x w attention rows
    attention/<i>_<j>_all.bin  whole-grid variant (S = h*w, row-major rows)

Every tensor is listed in the manifest with name, shape, dtype and file so
payloads can be produced by any runtime that can write raw little-endian
binaries. Attention is stored head-averaged, post-softmax, per global layer.

Loading validates every declared invariant; a loaded :class:`SceneBundle`
is immutable (arrays are marked read-only) and safe to share across workers.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AttentionUnavailableError, SceneLoadError, SceneValidationError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
WORLD_FRAME_NOTE = "first-camera frame"

_DTYPES = {
    "uint8": np.dtype("<u1"),
    "int32": np.dtype("<i4"),
    "float32": np.dtype("<f4"),
    "float64": np.dtype("<f8"),
}

_ROTATION_TOL = 1e-5


@dataclass(frozen=True)
class CameraParams:
    """Pinhole camera: 3x3 intrinsics (pixels) and 3x4 world-to-camera extrinsics."""

    intrinsics: np.ndarray
    extrinsics: np.ndarray

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsics[:, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsics[:, 3]

    def validate(self, view_index: int) -> None:
        K, E = self.intrinsics, self.extrinsics
        if K.shape != (3, 3) or E.shape != (3, 4):
            raise SceneValidationError(
                f"view {view_index}: camera shapes {K.shape}/{E.shape}, want (3,3)/(3,4)"
            )
        lower = max(abs(K[1, 0]), abs(K[2, 0]), abs(K[2, 1]))
        if lower > 1e-9:
            raise SceneValidationError(
                f"view {view_index}: intrinsics not upper-triangular (max lower {lower:g})"
            )
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise SceneValidationError(f"view {view_index}: non-positive focal length")
        R = E[:, :3]
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > _ROTATION_TOL:
            raise SceneValidationError(
                f"view {view_index}: rotation not orthonormal (max deviation {err:g})"
            )


@dataclass(frozen=True)
class EntityMask:
    """One class-agnostic entity segment of a view. ``pixels`` is H x W bool."""

    entity_id: int
    pixels: np.ndarray
    pixel_count: int


@dataclass(frozen=True)
class ViewRecord:
    """All per-view inputs: image, camera, depth, entity masks, optional point map."""

    image: np.ndarray
    camera: CameraParams
    depth: np.ndarray
    entity_masks: tuple[EntityMask, ...]
    point_map: np.ndarray | None = None

    def mask_by_id(self, entity_id: int) -> EntityMask:
        for m in self.entity_masks:
            if m.entity_id == entity_id:
                return m
        raise KeyError(f"no entity mask {entity_id} in view")


@dataclass(frozen=True)
class SceneBundle:
    """A fully validated scene: ordered views plus global metadata."""

    views: tuple[ViewRecord, ...]
    patch_size: int
    world_frame_note: str = WORLD_FRAME_NOTE
    load_warnings: tuple[str, ...] = ()

    @property
    def N(self) -> int:
        return len(self.views)

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.views[0].image.shape[:2]
        return h, w

    @property
    def grid_size(self) -> tuple[int, int]:
        h, w = self.image_size
        return h // self.patch_size, w // self.patch_size


@dataclass(frozen=True)
class AttentionStack:
    """Per-(query view, reference view) attention rows, head-averaged per layer.

    ``tensor`` is S x L x h x w; row s belongs to query token ``token_ids[s]``
    (a (row, col) grid index in the query view). ``feature_dim`` records the
    transformer feature width used when the dump was produced.
    """

    query_view: int
    reference_view: int
    tensor: np.ndarray
    token_ids: tuple[tuple[int, int], ...]
    feature_dim: int

    @property
    def S(self) -> int:
        return self.tensor.shape[0]

    @property
    def L(self) -> int:
        return self.tensor.shape[1]

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.tensor.shape[2], self.tensor.shape[3]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def _read_manifest(scene_dir: Path) -> dict:
    path = scene_dir / MANIFEST_NAME
    if not path.is_file():
        raise SceneLoadError(f"manifest missing: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise SceneValidationError(f"manifest unparsable: {path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise SceneValidationError(f"unsupported format_version {version!r}")
    return manifest


def _check_payload_bytes(scene_dir: Path, entry: dict, what: str) -> Path:
    """Verify a binary payload exists and its size matches shape x dtype."""
    path = scene_dir / entry["file"]
    if not path.is_file():
        raise SceneLoadError(f"{what}: file missing: {path}")
    dtype = _DTYPES.get(entry["dtype"])
    if dtype is None:
        raise SceneValidationError(f"{what}: unknown dtype {entry['dtype']!r}")
    expected = int(np.prod(entry["shape"])) * dtype.itemsize
    actual = path.stat().st_size
    if actual != expected:
        raise SceneValidationError(
            f"{what}: payload {path.name} has {actual} bytes, manifest implies {expected}"
        )
    return path


def _read_bin(scene_dir: Path, entry: dict, what: str) -> np.ndarray:
    path = _check_payload_bytes(scene_dir, entry, what)
    dtype = _DTYPES[entry["dtype"]]
    return np.fromfile(path, dtype=dtype).reshape(entry["shape"])


def _read_image(scene_dir: Path, entry: dict, what: str) -> np.ndarray:
    path = scene_dir / entry["file"]
    if not path.is_file():
        raise SceneLoadError(f"{what}: file missing: {path}")
    arr = np.asarray(Image.open(path))
    if list(arr.shape) != list(entry["shape"]) or arr.dtype != _DTYPES[entry["dtype"]]:
        raise SceneValidationError(
            f"{what}: decoded {arr.shape}/{arr.dtype}, manifest says "
            f"{tuple(entry['shape'])}/{entry['dtype']}"
        )
    return arr


def _resolve_mask_overlaps(
    masks: list[EntityMask], view_index: int, warnings: list[str]
) -> tuple[EntityMask, ...]:
    """Enforce pairwise disjointness: overlapping pixels go to the smaller mask.

    Ties break toward the lower entity id. Masks emptied by the resolution
    are dropped. Both events are recorded as load warnings.
    """
    order = sorted(masks, key=lambda m: (m.pixel_count, m.entity_id))
    claimed = None
    resolved = []
    for mask in order:
        pixels = mask.pixels
        if claimed is None:
            claimed = np.zeros_like(pixels)
        overlap = pixels & claimed
        if overlap.any():
            warnings.append(
                f"view {view_index}: mask {mask.entity_id} lost "
                f"{int(overlap.sum())} overlapping pixels to smaller masks"
            )
            pixels = pixels & ~claimed
        count = int(pixels.sum())
        if count == 0:
            warnings.append(
                f"view {view_index}: mask {mask.entity_id} empty after overlap "
                "resolution, dropped"
            )
            continue
        claimed = claimed | pixels
        resolved.append(EntityMask(mask.entity_id, _freeze(pixels), count))
    resolved.sort(key=lambda m: m.entity_id)
    return tuple(resolved)


def load_scene(scene_dir: str | Path) -> SceneBundle:
    """Load and validate a scene directory.

    Raises:
        SceneLoadError: the manifest or a referenced file is missing.
        SceneValidationError: a payload disagrees with the manifest or an
            invariant fails; the message names the offending view/tensor.
    """
    scene_dir = Path(scene_dir)
    manifest = _read_manifest(scene_dir)
    warnings: list[str] = []

    patch_size = int(manifest["patch_size"])
    H, W = (int(v) for v in manifest["image_size"])
    if patch_size < 1:
        raise SceneValidationError("patch_size must be >= 1")
    if H % patch_size or W % patch_size:
        raise SceneValidationError(
            f"image size {H}x{W} not a multiple of patch_size {patch_size}"
        )
    view_entries = manifest.get("views", [])
    if not view_entries:
        raise SceneValidationError("scene has no views")

    cameras = _read_bin(scene_dir, manifest["cameras"], "cameras")
    if cameras.shape != (len(view_entries), 21):
        raise SceneValidationError(
            f"cameras: shape {cameras.shape}, want ({len(view_entries)}, 21)"
        )

    views = []
    for idx, entry in enumerate(view_entries):
        image = _read_image(scene_dir, entry["image"], f"view {idx} image")
        if image.shape != (H, W, 3):
            raise SceneValidationError(f"view {idx}: image shape {image.shape}")

        depth = _read_bin(scene_dir, entry["depth"], f"view {idx} depth")
        if depth.shape != (H, W):
            raise SceneValidationError(
                f"view {idx}: depth shape {depth.shape}, want {(H, W)}"
            )
        if not np.isfinite(depth).all() or (depth < 0).any():
            raise SceneValidationError(f"view {idx}: depth has negative or non-finite values")

        point_map = None
        if entry.get("point_map"):
            point_map = _read_bin(scene_dir, entry["point_map"], f"view {idx} point_map")
            if point_map.shape != (H, W, 3) or not np.isfinite(point_map).all():
                raise SceneValidationError(f"view {idx}: bad point_map")
            point_map = _freeze(point_map)

        camera = CameraParams(
            intrinsics=_freeze(cameras[idx, :9].reshape(3, 3).copy()),
            extrinsics=_freeze(cameras[idx, 9:].reshape(3, 4).copy()),
        )
        camera.validate(idx)

        masks = []
        seen_ids = set()
        for mask_entry in entry.get("masks", []):
            entity_id = int(mask_entry["entity_id"])
            if entity_id in seen_ids:
                raise SceneValidationError(f"view {idx}: duplicate entity id {entity_id}")
            seen_ids.add(entity_id)
            raw = _read_image(scene_dir, mask_entry, f"view {idx} mask {entity_id}")
            if raw.shape != (H, W):
                raise SceneValidationError(
                    f"view {idx}: mask {entity_id} shape {raw.shape}, want {(H, W)}"
                )
            pixels = raw > 0
            count = int(pixels.sum())
            if count == 0:
                raise SceneValidationError(f"view {idx}: mask {entity_id} is empty")
            if count != int(mask_entry["pixel_count"]):
                raise SceneValidationError(
                    f"view {idx}: mask {entity_id} has {count} pixels, "
                    f"manifest says {mask_entry['pixel_count']}"
                )
            masks.append(EntityMask(entity_id, pixels, count))

        views.append(
            ViewRecord(
                image=_freeze(image.copy()),
                camera=camera,
                depth=_freeze(depth),
                entity_masks=_resolve_mask_overlaps(masks, idx, warnings),
                point_map=point_map,
            )
        )

    _validate_attention_entries(manifest, scene_dir, len(views), H, W, patch_size)

    for msg in warnings:
        logger.warning("%s", msg)
    return SceneBundle(
        views=tuple(views),
        patch_size=patch_size,
        world_frame_note=manifest.get("world_frame", WORLD_FRAME_NOTE),
        load_warnings=tuple(warnings),
    )


def _validate_attention_entries(
    manifest: dict, scene_dir: Path, n_views: int, H: int, W: int, patch_size: int
) -> None:
    h, w = H // patch_size, W // patch_size
    for entry in manifest.get("attention", []):
        i, j = int(entry["query_view"]), int(entry["reference_view"])
        label = f"attention ({i}->{j}, mask {entry.get('mask_id')})"
        if i == j:
            raise SceneValidationError(f"{label}: self-pair not permitted")
        if not (0 <= i < n_views and 0 <= j < n_views):
            raise SceneValidationError(f"{label}: view index out of range")
        shape = entry["shape"]
        if len(shape) != 4 or shape[2] != h or shape[3] != w:
            raise SceneValidationError(
                f"{label}: shape {shape}, want [S, L, {h}, {w}]"
            )
        token_ids = entry.get("token_ids")
        if token_ids is None:
            if shape[0] != h * w:
                raise SceneValidationError(
                    f"{label}: whole-grid dump must have S = {h * w}, got {shape[0]}"
                )
        else:
            if len(token_ids) != shape[0]:
                raise SceneValidationError(
                    f"{label}: {len(token_ids)} token_ids for S = {shape[0]}"
                )
            for r, c in token_ids:
                if not (0 <= r < h and 0 <= c < w):
                    raise SceneValidationError(f"{label}: token ({r},{c}) out of grid")
        _check_payload_bytes(scene_dir, entry, label)


class AttentionRepository:
    """Lazy, cached access to a scene's attention dumps.

    Serves exact per-mask stacks or arbitrary row subsets, assembling the
    latter from a whole-grid dump when present, otherwise from whatever
    per-mask dumps cover the requested tokens.
    """

    def __init__(self, scene_dir: str | Path):
        self.scene_dir = Path(scene_dir)
        manifest = _read_manifest(self.scene_dir)
        self.patch_size = int(manifest["patch_size"])
        H, W = (int(v) for v in manifest["image_size"])
        self.grid_size = (H // self.patch_size, W // self.patch_size)
        self._entries: dict[tuple[int, int], list[dict]] = {}
        for entry in manifest.get("attention", []):
            key = (int(entry["query_view"]), int(entry["reference_view"]))
            self._entries.setdefault(key, []).append(entry)
        self._cache: dict[str, np.ndarray] = {}

    def _tensor(self, entry: dict) -> np.ndarray:
        path = entry["file"]
        if path not in self._cache:
            arr = _read_bin(self.scene_dir, entry, f"attention {path}")
            if not np.isfinite(arr).all() or (arr < 0).any():
                raise SceneValidationError(
                    f"attention {path}: negative or non-finite entries"
                )
            self._cache[path] = _freeze(arr)
        return self._cache[path]

    def has_any(self) -> bool:
        return bool(self._entries)

    def _pair_entries(self, i: int, j: int) -> list[dict]:
        if i == j:
            raise SceneValidationError("self-pair not permitted")
        return self._entries.get((i, j), [])

    def stack(self, i: int, j: int, mask_id: int | None = None) -> AttentionStack:
        """Return the dump recorded for (i, j, mask_id) exactly as stored."""
        for entry in self._pair_entries(i, j):
            if entry.get("mask_id") == mask_id:
                return self._build_stack(entry)
        raise AttentionUnavailableError(
            f"attention unavailable for pair ({i}->{j}), mask {mask_id}"
        )

    def rows(
        self, i: int, j: int, token_ids: "list[tuple[int, int]]"
    ) -> AttentionStack:
        """Assemble an AttentionStack holding exactly ``token_ids``, in order."""
        if not token_ids:
            raise SceneValidationError("empty token request")
        entries = self._pair_entries(i, j)
        if not entries:
            raise AttentionUnavailableError(
                f"attention unavailable for pair ({i}->{j}): no dumps"
            )
        h, w = self.grid_size
        whole = next((e for e in entries if e.get("token_ids") is None), None)
        if whole is not None:
            tensor = self._tensor(whole)
            flat = [r * w + c for r, c in token_ids]
            return AttentionStack(
                query_view=i,
                reference_view=j,
                tensor=tensor[flat],
                token_ids=tuple((int(r), int(c)) for r, c in token_ids),
                feature_dim=int(whole.get("feature_dim", 0)),
            )
        available: dict[tuple[int, int], tuple[dict, int]] = {}
        for entry in entries:
            for pos, tid in enumerate(entry["token_ids"]):
                available.setdefault((tid[0], tid[1]), (entry, pos))
        missing = [t for t in token_ids if tuple(t) not in available]
        if missing:
            raise AttentionUnavailableError(
                f"attention unavailable for pair ({i}->{j}): "
                f"{len(missing)} tokens not covered, e.g. {missing[0]}"
            )
        rows = [self._tensor(available[tuple(t)][0])[available[tuple(t)][1]] for t in token_ids]
        feature_dim = int(entries[0].get("feature_dim", 0))
        return AttentionStack(
            query_view=i,
            reference_view=j,
            tensor=np.stack(rows),
            token_ids=tuple((int(r), int(c)) for r, c in token_ids),
            feature_dim=feature_dim,
        )

    def _build_stack(self, entry: dict) -> AttentionStack:
        tensor = self._tensor(entry)
        h, w = self.grid_size
        token_ids = entry.get("token_ids")
        if token_ids is None:
            token_ids = [(r, c) for r in range(h) for c in range(w)]
        return AttentionStack(
            query_view=int(entry["query_view"]),
            reference_view=int(entry["reference_view"]),
            tensor=tensor,
            token_ids=tuple((int(r), int(c)) for r, c in token_ids),
            feature_dim=int(entry.get("feature_dim", 0)),
        )


def load_attention(
    scene_dir: str | Path,
    i: int,
    j: int,
    mask_id: int,
    occupancy_frac: float = 0.5,
) -> AttentionStack:
    """Load the attention stack for query mask ``mask_id`` of view i against view j.

    Prefers an exact (i, j, mask_id) dump; falls back to slicing a whole-grid
    (i, j) dump by the mask's occupied tokens.
    """
    repo = AttentionRepository(scene_dir)
    try:
        return repo.stack(i, j, mask_id)
    except AttentionUnavailableError:
        pass
    from .tokenizer import tokens_for_mask

    scene = load_scene(scene_dir)
    mask = scene.views[i].mask_by_id(mask_id)
    tokens = tokens_for_mask(mask, scene.patch_size, occupancy_frac, view=i)
    return repo.rows(i, j, list(tokens.grid_indices))


# --------------------------------------------------------------------------
# Writing


def _write_bin(path: Path, arr: np.ndarray, dtype: str) -> dict:
    path.parent.mkdir(parents=True, exist_ok=True)
    out = np.ascontiguousarray(arr, dtype=_DTYPES[dtype])
    out.tofile(path)
    return {"shape": list(arr.shape), "dtype": dtype}


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path, format="PNG")


def save_scene(
    bundle: SceneBundle,
    scene_dir: str | Path,
    attention: "list[tuple[AttentionStack, int | None]] | None" = None,
) -> None:
    """Write a scene directory in the interchange layout.

    ``attention`` pairs each stack with the entity id of its query mask, or
    None for a whole-grid dump.
    """
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    H, W = bundle.image_size

    view_entries = []
    cameras = np.zeros((bundle.N, 21), dtype=np.float64)
    for idx, view in enumerate(bundle.views):
        cameras[idx, :9] = view.camera.intrinsics.reshape(-1)
        cameras[idx, 9:] = view.camera.extrinsics.reshape(-1)

        image_file = f"images/{idx:04d}.png"
        _write_png(scene_dir / image_file, view.image)
        depth_file = f"depth/{idx:04d}.bin"
        depth_meta = _write_bin(scene_dir / depth_file, view.depth, "float32")

        point_entry = None
        if view.point_map is not None:
            point_file = f"points/{idx:04d}.bin"
            point_entry = {
                "file": point_file,
                **_write_bin(scene_dir / point_file, view.point_map, "float32"),
            }

        mask_entries = []
        for mask in view.entity_masks:
            mask_file = f"masks/{idx:04d}_{mask.entity_id}.png"
            _write_png(scene_dir / mask_file, mask.pixels.astype(np.uint8) * 255)
            mask_entries.append(
                {
                    "entity_id": mask.entity_id,
                    "file": mask_file,
                    "shape": [H, W],
                    "dtype": "uint8",
                    "pixel_count": mask.pixel_count,
                }
            )

        view_entries.append(
            {
                "index": idx,
                "image": {"file": image_file, "shape": [H, W, 3], "dtype": "uint8"},
                "depth": {"file": depth_file, **depth_meta},
                "point_map": point_entry,
                "masks": mask_entries,
            }
        )

    cam_meta = _write_bin(scene_dir / "cameras.bin", cameras, "float64")

    attention_entries = []
    h, w = bundle.grid_size
    for stack, mask_id in attention or []:
        tag = "all" if mask_id is None else str(mask_id)
        att_file = f"attention/{stack.query_view}_{stack.reference_view}_{tag}.bin"
        meta = _write_bin(scene_dir / att_file, stack.tensor, "float32")
        whole_grid = mask_id is None and stack.S == h * w
        attention_entries.append(
            {
                "query_view": stack.query_view,
                "reference_view": stack.reference_view,
                "mask_id": mask_id,
                "file": att_file,
                **meta,
                "token_ids": None if whole_grid else [list(t) for t in stack.token_ids],
                "feature_dim": stack.feature_dim,
            }
        )

    manifest = {
        "format_version": FORMAT_VERSION,
        "world_frame": bundle.world_frame_note,
        "patch_size": bundle.patch_size,
        "image_size": [H, W],
        "views": view_entries,
        "cameras": {"file": "cameras.bin", **cam_meta},
        "attention": attention_entries,
    }
    with open(scene_dir / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_prior_masks(out_dir: str | Path, priors: "list") -> None:
    """Write per-view prior masks (255 = static, 0 = potential transient).

    Alongside the images, ``priors.json`` records per-entity classifications,
    score sums and the per-view match records for auditability.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        summary = {"views": []}
        for prior in priors:
            mask_file = f"prior_{prior.view:04d}.png"
            _write_png(out_dir / mask_file, prior.static_map.astype(np.uint8) * 255)
            entities = []
            for entity_id in sorted(prior.per_entity):
                decision = prior.per_entity[entity_id]
                entities.append(
                    {
                        "entity_id": entity_id,
                        "classification": decision.classification,
                        "score_sum": decision.score_sum,
                        "records": [r.to_dict() for r in decision.records],
                    }
                )
            summary["views"].append(
                {"view": prior.view, "file": mask_file, "entities": entities}
            )
        with open(out_dir / "priors.json", "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise SceneLoadError(f"cannot write prior masks to {out_dir}: {exc}") from exc


def load_prior_mask_images(out_dir: str | Path) -> dict[int, np.ndarray]:
    """Reload saved prior masks as {view index: H x W bool static map}."""
    out_dir = Path(out_dir)
    with open(out_dir / "priors.json", "r", encoding="utf-8") as fh:
        summary = json.load(fh)
    result = {}
    for entry in summary["views"]:
        arr = np.asarray(Image.open(out_dir / entry["file"]))
        result[int(entry["view"])] = arr > 0
    return result
