"""Writer for the maskprior scene-directory interchange format.

Implements the documented layout independently of the consumer package:
a ``manifest.json`` root manifest listing every tensor (name, shape, dtype,
file), 8-bit PNG images/masks, and raw little-endian row-major binaries for
depth, cameras (N x 21 float64: 3x3 intrinsics + 3x4 extrinsics) and
attention rows (float32 S x L x h x w, head-averaged, post-softmax, per
global layer).
"""

import json
from pathlib import Path

import numpy as np
from PIL import Image

FORMAT_VERSION = 1
WORLD_FRAME_NOTE = "first-camera frame"


class SceneWriter:
    def __init__(self, out_dir: str | Path, patch_size: int, image_size: tuple[int, int]):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.patch_size = patch_size
        self.image_size = tuple(int(v) for v in image_size)
        self.views: list[dict] = []
        self.attention: list[dict] = []
        self._cameras: list[np.ndarray] = []

    def _png(self, rel: str, array: np.ndarray) -> None:
        path = self.out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(array).save(path, format="PNG")

    def _bin(self, rel: str, array: np.ndarray, dtype: str) -> dict:
        path = self.out_dir / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<")).tofile(path)
        return {"file": rel, "shape": list(array.shape), "dtype": dtype}

    def add_view(
        self,
        image: np.ndarray,
        intrinsics: np.ndarray,
        extrinsics: np.ndarray,
        depth: np.ndarray,
        masks: dict[int, np.ndarray],
        point_map: np.ndarray | None = None,
    ) -> int:
        index = len(self.views)
        H, W = self.image_size
        assert image.shape == (H, W, 3) and depth.shape == (H, W)
        image_file = f"images/{index:04d}.png"
        self._png(image_file, image.astype(np.uint8))
        depth_entry = self._bin(f"depth/{index:04d}.bin", depth, "float32")
        point_entry = None
        if point_map is not None:
            point_entry = self._bin(f"points/{index:04d}.bin", point_map, "float32")
        mask_entries = []
        for entity_id in sorted(masks):
            pixels = masks[entity_id].astype(bool)
            mask_file = f"masks/{index:04d}_{entity_id}.png"
            self._png(mask_file, pixels.astype(np.uint8) * 255)
            mask_entries.append(
                {
                    "entity_id": int(entity_id),
                    "file": mask_file,
                    "shape": [H, W],
                    "dtype": "uint8",
                    "pixel_count": int(pixels.sum()),
                }
            )
        self._cameras.append(
            np.concatenate([np.asarray(intrinsics).reshape(-1), np.asarray(extrinsics).reshape(-1)])
        )
        self.views.append(
            {
                "index": index,
                "image": {"file": image_file, "shape": [H, W, 3], "dtype": "uint8"},
                "depth": depth_entry,
                "point_map": point_entry,
                "masks": mask_entries,
            }
        )
        return index

    def add_attention(
        self,
        query_view: int,
        reference_view: int,
        mask_id: int | None,
        tensor: np.ndarray,
        token_ids: list[tuple[int, int]] | None,
        feature_dim: int,
    ) -> None:
        tag = "all" if mask_id is None else str(mask_id)
        rel = f"attention/{query_view}_{reference_view}_{tag}.bin"
        entry = self._bin(rel, tensor, "float32")
        self.attention.append(
            {
                "query_view": query_view,
                "reference_view": reference_view,
                "mask_id": mask_id,
                **entry,
                "token_ids": None if token_ids is None else [list(t) for t in token_ids],
                "feature_dim": int(feature_dim),
            }
        )

    def finish(self, extra: dict | None = None) -> Path:
        H, W = self.image_size
        cameras = np.stack(self._cameras) if self._cameras else np.zeros((0, 21))
        cam_entry = self._bin("cameras.bin", cameras, "float64")
        manifest = {
            "format_version": FORMAT_VERSION,
            "world_frame": WORLD_FRAME_NOTE,
            "patch_size": self.patch_size,
            "image_size": [H, W],
            "views": self.views,
            "cameras": cam_entry,
            "attention": self.attention,
        }
        if extra:
            manifest["extraction"] = extra
        path = self.out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
