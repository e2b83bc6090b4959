import numpy as np
import pytest

from maskprior.scene_io import (
    CameraParams,
    EntityMask,
    SceneBundle,
    ViewRecord,
    load_scene,
)
from maskprior.synth import SynthSpec, generate


@pytest.fixture(scope="session")
def synth_result(tmp_path_factory):
    """One deterministic 4-view scene with 5 static + 1 transient entity."""
    out = tmp_path_factory.mktemp("scene") / "synth7"
    result = generate(
        SynthSpec(seed=7, num_views=4, num_entities=6, num_transients=1),
        out_dir=out,
    )
    return out, result


@pytest.fixture(scope="session")
def scene_dir(synth_result):
    return synth_result[0]


@pytest.fixture(scope="session")
def scene(scene_dir):
    return load_scene(scene_dir)


def make_camera(f: float = 40.0, cx: float = 16.0, cy: float = 16.0) -> CameraParams:
    K = np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])
    E = np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1)
    return CameraParams(intrinsics=K, extrinsics=E)


def make_view(
    size: int = 32,
    masks: tuple[EntityMask, ...] = (),
    depth_value: float = 1.0,
    camera: CameraParams | None = None,
) -> ViewRecord:
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    depth = np.full((size, size), depth_value, dtype=np.float32)
    return ViewRecord(
        image=image,
        camera=camera or make_camera(cx=size / 2, cy=size / 2),
        depth=depth,
        entity_masks=masks,
    )


def make_mask(size: int, entity_id: int, slices) -> EntityMask:
    pixels = np.zeros((size, size), dtype=bool)
    pixels[slices] = True
    return EntityMask(entity_id, pixels, int(pixels.sum()))


def make_bundle(views, patch_size: int = 16) -> SceneBundle:
    return SceneBundle(views=tuple(views), patch_size=patch_size)
