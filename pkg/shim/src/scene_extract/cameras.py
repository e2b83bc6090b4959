"""Conversion from the model's 9-parameter camera encoding to K / [R|t].

The encoding is [qw, qx, qy, qz, tx, ty, tz, fov_x, fov_y]: a world-to-camera
rotation quaternion, the translation of the world-to-camera transform, and
horizontal/vertical fields of view in radians. The principal point sits at
the image center.
"""

import numpy as np


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Unit-normalized quaternion (w, x, y, z) to a 3x3 rotation matrix."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm == 0:
        raise ValueError("zero quaternion")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def camera_from_encoding(encoding: np.ndarray, image_size: tuple[int, int]):
    """Decode one 9-vector into (intrinsics 3x3, extrinsics 3x4)."""
    encoding = np.asarray(encoding, dtype=np.float64)
    if encoding.shape != (9,):
        raise ValueError(f"camera encoding must have 9 entries, got {encoding.shape}")
    H, W = image_size
    R = rotation_from_quaternion(encoding[:4])
    t = encoding[4:7]
    fov_x, fov_y = encoding[7], encoding[8]
    if not (0 < fov_x < np.pi and 0 < fov_y < np.pi):
        raise ValueError(f"fov out of range: {fov_x}, {fov_y}")
    fx = W / (2.0 * np.tan(fov_x / 2.0))
    fy = H / (2.0 * np.tan(fov_y / 2.0))
    K = np.array([[fx, 0.0, W / 2.0], [0.0, fy, H / 2.0], [0.0, 0.0, 1.0]])
    extrinsics = np.concatenate([R, t[:, None]], axis=1)
    return K, extrinsics
