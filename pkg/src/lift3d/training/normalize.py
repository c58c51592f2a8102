"""Network input normalisation and decoding of network output to absolute
camera-frame poses.

Inputs are root-relative pixel offsets divided by the image diagonal, so the
apparent size of the subject (and with it depth) survives normalisation.

The network's ``3N`` outputs are read in units of ``OUTPUT_SCALE`` mm: every
non-root joint gives its offset from the root, and the root's z channel
gives the root depth. The root's absolute position is then the
back-projection of its detected pixel at that depth::

    X_root = ((u_r - cx) / fx * Z, (v_r - cy) / fy * Z, Z)

The root's x and y output channels are unused.
"""

from __future__ import annotations

import numpy as np

from ..geometry import Camera
from ..skeleton import Sequence2D

OUTPUT_SCALE = 1000.0


def image_diagonal(cam: Camera, image_size=None) -> float:
    """Image diagonal in pixels; defaults to a principal point at the image centre."""
    if image_size is None:
        w, h = 2.0 * cam.intrinsics.cx, 2.0 * cam.intrinsics.cy
    else:
        w, h = image_size
    return float(np.hypot(w, h))


def normalize_coords(uv: np.ndarray, root: int, diag: float) -> np.ndarray:
    """``(..., T, N, 2)`` pixels -> ``(..., 2N, T)`` network channels."""
    uv = np.asarray(uv, dtype=np.float64)
    rel = (uv - uv[..., root:root + 1, :]) / diag
    shape = rel.shape[:-2] + (rel.shape[-2] * 2,)
    return np.swapaxes(rel.reshape(shape), -1, -2)


def normalize_input(seq: Sequence2D, cam: Camera, root: int = 0, image_size=None) -> np.ndarray:
    """Root-centred, diagonal-scaled ``(2N, T)`` network input for one sequence."""
    return normalize_coords(seq.coords, root, image_diagonal(cam, image_size))


def denormalize(x: np.ndarray, root_uv: np.ndarray, diag: float) -> np.ndarray:
    """Inverse of :func:`normalize_coords` given the root pixel track ``(T, 2)``."""
    x = np.swapaxes(np.asarray(x, dtype=np.float64), -1, -2)
    rel = x.reshape(x.shape[:-1] + (-1, 2)) * diag
    return rel + np.asarray(root_uv)[..., None, :]


def back_projection_rays(root_uv: np.ndarray, fx, fy, cx, cy) -> np.ndarray:
    """``(..., 2)`` root pixels -> ``(..., 3)`` rays ``(a, b, 1)`` with ``X = Z * ray``."""
    root_uv = np.asarray(root_uv, dtype=np.float64)
    fx, fy, cx, cy = (np.asarray(v, dtype=np.float64) for v in (fx, fy, cx, cy))
    a = (root_uv[..., 0] - cx) / fx
    b = (root_uv[..., 1] - cy) / fy
    return np.stack([a, b, np.ones_like(a)], axis=-1)


def decode_output(raw: np.ndarray, rays: np.ndarray, root: int = 0) -> np.ndarray:
    """Network output ``(B, 3N, T)`` -> camera-frame poses ``(B, T, N, 3)`` in mm.

    ``rays`` is ``(B, T, 3)`` from :func:`back_projection_rays`.
    """
    B, ch, T = raw.shape
    r = raw.reshape(B, ch // 3, 3, T).transpose(0, 3, 1, 2) * OUTPUT_SCALE
    depth = r[:, :, root, 2]
    rel = r.copy()
    rel[:, :, root, :] = 0.0
    return rel + (depth[..., None] * rays)[:, :, None, :]


def decode_backward(grad_pose: np.ndarray, rays: np.ndarray, root: int = 0) -> np.ndarray:
    """Gradient of :func:`decode_output` with respect to the raw output."""
    B, T, N, _ = grad_pose.shape
    g = grad_pose.copy()
    g_depth = np.einsum("btnk,btk->bt", grad_pose, rays)
    g[:, :, root, :] = 0.0
    g[:, :, root, 2] = g_depth
    return g.transpose(0, 2, 3, 1).reshape(B, 3 * N, T) * OUTPUT_SCALE


def encode_target(pose: np.ndarray, root: int = 0) -> np.ndarray:
    """Raw-output values that decode to ``pose`` (``(..., N, 3)`` camera frame).

    Used to initialise the output bias at the mean target.
    """
    pose = np.asarray(pose, dtype=np.float64)
    raw = pose - pose[..., root:root + 1, :]
    raw[..., root, 2] = pose[..., root, 2]
    return raw / OUTPUT_SCALE
