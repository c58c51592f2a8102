"""Pinhole cameras, rigid camera transforms and DLT triangulation.

Conventions
-----------
* ``R`` maps world to camera axes and ``T`` is the camera centre in world
  coordinates, so ``X_c = R (X_w - T)``.
* Camera axes: x right, y down, z forward (depth).
* The transform between two cameras composes as ``X_c = R_rel X_c' + T_rel``
  with ``R_rel = R_c R_c'^T`` and ``T_rel = R_c (T_c' - T_c)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BehindCameraError,
    CoordinateFrameError,
    DegenerateGeometryError,
    InsufficientViewsError,
)
from .skeleton import WORLD, Pose2D, Pose3D, camera_frame

ORTHO_TOL = 1e-9
# observations below this confidence are left out of the DLT system
MIN_CONFIDENCE = 0.05


def _check_rotation(R: np.ndarray, what: str = "R") -> None:
    if R.shape != (3, 3):
        raise ValueError(f"{what} must be 3x3, got {R.shape}")
    if not np.allclose(R @ R.T, np.eye(3), atol=ORTHO_TOL, rtol=0):
        raise ValueError(f"{what} is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError(f"{what} must have determinant +1")


def _ro(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraExtrinsics:
    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        R = _ro(self.R)
        T = _ro(self.T).reshape(3)
        T.flags.writeable = False
        _check_rotation(R)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", T)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Camera:
    id: str
    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics

    @property
    def frame(self) -> str:
        return camera_frame(self.id)

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.T

    def to_dict(self) -> dict:
        k = self.intrinsics
        return {
            "id": self.id,
            "fx": k.fx,
            "fy": k.fy,
            "cx": k.cx,
            "cy": k.cy,
            "R": [float(v) for v in self.extrinsics.R.ravel()],
            "T": [float(v) for v in self.extrinsics.T],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            str(d["id"]),
            CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"])),
            CameraExtrinsics(np.reshape(d["R"], (3, 3)), d["T"]),
        )


@dataclass(frozen=True)
class RelativeTransform:
    R_rel: np.ndarray
    T_rel: np.ndarray

    def __post_init__(self):
        R = _ro(self.R_rel)
        _check_rotation(R, "R_rel")
        object.__setattr__(self, "R_rel", R)
        object.__setattr__(self, "T_rel", _ro(self.T_rel).reshape(3))

    def inverse(self) -> "RelativeTransform":
        return RelativeTransform(self.R_rel.T, -self.R_rel.T @ self.T_rel)


def save_rig(cameras: Sequence[Camera], path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=2))


def load_rig(path) -> list:
    cams = [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]
    ids = [c.id for c in cams]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate camera ids in rig: {ids}")
    return cams


# --- rigid transforms -------------------------------------------------------

def world_to_camera_coords(X: np.ndarray, e: CameraExtrinsics) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - e.T) @ e.R.T


def camera_to_world_coords(X: np.ndarray, e: CameraExtrinsics) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ e.R + e.T


def apply_relative_coords(X: np.ndarray, t: RelativeTransform) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ t.R_rel.T + t.T_rel


def _split_camera(e, cam_id):
    if isinstance(e, Camera):
        return e.extrinsics, e.id if cam_id is None else cam_id
    return e, "c" if cam_id is None else cam_id


def world_to_camera(p: Pose3D, e, cam_id=None) -> Pose3D:
    """Express a world-frame pose in a camera frame: ``X_c = R (X_w - T)``.

    ``e`` is a :class:`Camera` or bare :class:`CameraExtrinsics`; the output
    frame tag uses the camera id (or ``cam_id``).
    """
    e, cam_id = _split_camera(e, cam_id)
    if p.frame != WORLD:
        raise CoordinateFrameError(f"expected a world pose, got frame {p.frame!r}")
    return Pose3D(world_to_camera_coords(p.coords, e), camera_frame(cam_id))


def camera_to_world(p: Pose3D, e) -> Pose3D:
    e, _ = _split_camera(e, None)
    if p.frame == WORLD:
        raise CoordinateFrameError("expected a camera-frame pose, got a world pose")
    return Pose3D(camera_to_world_coords(p.coords, e), WORLD)


def relative_transform(src, dst) -> RelativeTransform:
    """Transform taking coordinates in camera ``src`` to camera ``dst``."""
    src, _ = _split_camera(src, None)
    dst, _ = _split_camera(dst, None)
    return RelativeTransform(dst.R @ src.R.T, dst.R @ (src.T - dst.T))


def apply_relative(p: Pose3D, t: RelativeTransform, dst_id: str, src_id=None) -> Pose3D:
    """Map a pose from camera ``src`` to camera ``dst`` with ``X = R_rel X' + T_rel``."""
    if p.frame == WORLD:
        raise CoordinateFrameError("apply_relative expects a camera-frame pose")
    if src_id is not None and p.frame != camera_frame(src_id):
        raise CoordinateFrameError(
            f"pose is in {p.frame!r}, transform expects {camera_frame(src_id)!r}"
        )
    return Pose3D(apply_relative_coords(p.coords, t), camera_frame(dst_id))


# --- projection -------------------------------------------------------------

def projection_matrix(cam: Camera) -> np.ndarray:
    """``P = K [R | -R T]``."""
    R, T = cam.extrinsics.R, cam.extrinsics.T
    return cam.intrinsics.K @ np.hstack([R, (-R @ T)[:, None]])


def project_coords(X: np.ndarray, cam: Camera, check_depth: bool = True) -> np.ndarray:
    """Project world points ``(..., 3)`` to pixels ``(..., 2)``."""
    Xc = world_to_camera_coords(X, cam.extrinsics)
    z = Xc[..., 2]
    if check_depth and np.any(z <= 0):
        bad = np.argwhere(np.atleast_1d(z <= 0))[0]
        raise BehindCameraError(
            f"point {tuple(int(i) for i in bad)} has non-positive depth in camera {cam.id}"
        )
    k = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * Xc[..., 0] / z + k.cx
        v = k.fy * Xc[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1)


def project(p: Pose3D, cam: Camera, joint_names=None) -> Pose2D:
    """Pinhole projection of a world pose; raises if a joint is not in front."""
    if p.frame != WORLD:
        raise CoordinateFrameError(f"expected a world pose, got frame {p.frame!r}")
    z = world_to_camera_coords(p.coords, cam.extrinsics)[:, 2]
    bad = np.flatnonzero(z <= 0)
    if bad.size:
        j = int(bad[0])
        name = joint_names[j] if joint_names is not None else str(j)
        raise BehindCameraError(f"joint {name} is behind camera {cam.id} (depth {z[j]:.3f})")
    return Pose2D(project_coords(p.coords, cam, check_depth=False))


# --- DLT triangulation -------------------------------------------------------

def hartley_transform(points: np.ndarray, mask=None) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2).

    ``points`` is ``(..., M, 2)``; returns ``(..., 3, 3)``. Sets with no spread
    get a pure translation.
    """
    pts = np.asarray(points, dtype=np.float64)
    if mask is None:
        mask = np.ones(pts.shape[:-1], dtype=bool)
    w = mask.astype(np.float64)
    cnt = np.maximum(w.sum(axis=-1), 1.0)
    centroid = (pts * w[..., None]).sum(axis=-2) / cnt[..., None]
    dist = np.linalg.norm(pts - centroid[..., None, :], axis=-1)
    mean_d = (dist * w).sum(axis=-1) / cnt
    scale = np.where(mean_d > 1e-12, np.sqrt(2.0) / np.where(mean_d > 1e-12, mean_d, 1.0), 1.0)
    H = np.zeros(pts.shape[:-2] + (3, 3))
    H[..., 0, 0] = scale
    H[..., 1, 1] = scale
    H[..., 0, 2] = -scale * centroid[..., 0]
    H[..., 1, 2] = -scale * centroid[..., 1]
    H[..., 2, 2] = 1.0
    return H


def camera_centers(P: np.ndarray) -> np.ndarray:
    """Camera centres (null vectors) of ``(..., 3, 4)`` projection matrices."""
    _, _, Vt = np.linalg.svd(P)
    c = Vt[..., -1, :]
    return c[..., :3] / c[..., 3:4]


def world_conditioning(P: np.ndarray) -> np.ndarray:
    """``4x4`` map ``X = S X'`` that centres the cameras and scales their
    mean distance from the centroid to sqrt(3).

    Accepts ``(C, 3, 4)`` (one shared transform) or ``(M, C, 3, 4)``.
    """
    centers = camera_centers(P)
    mu = centers.mean(axis=-2)
    spread = np.linalg.norm(centers - mu[..., None, :], axis=-1).mean(axis=-1)
    spread = np.where(spread > 1e-12, spread, 1.0)
    S = np.zeros(mu.shape[:-1] + (4, 4))
    k = spread / np.sqrt(3.0)
    S[..., 0, 0] = S[..., 1, 1] = S[..., 2, 2] = k
    S[..., :3, 3] = mu
    S[..., 3, 3] = 1.0
    return S if S.ndim == 2 else S[:, None]


@dataclass
class DLTResult:
    points: np.ndarray  # (M, 3)
    residual: np.ndarray  # (M,) RMS reprojection error in px
    valid: np.ndarray  # (M,) bool
    reason: np.ndarray  # (M,) object: None or failure label


def dlt_batch(uv, P, used, H=None, min_views: int = 2, rank_tol: float = 1e-10,
              refine: int = 2) -> DLTResult:
    """Triangulate ``M`` points seen by ``C`` views in one batched SVD.

    Parameters
    ----------
    uv : (M, C, 2) pixel observations
    P : (C, 3, 4) or (M, C, 3, 4) projection matrices
    used : (M, C) bool, which observations enter the system
    H : (M, C, 3, 3) or (C, 3, 3) optional image normalisations (Hartley)
    refine : int
        Re-solves with each view's rows divided by that view's projective
        depth at the previous estimate. The algebraic error then approximates
        the reprojection error, removing plain DLT's bias towards distant
        views. ``0`` gives the plain linear solution.
    """
    uv = np.asarray(uv, dtype=np.float64)
    M, C = uv.shape[:2]
    used = np.asarray(used, dtype=bool)
    P = np.asarray(P, dtype=np.float64)
    S = world_conditioning(P)
    P = np.broadcast_to(P, (M, C, 3, 4))
    if H is None:
        H = np.broadcast_to(np.eye(3), (M, C, 3, 3))
    H = np.broadcast_to(H, (M, C, 3, 3))

    # condition both the image and the world side, then scale each view's
    # matrix to unit norm so the solution ignores per-view scaling of P
    Pn = H @ P @ S
    Pn = Pn / np.linalg.norm(Pn, axis=(-2, -1), keepdims=True)
    uvh = np.concatenate([uv, np.ones((M, C, 1))], axis=-1)
    xn = np.einsum("mcij,mcj->mci", H, uvh)
    xn = xn[..., :2] / xn[..., 2:3]

    rows_u = xn[..., 0:1] * Pn[..., 2, :] - Pn[..., 0, :]
    rows_v = xn[..., 1:2] * Pn[..., 2, :] - Pn[..., 1, :]
    A0 = np.stack([rows_u, rows_v], axis=2) * used[..., None, None]

    _, s, Vt = np.linalg.svd(A0.reshape(M, 2 * C, 4))
    for _ in range(refine):
        depth_n = np.abs(np.einsum("mcj,mj->mc", Pn[..., 2, :], Vt[:, -1, :]))
        wts = np.where(used & (depth_n > 1e-12), 1.0 / np.where(depth_n > 1e-12, depth_n, 1.0), 0.0)
        wts /= np.maximum(wts.max(axis=1, keepdims=True), 1e-300)
        wts = np.where(used & (wts == 0), 1.0, wts)
        _, s, Vt = np.linalg.svd((A0 * wts[..., None, None]).reshape(M, 2 * C, 4))
    Xh = np.einsum("...ij,...j->...i", S, Vt[:, -1, :])
    n_views = used.sum(axis=1)

    reason = np.full(M, None, dtype=object)
    valid = np.ones(M, dtype=bool)

    few = n_views < min_views
    reason[few] = "insufficient-views"
    valid &= ~few

    # a two-dimensional null space means the views cannot separate depth
    rank_def = s[:, 2] <= rank_tol * np.maximum(s[:, 0], 1e-300)
    bad = rank_def & valid
    reason[bad] = "degenerate-geometry"
    valid &= ~bad

    w = Xh[:, 3]
    bad = (np.abs(w) < 1e-12 * np.linalg.norm(Xh, axis=1)) & valid
    reason[bad] = "degenerate-geometry"
    valid &= ~bad

    safe_w = np.where(np.abs(w) > 0, w, 1.0)
    X = Xh[:, :3] / safe_w[:, None]

    proj = np.einsum("mcij,mj->mci", P, np.concatenate([X, np.ones((M, 1))], axis=1))
    depth = proj[..., 2]
    # the DLT sign ambiguity is fixed by dehomogenising, so a point at or behind
    # a camera that observed it is a genuine geometric failure
    behind = np.any((depth <= 1e-9 * np.abs(proj).max(axis=-1).clip(min=1.0)) & used, axis=1) & valid
    reason[behind] = "degenerate-geometry"
    valid &= ~behind

    with np.errstate(divide="ignore", invalid="ignore"):
        reproj = proj[..., :2] / depth[..., None]
    err2 = np.where(used, ((reproj - uv) ** 2).sum(axis=-1), 0.0)
    residual = np.sqrt(err2.sum(axis=1) / np.maximum(n_views, 1))
    residual = np.where(valid, residual, np.nan)
    X = np.where(valid[:, None], X, np.nan)
    return DLTResult(X, residual, valid, reason)


def triangulate_point(obs, min_views: int = 2):
    """Linear triangulation of one 3D point.

    Parameters
    ----------
    obs : list of (point2d, projection_matrix)
        Pixel observation and 3x4 projection matrix per view.

    Returns
    -------
    point : (3,) ndarray
    residual : float
        RMS reprojection error in pixels over the views used.
    """
    if len(obs) < min_views:
        raise InsufficientViewsError(f"{len(obs)} observations, need at least {min_views}")
    uv = np.array([np.asarray(o[0], dtype=np.float64).reshape(2) for o in obs])[None]
    P = np.array([np.asarray(o[1], dtype=np.float64).reshape(3, 4) for o in obs])
    H = hartley_transform(uv[0])
    res = dlt_batch(uv, P, np.ones(uv.shape[:2], dtype=bool), H=H, min_views=min_views)
    if not res.valid[0]:
        raise DegenerateGeometryError("triangulation is degenerate for this view configuration")
    return res.points[0], float(res.residual[0])


@dataclass
class TriangulatedPose:
    pose: Pose3D
    residuals: np.ndarray
    valid: np.ndarray


def triangulate_coords(uv, conf, cameras: Sequence[Camera], min_views: int = 2,
                       min_confidence: float = MIN_CONFIDENCE):
    """Triangulate every joint of every frame.

    Parameters
    ----------
    uv : (C, T, N, 2) detections per camera
    conf : (C, T, N) confidences or None

    Returns
    -------
    points : (T, N, 3) world coordinates, NaN where invalid
    residuals : (T, N)
    valid : (T, N) bool
    """
    uv = np.asarray(uv, dtype=np.float64)
    C, T, N, _ = uv.shape
    if len(cameras) != C:
        raise ValueError(f"{C} detection streams for {len(cameras)} cameras")
    if C < min_views:
        raise InsufficientViewsError(f"{C} cameras, need at least {min_views}")
    if conf is None:
        used = np.ones((C, T, N), dtype=bool)
    else:
        used = np.asarray(conf) >= min_confidence
    used &= np.all(np.isfinite(uv), axis=-1)
    uv = np.where(used[..., None], uv, 0.0)
    H = hartley_transform(uv, used)  # (C, T, 3, 3) per view and frame
    P = np.stack([projection_matrix(c) for c in cameras])

    uv_m = uv.transpose(1, 2, 0, 3).reshape(T * N, C, 2)
    used_m = used.transpose(1, 2, 0).reshape(T * N, C)
    H_m = np.broadcast_to(H.transpose(1, 0, 2, 3)[:, None], (T, N, C, 3, 3)).reshape(T * N, C, 3, 3)
    res = dlt_batch(uv_m, P, used_m, H=H_m, min_views=min_views)
    return (
        res.points.reshape(T, N, 3),
        res.residual.reshape(T, N),
        res.valid.reshape(T, N),
    )


def triangulate_pose(views, min_views: int = 2,
                     min_confidence: float = MIN_CONFIDENCE) -> TriangulatedPose:
    """Triangulate all joints of a pose from ``(Pose2D, Camera)`` views.

    Joints that cannot be triangulated are marked invalid (their coordinates
    are set to zero in the returned pose); the call only fails if no joint
    survives.
    """
    if len(views) < min_views:
        raise InsufficientViewsError(f"{len(views)} views, need at least {min_views}")
    n = {v[0].num_joints for v in views}
    if len(n) != 1:
        raise ValueError(f"views disagree on joint count: {sorted(n)}")
    uv = np.stack([v[0].coords for v in views])[:, None]
    conf = np.stack([
        v[0].confidence if v[0].confidence is not None else np.ones(v[0].num_joints)
        for v in views
    ])[:, None]
    pts, resid, valid = triangulate_coords(uv, conf, [v[1] for v in views], min_views, min_confidence)
    if not valid.any():
        raise DegenerateGeometryError("no joint of the pose could be triangulated")
    coords = np.where(valid[0][:, None], pts[0], 0.0)
    return TriangulatedPose(Pose3D(coords, WORLD), resid[0], valid[0])
