"""Synthetic multi-camera capture: articulated motion, camera rigs, noisy
detections and the on-disk dataset bundle.

World frame: z up, the rig looks at the origin, the pelvis moves around it.

Bundle layout::

    rig.json            cameras (see :mod:`lift3d.geometry`)
    gt3d.csv            frame, joint, x, y, z            (mm, world)
    det2d_<camid>.csv   frame, joint, u, v, confidence   (px)
    meta.json           fps, joint set, clips (action, start, stop), generator settings
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DatasetError
from .geometry import Camera, CameraExtrinsics, CameraIntrinsics, load_rig, save_rig, world_to_camera_coords
from .metrics import ACTIONS
from .skeleton import H36M, WORLD, JointSet, Sequence2D, Sequence3D

# Bone lengths (mm) of the default 17-joint layout, indexed by child joint.
H36M_BONES = {
    1: 132.0, 2: 442.0, 3: 454.0, 4: 132.0, 5: 442.0, 6: 454.0,
    7: 233.0, 8: 257.0, 9: 121.0, 10: 115.0,
    11: 151.0, 12: 278.0, 13: 251.0, 14: 151.0, 15: 278.0, 16: 251.0,
}

# Rest directions in the body frame (x left, y forward, z up), indexed by child joint.
_REST_DIRS = {
    1: (-1, 0, 0), 2: (0, 0, -1), 3: (0, 0, -1),
    4: (1, 0, 0), 5: (0, 0, -1), 6: (0, 0, -1),
    7: (0, 0, 1), 8: (0, 0, 1), 9: (0, 0.25, 1), 10: (0, 0.1, 1),
    11: (1, 0, 0), 12: (0, 0, -1), 13: (0, 0.2, -1),
    14: (-1, 0, 0), 15: (0, 0, -1), 16: (0, 0.2, -1),
}

# Per-action style: (leg swing, arm swing, torso sway, gait Hz, walking speed factor)
_STYLES = {
    "Directions": (0.25, 0.6, 0.15, 0.6, 0.3),
    "Discussion": (0.15, 0.8, 0.2, 0.7, 0.2),
    "Eating": (0.1, 0.5, 0.1, 0.5, 0.1),
    "Greeting": (0.25, 1.0, 0.2, 0.8, 0.3),
    "Phoning": (0.2, 0.4, 0.15, 0.6, 0.3),
    "Photo": (0.2, 0.7, 0.25, 0.5, 0.2),
    "Posing": (0.3, 0.9, 0.3, 0.4, 0.1),
    "Purchases": (0.35, 0.5, 0.3, 0.8, 0.5),
    "Sitting": (0.1, 0.3, 0.35, 0.4, 0.05),
    "SittingDown": (0.5, 0.3, 0.45, 0.3, 0.05),
    "Smoking": (0.15, 0.5, 0.1, 0.5, 0.2),
    "Waiting": (0.15, 0.3, 0.2, 0.4, 0.2),
    "WalkDog": (0.5, 0.5, 0.2, 1.0, 0.8),
    "Walking": (0.55, 0.5, 0.1, 1.0, 1.0),
    "WalkTogether": (0.5, 0.4, 0.1, 0.9, 0.9),
}

# articulated joints whose local rotation drives their children
_LEG_JOINTS = (1, 2, 4, 5)
_ARM_JOINTS = (11, 12, 14, 15)
_TORSO_JOINTS = (0, 7, 8, 9)


@dataclass(frozen=True)
class RigSpec:
    cameras: int = 4
    radius: float = 4500.0
    height: float = 500.0
    focal: float = 1000.0
    image_size: tuple = (1000, 1000)
    azimuth_offset_deg: float = 45.0
    height_jitter: float = 0.0
    seed: int = 0


@dataclass(frozen=True)
class MotionSpec:
    frames: int = 500
    fps: float = 50.0
    bone_lengths: Optional[dict] = None
    action: str = "Walking"
    gait_frequency: Optional[float] = None
    amplitude: float = 1.0
    drift_bound: float = 20.0
    area_radius: float = 800.0
    seed: int = 0


@dataclass(frozen=True)
class DetectionNoiseSpec:
    sigma: float = 0.0
    dropout: float = 0.0
    confidence_eps: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")


# --- motion -------------------------------------------------------------------

def _rot_xyz(angles: np.ndarray) -> np.ndarray:
    """Rotation matrices ``Rz @ Ry @ Rx`` for ``(..., 3)`` angle triples."""
    ax, ay, az = angles[..., 0], angles[..., 1], angles[..., 2]
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    R = np.empty(angles.shape[:-1] + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def _band_limited(rng, t, base_hz, n_harmonics=3):
    """Sum of a few sinusoids at multiples of ``base_hz`` with decaying weights."""
    out = np.zeros_like(t)
    for h in range(1, n_harmonics + 1):
        out += rng.normal(0, 1.0 / h) * np.sin(2 * np.pi * h * base_hz * t + rng.uniform(0, 2 * np.pi))
    return out


def generate_motion(spec: MotionSpec, js: JointSet = H36M) -> Sequence3D:
    """World-frame motion of a rigid skeleton driven by forward kinematics.

    The root follows a smooth bounded path whose per-frame step never exceeds
    ``spec.drift_bound``; joint angles are band-limited periodic signals.
    """
    bones = dict(H36M_BONES if spec.bone_lengths is None else spec.bone_lengths)
    bones = {int(k): float(v) for k, v in bones.items()}
    if js is not H36M and js.names != H36M.names:
        raise ValueError("the motion generator drives the 17-joint default layout only")
    if any(v <= 0 for v in bones.values()) or len(bones) != js.num_joints - 1:
        raise ValueError("bone lengths must be positive for every non-root joint")
    if spec.frames < 1 or spec.fps <= 0:
        raise ValueError("frames and fps must be positive")
    style = _STYLES.get(spec.action, _STYLES["Walking"])
    leg, arm, torso, hz, speed = style
    if spec.gait_frequency is not None:
        hz = spec.gait_frequency
    amp = spec.amplitude
    rng = np.random.default_rng(spec.seed)
    T, N = spec.frames, js.num_joints
    t = np.arange(T) / spec.fps

    # local joint angles (T, N, 3): x = flexion about the lateral axis
    ang = np.zeros((T, N, 3))
    phase = rng.uniform(0, 2 * np.pi)
    gait = 2 * np.pi * hz * t + phase
    ang[:, 1, 0] = amp * leg * np.sin(gait)
    ang[:, 4, 0] = amp * leg * np.sin(gait + np.pi)
    ang[:, 2, 0] = -amp * leg * 1.2 * np.clip(np.sin(gait + 0.5), 0, None)
    ang[:, 5, 0] = -amp * leg * 1.2 * np.clip(np.sin(gait + np.pi + 0.5), 0, None)
    ang[:, 11, 0] = amp * arm * 0.6 * np.sin(gait + np.pi)
    ang[:, 14, 0] = amp * arm * 0.6 * np.sin(gait)
    ang[:, 12, 0] = amp * arm * (0.4 + 0.4 * np.sin(gait + 1.0 + rng.uniform(0, 1)))
    ang[:, 15, 0] = amp * arm * (0.4 + 0.4 * np.sin(gait + 1.0 + rng.uniform(0, 1)))
    for j in _ARM_JOINTS:
        ang[:, j, 1] += amp * arm * 0.3 * _band_limited(rng, t, hz * 0.5)
        ang[:, j, 2] += amp * arm * 0.2 * _band_limited(rng, t, hz * 0.5)
    for j in _LEG_JOINTS:
        ang[:, j, 1] += amp * leg * 0.1 * _band_limited(rng, t, hz * 0.5)
    for j in _TORSO_JOINTS:
        ang[:, j, :2] += amp * torso * 0.3 * np.stack(
            [_band_limited(rng, t, hz * 0.3), _band_limited(rng, t, hz * 0.3)], axis=-1
        )
    ang[:, 8, 2] += amp * torso * 0.3 * _band_limited(rng, t, hz * 0.3)
    if spec.action in ("Sitting", "SittingDown"):
        ang[:, 1, 0] += amp * torso * 0.8
        ang[:, 4, 0] += amp * torso * 0.8

    # root heading and path
    heading = rng.uniform(-np.pi, np.pi) + 0.8 * _band_limited(rng, t, 0.05, 2)
    path = np.stack([_band_limited(rng, t, 0.04 + 0.06 * speed, 2) for _ in range(2)], axis=-1)
    path -= path[0]
    span = np.abs(path).max() if T > 1 else 0.0
    path = path * (spec.area_radius * speed / span) if span > 0 else path
    root = np.zeros((T, 3))
    root[:, :2] = path + rng.uniform(-0.2, 0.2, 2) * spec.area_radius
    root[:, 2] = 15.0 * amp * leg * np.sin(2 * gait)
    if T > 1:
        step = np.linalg.norm(np.diff(root, axis=0), axis=1).max()
        if step > spec.drift_bound:
            # shrink the path about its start so no step exceeds the bound
            root = root[0] + (root - root[0]) * (spec.drift_bound / step)

    G = np.empty((T, N, 3, 3))
    pos = np.empty((T, N, 3))
    local = _rot_xyz(ang)
    yaw = np.zeros((T, 3))
    yaw[:, 2] = heading
    G[:, js.root] = _rot_xyz(yaw) @ local[:, js.root]
    pos[:, js.root] = root
    order = _topological_order(js)
    for j in order:
        p = js.parents[j]
        d = np.asarray(_REST_DIRS[j], dtype=np.float64)
        offset = bones[j] * d / np.linalg.norm(d)
        pos[:, j] = pos[:, p] + G[:, p] @ offset
        G[:, j] = G[:, p] @ local[:, j]
    return Sequence3D(pos, WORLD, spec.fps)


def _topological_order(js: JointSet) -> list:
    order, frontier = [], [js.root]
    while frontier:
        k = frontier.pop(0)
        children = [j for j, p in enumerate(js.parents) if p == k]
        order.extend(children)
        frontier.extend(children)
    return order


# --- rig ----------------------------------------------------------------------

def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera at ``center`` facing ``target``."""
    f = np.asarray(target, dtype=np.float64) - np.asarray(center, dtype=np.float64)
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    return np.stack([r, d, f])


def build_rig(spec: RigSpec) -> list:
    """``spec.cameras`` cameras evenly spaced on a circle, all facing the origin."""
    if spec.cameras < 1:
        raise ValueError("a rig needs at least one camera")
    rng = np.random.default_rng(spec.seed)
    w, h = spec.image_size
    intr = CameraIntrinsics(spec.focal, spec.focal, w / 2.0, h / 2.0)
    cams = []
    for i in range(spec.cameras):
        a = np.deg2rad(spec.azimuth_offset_deg) + 2 * np.pi * i / spec.cameras
        z = spec.height + (rng.uniform(-1, 1) * spec.height_jitter if spec.height_jitter else 0.0)
        c = np.array([spec.radius * np.cos(a), spec.radius * np.sin(a), z])
        cams.append(Camera(str(i), intr, CameraExtrinsics(look_at(c), c)))
    return cams


# --- detections -----------------------------------------------------------------

def render_detections(seq: Sequence3D, rig, noise: DetectionNoiseSpec) -> dict:
    """Project into every camera and corrupt with Gaussian pixel noise.

    Each camera draws from its own substream of ``noise.seed``. Dropped joints
    (random dropout or behind the camera) get confidence 0. The confidence of
    the remaining joints is a synthetic proxy,
    ``exp(-err^2 / (2 (3 sigma + eps)^2))``.
    """
    X = np.asarray(seq.coords)
    streams = np.random.SeedSequence(noise.seed).spawn(len(rig))
    out = {}
    for cam, ss in zip(rig, streams):
        rng = np.random.default_rng(ss)
        Xc = world_to_camera_coords(X, cam.extrinsics)
        z = Xc[..., 2]
        in_front = z > 1e-9
        k = cam.intrinsics
        safe_z = np.where(in_front, z, 1.0)
        uv = np.stack([k.fx * Xc[..., 0] / safe_z + k.cx, k.fy * Xc[..., 1] / safe_z + k.cy], axis=-1)
        uv = np.where(in_front[..., None], uv, np.array([k.cx, k.cy]))
        eps = rng.standard_normal(uv.shape)
        err = noise.sigma * eps
        drop = rng.random(uv.shape[:2]) < noise.dropout
        err2 = (err ** 2).sum(axis=-1)
        conf = np.exp(-err2 / (2.0 * (3.0 * noise.sigma + noise.confidence_eps) ** 2))
        conf = np.where(drop | ~in_front, 0.0, conf)
        out[cam.id] = Sequence2D(uv + err, conf, seq.fps)
    return out


# --- bundle -------------------------------------------------------------------

@dataclass(frozen=True)
class Clip:
    action: str
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start


@dataclass
class Dataset:
    rig: list
    detections: dict
    gt3d: Optional[Sequence3D] = None
    clips: list = field(default_factory=list)
    joint_set: JointSet = H36M
    fps: float = 50.0
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(next(iter(self.detections.values())))

    @property
    def camera_ids(self) -> list:
        return [c.id for c in self.rig]

    def camera(self, cam_id: str) -> Camera:
        for c in self.rig:
            if c.id == cam_id:
                return c
        raise DatasetError(f"unknown camera {cam_id!r}")

    def frame_actions(self) -> np.ndarray:
        labels = np.full(self.num_frames, "", dtype=object)
        for clip in self.clips:
            labels[clip.start:clip.stop] = clip.action
        return labels

    def subset(self, cam_ids) -> "Dataset":
        cam_ids = [str(c) for c in cam_ids]
        rig = [self.camera(c) for c in cam_ids]
        return Dataset(rig, {c: self.detections[c] for c in cam_ids}, self.gt3d,
                       list(self.clips), self.joint_set, self.fps, dict(self.meta))


def make_dataset(rig_spec: RigSpec = RigSpec(), noise: DetectionNoiseSpec = DetectionNoiseSpec(),
                 clips: int = 4, frames_per_clip: int = 500, actions=None, seed: int = 0,
                 fps: float = 50.0) -> Dataset:
    """Generate a complete bundle: several motion clips seen by one rig."""
    actions = list(actions) if actions is not None else list(ACTIONS)
    ss = np.random.SeedSequence(seed)
    motion_seeds = ss.spawn(clips)
    rig = build_rig(rig_spec)
    seqs, clip_list = [], []
    for i in range(clips):
        action = actions[(seed + i) % len(actions)]
        mseed = int(motion_seeds[i].generate_state(1)[0])
        seq = generate_motion(MotionSpec(frames=frames_per_clip, fps=fps, action=action, seed=mseed))
        clip_list.append(Clip(action, i * frames_per_clip, (i + 1) * frames_per_clip))
        seqs.append(np.asarray(seq.coords))
    gt = Sequence3D(np.concatenate(seqs), WORLD, fps)
    dets = render_detections(gt, rig, noise)
    meta = {
        "generator": {
            "rig": asdict(rig_spec), "noise": asdict(noise), "clips": clips,
            "frames_per_clip": frames_per_clip, "seed": seed,
        }
    }
    return Dataset(rig, dets, gt, clip_list, H36M, fps, meta)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    save_rig(ds.rig, path / "rig.json")
    meta = dict(ds.meta)
    meta.update({
        "fps": ds.fps,
        "joint_set": ds.joint_set.to_dict(),
        "clips": [asdict(c) for c in ds.clips],
    })
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    if ds.gt3d is not None:
        with open(path / "gt3d.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "joint", "x", "y", "z"])
            for f, pose in enumerate(np.asarray(ds.gt3d.coords)):
                for j, (x, y, z) in enumerate(pose):
                    w.writerow([f, j, _fmt(x), _fmt(y), _fmt(z)])
    for cam in ds.rig:
        seq = ds.detections[cam.id]
        conf = seq.confidence_or_ones()
        with open(path / f"det2d_{cam.id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "joint", "u", "v", "confidence"])
            for f, pose in enumerate(np.asarray(seq.coords)):
                for j, (u, v) in enumerate(pose):
                    w.writerow([f, j, _fmt(u), _fmt(v), _fmt(conf[f, j])])
    return path


def _read_table(path: Path, ncols: int, label: str):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{label}: empty file {path}")
    body = rows[1:]
    try:
        idx = np.array([[int(r[0]), int(r[1])] for r in body], dtype=np.int64)
        vals = np.array([[float(v) for v in r[2:]] for r in body], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"{label}: malformed row in {path} ({exc})") from None
    if vals.shape[1:] != (ncols,):
        raise DatasetError(f"{label}: expected {ncols} value columns in {path}")
    n_frames = int(idx[:, 0].max()) + 1
    n_joints = int(idx[:, 1].max()) + 1
    if len(body) != n_frames * n_joints:
        raise DatasetError(
            f"{label}: {len(body)} rows, expected frames x joints = {n_frames * n_joints}"
        )
    out = np.full((n_frames, n_joints, ncols), np.nan)
    out[idx[:, 0], idx[:, 1]] = vals
    if np.isnan(out).any():
        raise DatasetError(f"{label}: duplicate or missing (frame, joint) rows")
    return out


def read_dataset(path) -> Dataset:
    path = Path(path)
    if not (path / "rig.json").exists():
        raise DatasetError(f"{path}: missing rig.json")
    rig = load_rig(path / "rig.json")
    meta = json.loads((path / "meta.json").read_text()) if (path / "meta.json").exists() else {}
    fps = float(meta.pop("fps", 50.0))
    js = JointSet.from_dict(meta.pop("joint_set")) if "joint_set" in meta else H36M
    clips = [Clip(**c) for c in meta.pop("clips", [])]

    ids = {c.id for c in rig}
    for f in path.glob("det2d_*.csv"):
        cid = f.stem[len("det2d_"):]
        if cid not in ids:
            raise DatasetError(f"{path}: detection file for camera {cid!r} not in rig.json")
    dets = {}
    for cam in rig:
        f = path / f"det2d_{cam.id}.csv"
        if not f.exists():
            raise DatasetError(f"{path}: missing detections for camera {cam.id!r} ({f.name})")
        arr = _read_table(f, 3, f"camera {cam.id}")
        dets[cam.id] = Sequence2D(arr[..., :2], arr[..., 2], fps)
    lengths = {len(s) for s in dets.values()}
    if len(lengths) > 1:
        raise DatasetError(f"{path}: cameras disagree on frame count {sorted(lengths)}")
    gt = None
    if (path / "gt3d.csv").exists():
        gt = Sequence3D(_read_table(path / "gt3d.csv", 3, "gt3d"), WORLD, fps)
    n = lengths.pop() if lengths else 0
    if not clips and n:
        clips = [Clip("", 0, n)]
    return Dataset(rig, dets, gt, clips, js, fps, meta)
