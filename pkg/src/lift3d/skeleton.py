"""Joint sets, pose containers and symmetry operations.

Poses are immutable values: coordinate arrays are copied on construction and
marked read-only. 3D poses always carry a frame tag (``"world"`` or
``"camera:<id>"``) so that world and camera coordinates cannot be mixed
silently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import CoordinateFrameError, InvalidJointSetError

WORLD = "world"


def camera_frame(cam_id: str) -> str:
    return f"camera:{cam_id}"


def _check_frame_tag(frame: str) -> None:
    if frame == WORLD:
        return
    if isinstance(frame, str) and frame.startswith("camera:") and len(frame) > 7:
        return
    raise CoordinateFrameError(f"invalid frame tag {frame!r}")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class JointSet:
    """A named kinematic tree with left/right symmetry pairs.

    Attributes
    ----------
    names : tuple of str
        Joint labels, one per joint.
    parents : tuple of int
        Parent index per joint; the root has parent ``-1``.
    root : int
        Index of the root joint.
    symmetry_pairs : tuple of (int, int)
        ``(left, right)`` joint index pairs swapped by mirroring.
    """

    names: tuple
    parents: tuple
    root: int
    symmetry_pairs: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "parents", tuple(int(p) for p in self.parents))
        object.__setattr__(
            self, "symmetry_pairs", tuple((int(a), int(b)) for a, b in self.symmetry_pairs)
        )
        object.__setattr__(self, "root", int(self.root))
        self.validate()

    @property
    def num_joints(self) -> int:
        return len(self.names)

    def validate(self) -> None:
        n = len(self.names)
        if n == 0:
            raise InvalidJointSetError("joint set is empty")
        if len(self.parents) != n:
            raise InvalidJointSetError(f"{len(self.parents)} parents for {n} joints")
        if not 0 <= self.root < n:
            raise InvalidJointSetError(f"root index {self.root} out of range")
        if self.parents[self.root] != -1:
            raise InvalidJointSetError("root joint must have parent -1")
        for j, p in enumerate(self.parents):
            if j == self.root:
                continue
            if not 0 <= p < n or p == j:
                raise InvalidJointSetError(f"joint {j} has invalid parent {p}")
        # every joint must reach the root without revisiting a joint
        for j in range(n):
            seen = set()
            k = j
            while k != self.root:
                if k in seen:
                    raise InvalidJointSetError(f"cycle through joint {j}")
                seen.add(k)
                k = self.parents[k]
        used = set()
        for a, b in self.symmetry_pairs:
            for k in (a, b):
                if not 0 <= k < n:
                    raise InvalidJointSetError(f"symmetry pair index {k} out of range")
                if k == self.root:
                    raise InvalidJointSetError("the root cannot be in a symmetry pair")
                if k in used:
                    raise InvalidJointSetError(f"joint {k} appears in two symmetry pairs")
                used.add(k)

    def mirror_permutation(self) -> np.ndarray:
        perm = np.arange(self.num_joints)
        for a, b in self.symmetry_pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "parents": list(self.parents),
            "root": self.root,
            "symmetry_pairs": [list(p) for p in self.symmetry_pairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JointSet":
        try:
            return cls(d["names"], d["parents"], d["root"], d.get("symmetry_pairs", ()))
        except KeyError as exc:
            raise InvalidJointSetError(f"joint set missing field {exc}") from None


def load_joint_set(path) -> JointSet:
    return JointSet.from_dict(json.loads(Path(path).read_text()))


def save_joint_set(js: JointSet, path) -> None:
    Path(path).write_text(json.dumps(js.to_dict(), indent=2))


# Human3.6M 17-joint layout.
H36M_JOINT_NAMES = (
    "Hip", "RHip", "RKnee", "RFoot", "LHip", "LKnee", "LFoot",
    "Spine", "Thorax", "Neck", "Head",
    "LShoulder", "LElbow", "LWrist", "RShoulder", "RElbow", "RWrist",
)
H36M_PARENTS = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15)
H36M_SYMMETRY = ((4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16))

H36M = JointSet(H36M_JOINT_NAMES, H36M_PARENTS, 0, H36M_SYMMETRY)


def default_joint_set() -> JointSet:
    return H36M


@dataclass(frozen=True)
class Pose2D:
    coords: np.ndarray
    confidence: Optional[np.ndarray] = None

    def __post_init__(self):
        c = _frozen(self.coords)
        if c.ndim != 2 or c.shape[1] != 2:
            raise ValueError(f"Pose2D coords must be (N, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("Pose2D coords must be finite")
        object.__setattr__(self, "coords", c)
        if self.confidence is not None:
            conf = _frozen(self.confidence)
            if conf.shape != (c.shape[0],):
                raise ValueError(f"confidence shape {conf.shape} != ({c.shape[0]},)")
            if np.any(~np.isfinite(conf)) or np.any(conf < 0) or np.any(conf > 1):
                raise ValueError("confidence must lie in [0, 1]")
            object.__setattr__(self, "confidence", conf)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]

    def to_dict(self) -> dict:
        d = {"coords": self.coords.tolist()}
        if self.confidence is not None:
            d["confidence"] = self.confidence.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Pose2D":
        return cls(d["coords"], d.get("confidence"))


@dataclass(frozen=True)
class Pose3D:
    coords: np.ndarray
    frame: str = WORLD

    def __post_init__(self):
        c = _frozen(self.coords)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError(f"Pose3D coords must be (N, 3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("Pose3D coords must be finite")
        _check_frame_tag(self.frame)
        object.__setattr__(self, "coords", c)

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]

    def to_dict(self) -> dict:
        return {"frame": self.frame, "coords": self.coords.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Pose3D":
        return cls(d["coords"], d["frame"])


@dataclass(frozen=True)
class Sequence2D:
    """Ordered 2D poses stored as a ``(T, N, 2)`` array plus ``(T, N)`` confidences."""

    coords: np.ndarray
    confidence: Optional[np.ndarray] = None
    fps: float = 50.0

    def __post_init__(self):
        c = _frozen(self.coords)
        if c.ndim != 3 or c.shape[2] != 2 or c.shape[0] == 0:
            raise ValueError(f"Sequence2D coords must be non-empty (T, N, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("Sequence2D coords must be finite")
        object.__setattr__(self, "coords", c)
        if self.confidence is not None:
            conf = _frozen(self.confidence)
            if conf.shape != c.shape[:2]:
                raise ValueError(f"confidence shape {conf.shape} != {c.shape[:2]}")
            object.__setattr__(self, "confidence", conf)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[1]

    def __getitem__(self, t: int) -> Pose2D:
        conf = None if self.confidence is None else self.confidence[t]
        return Pose2D(self.coords[t], conf)

    @property
    def frames(self) -> list:
        return [self[t] for t in range(len(self))]

    @classmethod
    def from_frames(cls, frames: Sequence[Pose2D], fps: float = 50.0) -> "Sequence2D":
        if not frames:
            raise ValueError("a sequence needs at least one frame")
        coords = np.stack([f.coords for f in frames])
        if any(f.confidence is None for f in frames):
            conf = None
        else:
            conf = np.stack([f.confidence for f in frames])
        return cls(coords, conf, fps)

    def confidence_or_ones(self) -> np.ndarray:
        if self.confidence is None:
            return np.ones(self.coords.shape[:2])
        return np.asarray(self.confidence)


@dataclass(frozen=True)
class Sequence3D:
    """Ordered 3D poses stored as a ``(T, N, 3)`` array sharing one frame tag."""

    coords: np.ndarray
    frame: str = WORLD
    fps: float = 50.0

    def __post_init__(self):
        c = _frozen(self.coords)
        if c.ndim != 3 or c.shape[2] != 3 or c.shape[0] == 0:
            raise ValueError(f"Sequence3D coords must be non-empty (T, N, 3), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("Sequence3D coords must be finite")
        _check_frame_tag(self.frame)
        object.__setattr__(self, "coords", c)

    def __len__(self) -> int:
        return self.coords.shape[0]

    @property
    def num_joints(self) -> int:
        return self.coords.shape[1]

    def __getitem__(self, t: int) -> Pose3D:
        return Pose3D(self.coords[t], self.frame)

    @property
    def frames(self) -> list:
        return [self[t] for t in range(len(self))]

    @classmethod
    def from_frames(cls, frames: Sequence[Pose3D], fps: float = 50.0) -> "Sequence3D":
        if not frames:
            raise ValueError("a sequence needs at least one frame")
        tags = {f.frame for f in frames}
        if len(tags) != 1:
            raise CoordinateFrameError(f"frames mix coordinate systems: {sorted(tags)}")
        return cls(np.stack([f.coords for f in frames]), tags.pop(), fps)


def _check_pairs(js: JointSet, n: int) -> None:
    for a, b in js.symmetry_pairs:
        if not (0 <= a < n and 0 <= b < n):
            raise InvalidJointSetError(
                f"symmetry pair ({a}, {b}) out of range for a {n}-joint pose"
            )


def flip_coords2d(coords: np.ndarray, js: JointSet, image_width: float) -> np.ndarray:
    """Array form of :func:`flip_pose2d`; works on any ``(..., N, 2)`` array."""
    if image_width <= 0:
        raise ValueError("image_width must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    _check_pairs(js, coords.shape[-2])
    out = coords.copy()
    out[..., 0] = image_width - out[..., 0]
    perm = _perm_for(js, coords.shape[-2])
    return out[..., perm, :]


def flip_coords3d(coords: np.ndarray, js: JointSet, center_x=None) -> np.ndarray:
    """Array form of :func:`flip_pose3d`.

    Reflects x about ``center_x`` (per pose; defaults to the root joint's x)
    and swaps the symmetry pairs.
    """
    coords = np.asarray(coords, dtype=np.float64)
    _check_pairs(js, coords.shape[-2])
    if center_x is None:
        center_x = coords[..., js.root, 0]
    center_x = np.asarray(center_x, dtype=np.float64)[..., None]
    out = coords.copy()
    out[..., 0] = 2.0 * center_x - out[..., 0]
    return out[..., _perm_for(js, coords.shape[-2]), :]


def _perm_for(js: JointSet, n: int) -> np.ndarray:
    perm = np.arange(n)
    for a, b in js.symmetry_pairs:
        perm[a], perm[b] = b, a
    return perm


def flip_pose2d(p: Pose2D, js: JointSet, image_width: float) -> Pose2D:
    """Mirror a detection horizontally: ``x -> image_width - x`` and swap left/right."""
    coords = flip_coords2d(p.coords, js, image_width)
    conf = None
    if p.confidence is not None:
        conf = np.asarray(p.confidence)[_perm_for(js, p.num_joints)]
    return Pose2D(coords, conf)


def flip_pose3d(p: Pose3D, js: JointSet, center_x: Optional[float] = None) -> Pose3D:
    return Pose3D(flip_coords3d(p.coords, js, center_x), p.frame)


def bone_lengths(p, js: JointSet) -> np.ndarray:
    """Child-to-parent segment lengths ordered by child index (root skipped).

    Accepts a :class:`Pose3D` or any ``(..., N, 3)`` array.
    """
    coords = p.coords if isinstance(p, Pose3D) else np.asarray(p, dtype=np.float64)
    children = [j for j in range(js.num_joints) if j != js.root]
    parents = [js.parents[j] for j in children]
    return np.linalg.norm(coords[..., children, :] - coords[..., parents, :], axis=-1)
