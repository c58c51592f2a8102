"""Pose evaluation protocols: MPJPE, Procrustes-aligned MPJPE, scale-aligned
MPJPE, PCK and AUC.

All functions take ``(F, N, 3)`` arrays (or a single ``(N, 3)`` pose) in
millimetres. Unless ``align_root=False`` both poses are first translated so
their root joints coincide.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentUndefinedError

AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)

# Action columns in the order of the standard Human3.6M result tables.
ACTIONS = (
    "Directions", "Discussion", "Eating", "Greeting", "Phoning", "Photo", "Posing",
    "Purchases", "Sitting", "SittingDown", "Smoking", "Waiting", "WalkDog", "Walking",
    "WalkTogether",
)
ACTION_COLUMNS = (
    "Dir.", "Dis.", "Eat", "Greet", "Phone", "Photo", "Pose", "Purch.", "Sit", "SitD",
    "Smoke", "Wait", "WalkD", "Walk", "WalkT",
)


def _as_batch(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def root_align(pose: np.ndarray, root: int = 0) -> np.ndarray:
    pose = _as_batch(pose)
    return pose - pose[:, root:root + 1, :]


def _prepare(pred, gt, root, align_root):
    pred, gt = _as_batch(pred), _as_batch(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if align_root:
        return root_align(pred, root), root_align(gt, root)
    return pred, gt


def joint_errors(pred, gt, root: int = 0, align_root: bool = True) -> np.ndarray:
    p, g = _prepare(pred, gt, root, align_root)
    return np.linalg.norm(p - g, axis=-1)


def mpjpe(pred, gt, root: int = 0, align_root: bool = True) -> float:
    """Protocol 1: mean Euclidean joint error."""
    return float(joint_errors(pred, gt, root, align_root).mean())


def procrustes_align(pred, gt):
    """Similarity-align each predicted pose to its ground truth.

    Solves ``min_{s,R,t} ||s R p + t - g||_F`` per frame with the SVD of the
    cross-covariance and a determinant correction that rules out
    reflections.

    Returns
    -------
    aligned : (F, N, 3)
    scale : (F,)
    rotation : (F, 3, 3)
    translation : (F, 3)
    """
    pred, gt = _as_batch(pred), _as_batch(gt)
    mu_p = pred.mean(axis=1, keepdims=True)
    mu_g = gt.mean(axis=1, keepdims=True)
    p0 = pred - mu_p
    g0 = gt - mu_g
    norm_g = np.sqrt((g0 ** 2).sum(axis=(1, 2)))
    if np.any(norm_g < 1e-12):
        raise AlignmentUndefinedError("ground-truth pose has all joints coincident")
    norm_p = np.sqrt((p0 ** 2).sum(axis=(1, 2)))
    if np.any(norm_p < 1e-12):
        raise AlignmentUndefinedError("predicted pose has all joints coincident")

    H = np.einsum("fni,fnj->fij", p0, g0)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("fij,fjk->fik", U, Vt)))
    d = np.where(d == 0, 1.0, d)
    D = np.ones((pred.shape[0], 3))
    D[:, 2] = d
    # R maps prediction coordinates onto the ground truth: R = V D U^T
    R = np.einsum("fji,fj,fkj->fik", Vt, D, U)
    scale = (S * D).sum(axis=1) / (norm_p ** 2)
    aligned = scale[:, None, None] * np.einsum("fij,fnj->fni", R, p0) + mu_g
    t = mu_g[:, 0] - scale[:, None] * np.einsum("fij,fj->fi", R, mu_p[:, 0])
    return aligned, scale, R, t


def pmpjpe(pred, gt) -> float:
    """Protocol 2: MPJPE after per-frame similarity (Procrustes) alignment."""
    aligned, *_ = procrustes_align(pred, gt)
    return float(np.linalg.norm(aligned - _as_batch(gt), axis=-1).mean())


def optimal_scale(pred, gt, root: int = 0) -> np.ndarray:
    p, g = _prepare(pred, gt, root, True)
    num = (p * g).sum(axis=(1, 2))
    den = (p * p).sum(axis=(1, 2))
    return np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)


def nmpjpe(pred, gt, root: int = 0) -> float:
    """Protocol 3: MPJPE after per-frame optimal scaling of the root-aligned prediction."""
    p, g = _prepare(pred, gt, root, True)
    s = optimal_scale(p, g, root)
    return float(np.linalg.norm(s[:, None, None] * p - g, axis=-1).mean())


def pck(pred, gt, threshold: float = 150.0, root: int = 0, align_root: bool = True) -> float:
    """Percentage of joints whose error is at most ``threshold`` mm."""
    err = joint_errors(pred, gt, root, align_root)
    return float(100.0 * (err <= threshold).mean())


def pck_curve(pred, gt, thresholds=AUC_THRESHOLDS, root: int = 0, align_root: bool = True):
    err = joint_errors(pred, gt, root, align_root).ravel()
    return np.array([100.0 * (err <= t).mean() for t in thresholds])


def auc(pred, gt, root: int = 0, align_root: bool = True) -> float:
    """Mean PCK over thresholds 0, 5, ..., 150 mm."""
    return float(pck_curve(pred, gt, AUC_THRESHOLDS, root, align_root).mean())


@dataclass
class MetricReport:
    mpjpe: float
    pmpjpe: float
    nmpjpe: float
    pck150: float
    auc: float
    frames: int = 0
    per_action: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def ordering_holds(self, tol: float = 1e-9) -> bool:
        return (self.pmpjpe <= self.nmpjpe + tol and self.nmpjpe <= self.mpjpe + tol
                and self.auc <= self.pck150 + tol)


def _report(pred, gt, root) -> dict:
    return dict(
        mpjpe=mpjpe(pred, gt, root),
        pmpjpe=pmpjpe(pred, gt),
        nmpjpe=nmpjpe(pred, gt, root),
        pck150=pck(pred, gt, 150.0, root),
        auc=auc(pred, gt, root),
        frames=int(_as_batch(pred).shape[0]),
    )


def evaluate(pred, gt, actions=None, root: int = 0) -> MetricReport:
    """All protocols over a set of frames, optionally broken down by action label."""
    pred, gt = _as_batch(pred), _as_batch(gt)
    report = MetricReport(**_report(pred, gt, root))
    if actions is not None:
        actions = np.asarray(actions)
        for name in dict.fromkeys(actions.tolist()):
            sel = actions == name
            report.per_action[name] = _report(pred[sel], gt[sel], root)
    return report


def write_report_json(report: MetricReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2))


def write_action_table(reports: dict, path, metrics=("mpjpe", "pmpjpe", "nmpjpe")) -> None:
    """Per-action CSV in the standard table layout: 15 action columns plus Avg.

    ``reports`` maps a row label (e.g. a model name) to a :class:`MetricReport`.
    Actions absent from a report are left empty.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "metric", *ACTION_COLUMNS, "Avg"])
        for label, rep in reports.items():
            for m in metrics:
                cells = []
                for action in ACTIONS:
                    a = rep.per_action.get(action)
                    cells.append("" if a is None else f"{a[m]:.2f}")
                w.writerow([label, m, *cells, f"{getattr(rep, m):.2f}"])
