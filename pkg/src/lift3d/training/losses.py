"""Triangulation and multi-view consistency losses with analytic gradients.

Both losses sum, over frames, the Frobenius norm of a per-frame ``(N, 3)``
difference. With ``normalize=True`` (the default) the sum is divided by the
number of contributing frame terms so that loss weights and learning rates
carry over between batch sizes; ``normalize=False`` gives the raw sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..errors import CoordinateFrameError, EmptyLossError
from ..geometry import relative_transform, world_to_camera_coords
from ..skeleton import WORLD, Sequence3D

log = logging.getLogger(__name__)


@dataclass
class LossReport:
    l_tri: float
    l_con: float
    total: float
    valid_count: int = 0

    def as_row(self) -> dict:
        return {"l_tri": self.l_tri, "l_con": self.l_con, "total": self.total}


def _frame_norm_grad(d: np.ndarray):
    norms = np.sqrt((d * d).sum(axis=(-2, -1)))
    safe = np.where(norms > 0, norms, 1.0)
    return norms, d / safe[..., None, None]


def tri_loss(pred, target, valid=None, normalize: bool = True):
    """Triangulation loss on arrays.

    Parameters
    ----------
    pred, target : (..., T, N, 3) camera-frame poses
    valid : (..., T, N) bool mask of usable pseudo-label joints

    Returns
    -------
    value, grad wrt ``pred``, number of frame terms, number of valid joints
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if valid is None:
        valid = np.ones(pred.shape[:-1], dtype=bool)
    valid = np.asarray(valid, dtype=bool)
    d = np.where(valid[..., None], pred - np.nan_to_num(target), 0.0)
    n_terms = int(valid.any(axis=-1).sum())
    if n_terms == 0:
        raise EmptyLossError("no valid pseudo-label joints in this batch")
    norms, g = _frame_norm_grad(d)
    denom = n_terms if normalize else 1.0
    return float(norms.sum() / denom), g / denom, n_terms, int(valid.sum())


def con_loss(preds, R, T, normalize: bool = True):
    """Multi-view consistency loss on arrays.

    Parameters
    ----------
    preds : (B, C, T, N, 3) per-camera predictions of the same instants
    R : (B, C, C, 3, 3) with ``R[b, c, k]`` mapping camera ``k`` to camera ``c``
    T : (B, C, C, 3) matching translations

    Returns
    -------
    value, grad wrt ``preds``, number of frame terms
    """
    preds = np.asarray(preds, dtype=np.float64)
    B, C = preds.shape[:2]
    if C < 2:
        return 0.0, np.zeros_like(preds), 0
    mapped = np.einsum("bckij,bktnj->bcktni", R, preds) + T[:, :, :, None, None, :]
    d = preds[:, :, None] - mapped
    off = ~np.eye(C, dtype=bool)
    d = d * off[None, :, :, None, None, None]
    norms, g = _frame_norm_grad(d)
    n_terms = B * C * (C - 1) * preds.shape[2]
    denom = n_terms if normalize else 1.0
    g = g / denom
    grad = g.sum(axis=2) - np.einsum("bcktni,bckij->bktnj", g, R)
    return float(norms.sum() / denom), grad, n_terms


def relative_arrays(rig):
    """``R[c, k]``, ``T[c, k]`` taking camera ``k`` coordinates to camera ``c``."""
    C = len(rig)
    R = np.zeros((C, C, 3, 3))
    T = np.zeros((C, C, 3))
    for c, dst in enumerate(rig):
        for k, src in enumerate(rig):
            rel = relative_transform(src.extrinsics, dst.extrinsics)
            R[c, k] = rel.R_rel
            T[c, k] = rel.T_rel
    return R, T


def loss_tri(pred: Sequence3D, pseudo: Sequence3D, cam, valid=None, normalize: bool = True) -> float:
    """Distance between predictions in ``cam`` and world pseudo-labels moved into ``cam``."""
    if pseudo.frame != WORLD:
        raise CoordinateFrameError("pseudo-labels must be world-frame")
    if pred.frame != cam.frame:
        raise CoordinateFrameError(f"prediction in {pred.frame!r}, camera is {cam.frame!r}")
    target = world_to_camera_coords(pseudo.coords, cam.extrinsics)
    return tri_loss(pred.coords, target, valid, normalize)[0]


def loss_con(preds: dict, rig, normalize: bool = True) -> float:
    """Consistency over all ordered camera pairs; ``preds`` maps camera id to its sequence."""
    if len(rig) < 2:
        log.warning("consistency loss needs at least two cameras; returning 0")
        return 0.0
    for cam in rig:
        if preds[cam.id].frame != cam.frame:
            raise CoordinateFrameError(f"prediction for {cam.id} is in {preds[cam.id].frame!r}")
    stacked = np.stack([np.asarray(preds[c.id].coords) for c in rig])[None]
    R, T = relative_arrays(rig)
    return con_loss(stacked, R[None], T[None], normalize)[0]


def total_loss(l_tri: float, l_con: float, cfg=None, valid_count: int = 0) -> LossReport:
    lam_tri = 1.0 if cfg is None else cfg.lambda_tri
    lam_con = 1.0 if cfg is None else cfg.lambda_con
    return LossReport(l_tri, l_con, lam_tri * l_tri + lam_con * l_con, valid_count)
