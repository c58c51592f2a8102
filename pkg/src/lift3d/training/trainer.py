"""Self-supervised training loop and single-view inference.

One training sample is a window of ``chunk_length`` output frames seen by
every training camera. The network lifts each camera's 2D window on its
own; the triangulation loss ties each prediction to the (fixed) triangulated
pseudo-labels expressed in that camera, and the consistency loss ties the
per-camera predictions to each other through the known rig transforms.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from ..errors import ConfigError, DatasetError, InsufficientViewsError, NumericFailureError
from ..geometry import triangulate_coords, world_to_camera_coords
from ..nn.tcn import TcnModel
from .losses import LossReport, con_loss, relative_arrays, total_loss, tri_loss
from .normalize import (
    back_projection_rays,
    decode_backward,
    decode_output,
    encode_target,
    image_diagonal,
    normalize_coords,
)
from .optim import Adam, lr_at_epoch

log = logging.getLogger(__name__)

_FLIP = np.diag([-1.0, 1.0, 1.0])


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    lr_decay: float = 0.98
    epochs: int = 60
    batch_size: int = 64
    weight_decay: float = 0.1
    lambda_tri: float = 1.0
    lambda_con: float = 1.0
    seed: int = 0
    flip_augment: bool = True
    cameras: Optional[list] = None
    chunk_length: int = 8
    normalize_losses: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.base_lr <= 0 or self.lr_decay <= 0:
            raise ConfigError("learning rate and decay must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.chunk_length < 1:
            raise ConfigError("epochs, batch_size and chunk_length must be >= 1")
        if self.weight_decay < 0 or self.lambda_tri < 0 or self.lambda_con < 0:
            raise ConfigError("weight decay and loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PseudoLabels:
    points: np.ndarray  # (T, N, 3) world, NaN where invalid
    valid: np.ndarray  # (T, N)
    residuals: np.ndarray  # (T, N)


def triangulate_dataset(ds, cameras=None) -> PseudoLabels:
    """DLT pseudo-labels for every frame from the chosen cameras (default: all)."""
    ids = [str(c) for c in cameras] if cameras else ds.camera_ids
    if len(ids) < 2:
        raise InsufficientViewsError(f"triangulation needs at least 2 cameras, got {len(ids)}")
    uv = np.stack([np.asarray(ds.detections[i].coords) for i in ids])
    conf = np.stack([ds.detections[i].confidence_or_ones() for i in ids])
    pts, res, valid = triangulate_coords(uv, conf, [ds.camera(i) for i in ids])
    return PseudoLabels(pts, valid, res)


@dataclass
class _CameraArrays:
    rel: np.ndarray  # (T, N, 2) normalised root-relative 2D
    root_uv: np.ndarray  # (T, 2)
    target: np.ndarray  # (T, N, 3) pseudo-labels in this camera
    intr: tuple  # fx, fy, cx, cy


@dataclass
class TrainingData:
    cams: list
    valid: np.ndarray
    windows: np.ndarray  # (W, 3): clip start, clip stop, first output frame
    R: np.ndarray
    T: np.ndarray
    perm: np.ndarray
    root: int
    chunk: int
    pad: int

    @property
    def num_windows(self) -> int:
        return len(self.windows)


def prepare(ds, cfg: TrainConfig, receptive: int, pseudo: PseudoLabels = None) -> TrainingData:
    ids = [str(c) for c in cfg.cameras] if cfg.cameras else ds.camera_ids
    missing = [i for i in ids if i not in ds.detections]
    if missing:
        raise DatasetError(f"cameras {missing} have no detections in the dataset")
    if pseudo is None:
        pseudo = triangulate_dataset(ds, ids)
    root = ds.joint_set.root
    cams = []
    for i in ids:
        cam = ds.camera(i)
        uv = np.asarray(ds.detections[i].coords)
        diag = image_diagonal(cam)
        rel = (uv - uv[:, root:root + 1]) / diag
        k = cam.intrinsics
        cams.append(_CameraArrays(rel, uv[:, root].copy(),
                                  world_to_camera_coords(pseudo.points, cam.extrinsics),
                                  (k.fx, k.fy, k.cx, k.cy)))
    chunk = cfg.chunk_length
    windows = []
    for clip in ds.clips:
        n = len(clip)
        if n < chunk:
            log.warning("clip %s [%d, %d) shorter than chunk length %d; skipped",
                        clip.action, clip.start, clip.stop, chunk)
            continue
        starts = list(range(clip.start, clip.stop - chunk + 1, chunk))
        if starts[-1] + chunk < clip.stop:
            starts.append(clip.stop - chunk)
        windows.extend((clip.start, clip.stop, s) for s in starts)
    if not windows:
        raise DatasetError("no training windows: every clip is shorter than the chunk length")
    R, T = relative_arrays([ds.camera(i) for i in ids])
    return TrainingData(cams, pseudo.valid, np.array(windows, dtype=np.int64), R, T,
                        ds.joint_set.mirror_permutation(), root, chunk, (receptive - 1) // 2)


def _assemble(data: TrainingData, win_idx: np.ndarray, flips: np.ndarray):
    """Gather one batch; returns network input, rays, targets, validity, R, T."""
    w = data.windows[win_idx]
    L, pad = data.chunk, data.pad
    out_frames = w[:, 2:3] + np.arange(L)
    in_frames = np.clip(w[:, 2:3] - pad + np.arange(L + 2 * pad), w[:, 0:1], w[:, 1:2] - 1)
    Bw, C = len(w), len(data.cams)
    perm = data.perm
    xs, rays, targets = [], [], []
    for cam in data.cams:
        rel = cam.rel[in_frames]  # (Bw, Tin, N, 2)
        ruv = cam.root_uv[out_frames]  # (Bw, L, 2)
        tgt = cam.target[out_frames]  # (Bw, L, N, 3)
        fx, fy, cx, cy = cam.intr
        if flips.any():
            rel = rel.copy()
            ruv = ruv.copy()
            tgt = tgt.copy()
            f = flips
            rel[f] = rel[f][:, :, perm] * np.array([-1.0, 1.0])
            ruv[f, :, 0] = 2 * cx - ruv[f, :, 0]
            tgt[f] = tgt[f][:, :, perm] * np.array([-1.0, 1.0, 1.0])
        xs.append(rel.reshape(Bw, rel.shape[1], -1).transpose(0, 2, 1))
        rays.append(back_projection_rays(ruv, fx, fy, cx, cy))
        targets.append(tgt)
    x = np.stack(xs, axis=1).reshape(Bw * C, -1, L + 2 * pad)
    rays = np.stack(rays, axis=1).reshape(Bw * C, L, 3)
    targets = np.stack(targets, axis=1)
    valid = data.valid[out_frames]
    if flips.any():
        valid = valid.copy()
        valid[flips] = valid[flips][:, :, perm]
    valid = np.broadcast_to(valid[:, None], (Bw, C) + valid.shape[1:])
    R = np.broadcast_to(data.R, (Bw,) + data.R.shape).copy()
    T = np.broadcast_to(data.T, (Bw,) + data.T.shape).copy()
    if flips.any():
        R[flips] = _FLIP @ R[flips] @ _FLIP
        T[flips] = T[flips] @ _FLIP
    return x, rays, targets, valid, R, T


def batch_step(model: TcnModel, data: TrainingData, batch, cfg: TrainConfig, backward=True):
    """Forward a batch, compute the objective and (optionally) backpropagate it."""
    x, rays, targets, valid, R, T = batch
    Bw, C = targets.shape[:2]
    raw = model.forward(x)
    pred = decode_output(raw, rays, data.root).reshape(targets.shape)
    lt, gt, _, nvalid = tri_loss(pred, targets, valid, cfg.normalize_losses)
    lc, gc, _ = con_loss(pred, R, T, cfg.normalize_losses)
    report = total_loss(lt, lc, cfg, nvalid)
    if backward:
        grad = cfg.lambda_tri * gt + cfg.lambda_con * gc
        g_raw = decode_backward(grad.reshape((Bw * C,) + grad.shape[2:]), rays, data.root)
        model.zero_grad()
        model.backward(g_raw)
    return report


def evaluate_loss(model: TcnModel, data: TrainingData, cfg: TrainConfig, windows=None) -> LossReport:
    """Mean objective over windows (eval mode, no augmentation)."""
    was = model.training
    model.eval()
    idx = np.arange(data.num_windows) if windows is None else np.asarray(windows)
    reports = []
    for s in range(0, len(idx), cfg.batch_size):
        b = idx[s:s + cfg.batch_size]
        reports.append((len(b), batch_step(model, data, _assemble(data, b, np.zeros(len(b), bool)),
                                           cfg, backward=False)))
    model.training = was
    return _mean_report(reports)


def _mean_report(reports) -> LossReport:
    w = np.array([n for n, _ in reports], dtype=np.float64)
    w /= w.sum()
    return LossReport(
        float(sum(wi * r.l_tri for wi, (_, r) in zip(w, reports))),
        float(sum(wi * r.l_con for wi, (_, r) in zip(w, reports))),
        float(sum(wi * r.total for wi, (_, r) in zip(w, reports))),
        int(sum(r.valid_count for _, r in reports)),
    )


def init_output_bias(model: TcnModel, data: TrainingData) -> None:
    """Start the output head at the mean pseudo-label (per joint, per axis)."""
    raws = []
    for cam in data.cams:
        enc = encode_target(np.nan_to_num(cam.target), data.root)
        raws.append(np.where(data.valid[..., None], enc, np.nan))
    mean = np.nanmean(np.concatenate(raws), axis=0)
    mean = np.nan_to_num(mean)
    model.head.bias.data = mean.reshape(-1).copy()


@dataclass
class TrainResult:
    model: TcnModel
    log: list
    optimizer: Adam = None
    epochs_done: int = 0
    deterministic: bool = True


def train(ds, model: TcnModel, cfg: TrainConfig, pseudo: PseudoLabels = None,
          optimizer: Adam = None, start_epoch: int = None, windows=None) -> TrainResult:
    """Optimise ``model`` on ``ds`` with the weighted triangulation + consistency objective.

    Pseudo-labels are triangulated once before the first epoch (unless
    given) and stay fixed. ``windows`` optionally restricts training to a
    subset of window indices.
    """
    data = prepare(ds, cfg, model.receptive_field, pseudo)
    if start_epoch is None:
        start_epoch = int(getattr(model, "meta", {}).get("epochs_done", 0))
    if optimizer is None:
        optimizer = Adam(model.parameters(), cfg.base_lr, weight_decay=cfg.weight_decay)
        extras = getattr(model, "extras", None)
        if extras and start_epoch > 0:
            optimizer.load_state_arrays({k[len("adam/"):]: v for k, v in extras.items()
                                         if k.startswith("adam/")})
    if start_epoch == 0:
        init_output_bias(model, data)
    no_objective = cfg.lambda_tri == 0 and cfg.lambda_con == 0
    if no_objective:
        log.warning("both loss weights are zero: parameters will not be updated")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, start_epoch]))
    all_windows = np.arange(data.num_windows) if windows is None else np.asarray(windows)
    rows = []
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(start_epoch, start_epoch + cfg.epochs):
            lr = lr_at_epoch(cfg, epoch)
            order = rng.permutation(all_windows)
            flips = (rng.random(len(order)) < 0.5) if cfg.flip_augment else np.zeros(len(order), bool)
            model.train()
            chunks = [(order[s:s + cfg.batch_size], flips[s:s + cfg.batch_size])
                      for s in range(0, len(order), cfg.batch_size)]
            if pool is not None:
                batches = pool.map(lambda c: _assemble(data, *c), chunks)
            else:
                batches = (_assemble(data, *c) for c in chunks)
            reports = []
            for bid, (chunk, batch) in enumerate(zip(chunks, batches)):
                report = batch_step(model, data, batch, cfg, backward=not no_objective)
                if not np.isfinite(report.total):
                    raise NumericFailureError(f"non-finite loss in epoch {epoch}, batch {bid}")
                if not no_objective:
                    optimizer.step(lr)
                reports.append((len(chunk[0]), report))
            mean = _mean_report(reports)
            rows.append({
                "epoch": epoch + 1, "lr": lr, "l_tri": mean.l_tri, "l_con": mean.l_con,
                "total": mean.total, "wall_seconds": time.perf_counter() - t0,
            })
            log.info("epoch %d lr %.3g l_tri %.4f l_con %.4f total %.4f",
                     epoch + 1, lr, mean.l_tri, mean.l_con, mean.total)
    finally:
        if pool is not None:
            pool.shutdown()
    model.eval()
    done = start_epoch + cfg.epochs
    meta = dict(getattr(model, "meta", {}))
    meta["epochs_done"] = done
    model.meta = meta
    return TrainResult(model, rows, optimizer, done, deterministic=cfg.workers <= 1)


LOG_COLUMNS = ("epoch", "lr", "l_tri", "l_con", "total", "wall_seconds")


def write_log(rows, path, workers: int = 1) -> None:
    with open(path, "w", newline="") as fh:
        if workers > 1:
            fh.write(f"# workers={workers}: bitwise run-to-run determinism not guaranteed\n")
        else:
            fh.write("# workers=1: deterministic\n")
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(float(r[k])) if k != "epoch" else int(r[k]) for k in LOG_COLUMNS})


# --- inference ----------------------------------------------------------------

def predict_coords(model: TcnModel, uv: np.ndarray, cam, root: int = 0) -> np.ndarray:
    """Lift one camera's ``(T, N, 2)`` detections to camera-frame ``(T, N, 3)`` poses.

    The input is edge-replicated by half the receptive field on both sides so
    every frame gets a prediction.
    """
    uv = np.asarray(uv, dtype=np.float64)
    pad = (model.receptive_field - 1) // 2
    padded = np.concatenate([np.repeat(uv[:1], pad, 0), uv, np.repeat(uv[-1:], pad, 0)])
    x = normalize_coords(padded, root, image_diagonal(cam))[None]
    was = model.training
    model.eval()
    raw = model.forward(x)
    model.training = was
    k = cam.intrinsics
    rays = back_projection_rays(uv[None, :, root], k.fx, k.fy, k.cx, k.cy)
    return decode_output(raw, rays, root)[0]


def predict_dataset(model: TcnModel, ds, cameras=None) -> dict:
    """Camera-frame predictions for every camera, clip by clip."""
    ids = [str(c) for c in cameras] if cameras else ds.camera_ids
    out = {}
    for i in ids:
        uv = np.asarray(ds.detections[i].coords)
        cam = ds.camera(i)
        pred = np.empty(uv.shape[:2] + (3,))
        for clip in ds.clips:
            pred[clip.start:clip.stop] = predict_coords(model, uv[clip.start:clip.stop], cam,
                                                        ds.joint_set.root)
        out[i] = pred
    return out
