"""Command-line front end: ``lift3d {gen,triangulate,train,eval,gradcheck}``.

Every command writes the fully resolved configuration it ran with to
``<out>/config.json``. Failures exit with status 2 and one stderr line of the
form ``error: <code>: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetError, InsufficientViewsError, Lift3DError
from .geometry import world_to_camera_coords
from .metrics import MetricReport, evaluate, write_action_table
from .nn import FRAME_LADDER, TcnConfig, TcnModel, gradcheck_model, load_model, save_model
from .synthdata import DetectionNoiseSpec, RigSpec, make_dataset, read_dataset, write_dataset
from .training import PseudoLabels, TrainConfig, predict_dataset, train, triangulate_dataset, write_log

log = logging.getLogger("lift3d")

MODEL_FILE = "model.lift3d"


@dataclass
class ExperimentConfig:
    """Everything one command needs; mirrors the JSON config file layout."""

    dataset: str = None
    model: str = None
    pseudo: str = None
    out: str = "out"
    seed: int = 0
    clips: int = 4
    frames_per_clip: int = 500
    rig: dict = field(default_factory=lambda: asdict(RigSpec()))
    noise: dict = field(default_factory=lambda: asdict(DetectionNoiseSpec()))
    train: dict = field(default_factory=lambda: TrainConfig().to_dict())
    net: dict = field(default_factory=lambda: TcnConfig().to_dict())
    metrics: list = field(default_factory=lambda: ["mpjpe", "pmpjpe", "nmpjpe"])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        merged = {}
        for k, v in d.items():
            cur = getattr(base, k)
            merged[k] = {**cur, **v} if isinstance(cur, dict) and isinstance(v, dict) else v
        return cls(**merged)

    def rig_spec(self) -> RigSpec:
        d = dict(self.rig)
        d["image_size"] = tuple(d["image_size"])
        return RigSpec(**d)

    def noise_spec(self) -> DetectionNoiseSpec:
        return DetectionNoiseSpec(**self.noise)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train)

    def tcn_config(self) -> TcnConfig:
        return TcnConfig.from_dict(self.net)


def _parse_cameras(text: str) -> list:
    ids = [c.strip() for c in text.split(",") if c.strip()]
    if not ids:
        raise ConfigError("--cameras needs at least one camera id")
    return ids


def resolve_config(args) -> ExperimentConfig:
    """Config file first, then command-line flags."""
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON ({exc.msg})") from None
    cfg = ExperimentConfig.from_dict(raw)
    for name in ("dataset", "model", "pseudo", "out"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, str(v))
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.noise["seed"] = args.seed
        cfg.train["seed"] = args.seed
    if getattr(args, "sigma", None) is not None:
        cfg.noise["sigma"] = args.sigma
    if getattr(args, "dropout", None) is not None:
        cfg.noise["dropout"] = args.dropout
    if getattr(args, "num_cameras", None) is not None:
        cfg.rig["cameras"] = args.num_cameras
    for name in ("clips", "frames_per_clip"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if args.cameras is not None:
        cfg.train["cameras"] = _parse_cameras(args.cameras)
    overrides = {
        "lambda_tri": getattr(args, "lambda_tri", None),
        "lambda_con": getattr(args, "lambda_con", None),
        "workers": args.workers,
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
        "base_lr": getattr(args, "lr", None),
    }
    cfg.train.update({k: v for k, v in overrides.items() if v is not None})
    frames = getattr(args, "frames", None)
    if frames is not None:
        keep = {k: cfg.net[k] for k in ("num_joints", "channels", "dropout", "bn_momentum")}
        cfg.net = TcnConfig.for_frames(frames, **keep).to_dict()
    if getattr(args, "channels", None) is not None:
        cfg.net["channels"] = args.channels
    # validate eagerly so a bad config fails before any work is done
    cfg.train_config()
    cfg.tcn_config()
    cfg.noise_spec()
    return cfg


def _require(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return out


def _load_dataset(cfg: ExperimentConfig):
    ds = read_dataset(_require(cfg.dataset, "dataset"))
    cams = cfg.train.get("cameras")
    return ds.subset(cams) if cams else ds


# --- pseudo-label files -------------------------------------------------------

def write_pseudo(pl: PseudoLabels, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "x", "y", "z", "valid", "residual_px"])
        for f in range(pl.points.shape[0]):
            for j in range(pl.points.shape[1]):
                x, y, z = pl.points[f, j]
                w.writerow([f, j, repr(float(x)), repr(float(y)), repr(float(z)),
                            int(pl.valid[f, j]), repr(float(pl.residuals[f, j]))])


def read_pseudo(path) -> PseudoLabels:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DatasetError(f"empty pseudo-label file {path}")
    T = max(int(r["frame"]) for r in rows) + 1
    N = max(int(r["joint"]) for r in rows) + 1
    if len(rows) != T * N:
        raise DatasetError(f"{path}: {len(rows)} rows, expected {T * N}")
    pts = np.full((T, N, 3), np.nan)
    valid = np.zeros((T, N), dtype=bool)
    res = np.full((T, N), np.nan)
    for r in rows:
        f, j = int(r["frame"]), int(r["joint"])
        pts[f, j] = float(r["x"]), float(r["y"]), float(r["z"])
        valid[f, j] = r["valid"] == "1"
        res[f, j] = float(r["residual_px"])
    return PseudoLabels(pts, valid, res)


# --- evaluation helpers ---------------------------------------------------------

def evaluate_world(est: np.ndarray, ds, frames=None) -> MetricReport:
    """Metrics for world-frame estimates, pooled over every camera's frame.

    Root-aligned metrics are frame-invariant, so this is a per-camera
    evaluation of the same poses repeated once per view; it is reported once.
    """
    gt = np.asarray(ds.gt3d.coords)
    actions = ds.frame_actions()
    sel = np.arange(len(gt)) if frames is None else frames
    return evaluate(est[sel], gt[sel], actions[sel], ds.joint_set.root)


def evaluate_model(model: TcnModel, ds) -> tuple:
    """Pooled and per-camera metrics of single-view predictions against gt3d."""
    if ds.gt3d is None:
        raise DatasetError("dataset has no gt3d; cannot evaluate")
    preds = predict_dataset(model, ds)
    gt_w = np.asarray(ds.gt3d.coords)
    actions = ds.frame_actions()
    root = ds.joint_set.root
    all_p, all_g, all_a, per_cam = [], [], [], {}
    for cid, pred in preds.items():
        gt = world_to_camera_coords(gt_w, ds.camera(cid).extrinsics)
        per_cam[cid] = evaluate(pred, gt, actions, root)
        all_p.append(pred)
        all_g.append(gt)
        all_a.append(actions)
    pooled = evaluate(np.concatenate(all_p), np.concatenate(all_g), np.concatenate(all_a), root)
    return pooled, per_cam


def _report_dict(rep: MetricReport, **extra) -> dict:
    d = rep.to_dict()
    d["ordering_holds"] = rep.ordering_holds()
    d.update(extra)
    return d


# --- commands -----------------------------------------------------------------

def cmd_gen(cfg: ExperimentConfig) -> Path:
    out = _out_dir(cfg)
    ds = make_dataset(cfg.rig_spec(), cfg.noise_spec(), clips=cfg.clips,
                      frames_per_clip=cfg.frames_per_clip, seed=cfg.seed)
    write_dataset(ds, out)
    log.info("wrote %d-camera, %d-frame bundle to %s", len(ds.rig), ds.num_frames, out)
    return out


def cmd_triangulate(cfg: ExperimentConfig) -> dict:
    ds = _load_dataset(cfg)
    if len(ds.rig) < 2:
        raise InsufficientViewsError(
            f"triangulation needs at least 2 cameras, dataset has {len(ds.rig)}")
    out = _out_dir(cfg)
    pl = triangulate_dataset(ds)
    write_pseudo(pl, out / "pseudo3d.csv")
    res = pl.residuals[pl.valid]
    report = {
        "cameras": ds.camera_ids,
        "frames": int(pl.points.shape[0]),
        "valid_fraction": float(pl.valid.mean()),
        "residual_px": {
            "mean": float(res.mean()) if res.size else None,
            "max": float(res.max()) if res.size else None,
            "median": float(np.median(res)) if res.size else None,
        },
    }
    if ds.gt3d is not None:
        ok = pl.valid.all(axis=1)
        if ok.any():
            rep = evaluate_world(np.nan_to_num(pl.points), ds, np.flatnonzero(ok))
            report["pseudo_label_metrics"] = _report_dict(rep)
            err = np.linalg.norm(pl.points[ok] - np.asarray(ds.gt3d.coords)[ok], axis=-1)
            report["pseudo_label_abs_error_mm"] = {"mean": float(err.mean()), "max": float(err.max())}
    (out / "triangulation_report.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_train(cfg: ExperimentConfig) -> Path:
    ds = read_dataset(_require(cfg.dataset, "dataset"))
    tcfg = cfg.train_config()
    out = _out_dir(cfg)
    if cfg.model:
        model = load_model(_require(cfg.model, "model"), expect_joints=ds.joint_set.num_joints)
        log.info("resuming from %s at epoch %d", cfg.model, model.meta.get("epochs_done", 0))
    else:
        model = TcnModel(cfg.tcn_config(), seed=cfg.seed)
    pseudo = read_pseudo(_require(cfg.pseudo, "pseudo-label file")) if cfg.pseudo else None
    result = train(ds, model, tcfg, pseudo=pseudo)
    extras = {f"adam/{k}": v for k, v in result.optimizer.state_arrays().items()}
    save_model(result.model, out / MODEL_FILE, meta=result.model.meta, extras=extras)
    write_log(result.log, out / "train_log.csv", tcfg.workers)
    return out / MODEL_FILE


def cmd_eval(cfg: ExperimentConfig, source: str = "model", sweep=None) -> dict:
    ds = _load_dataset(cfg)
    if ds.gt3d is None:
        raise DatasetError("dataset has no gt3d; cannot evaluate")
    out = _out_dir(cfg)
    js = ds.joint_set
    if sweep:
        rows = []
        reports = {}
        for path in sweep:
            model = load_model(_require(path, "model"), expect_joints=js.num_joints)
            pooled, _ = evaluate_model(model, ds)
            rf = model.receptive_field
            rows.append({"receptive_field": rf, "model": str(path), **_report_dict(pooled)})
            reports[f"{rf} frames"] = pooled
        rows.sort(key=lambda r: r["receptive_field"])
        with open(out / "rf_sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["receptive_field", "mpjpe", "pmpjpe", "nmpjpe", "pck150", "auc", "model"])
            for r in rows:
                w.writerow([r["receptive_field"], *(f"{r[m]:.2f}" for m in
                            ("mpjpe", "pmpjpe", "nmpjpe", "pck150", "auc")), r["model"]])
        write_action_table(reports, out / "per_action.csv", cfg.metrics)
        result = {"sweep": [{k: v for k, v in r.items() if k != "per_action"} for r in rows]}
        (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n")
        return result
    if source == "gt":
        pooled = evaluate_world(np.asarray(ds.gt3d.coords), ds)
        per_cam = {}
    elif source == "pseudo":
        pl = read_pseudo(cfg.pseudo) if cfg.pseudo else triangulate_dataset(ds)
        ok = np.flatnonzero(pl.valid.all(axis=1))
        if ok.size == 0:
            raise DatasetError("no frame has a complete pseudo-label")
        pooled = evaluate_world(np.nan_to_num(pl.points), ds, ok)
        per_cam = {}
    else:
        model = load_model(_require(cfg.model, "model"), expect_joints=js.num_joints)
        pooled, per_cam = evaluate_model(model, ds)
    result = _report_dict(pooled, source=source,
                          per_camera={c: _report_dict(r, per_action=None) for c, r in per_cam.items()})
    (out / "metrics.json").write_text(json.dumps(result, indent=2) + "\n")
    write_action_table({source: pooled}, out / "per_action.csv", cfg.metrics)
    return result


def cmd_gradcheck(cfg: ExperimentConfig, corrupt: str = None, length: int = None,
                  max_per_tensor: int = None) -> dict:
    out = _out_dir(cfg)
    tcn = cfg.tcn_config()
    model = TcnModel(tcn, seed=cfg.seed)
    if corrupt:
        names = {p.name for p in model.parameters()}
        if corrupt not in names:
            raise ConfigError(f"--corrupt: no parameter named {corrupt!r}")
        model.grad_hooks[corrupt] = lambda g: g * 1.5 + 1e-3
    rng = np.random.default_rng(cfg.seed)
    t = length or model.receptive_field + 2
    x = rng.standard_normal((2, tcn.in_features, t)) * 0.1
    # run a couple of training-mode passes so batchnorm statistics are non-trivial
    model.train()
    for _ in range(2):
        model.forward(rng.standard_normal(x.shape) * 0.1)
    report = gradcheck_model(model, x, seed=cfg.seed, max_per_tensor=max_per_tensor)
    report["config"] = tcn.to_dict()
    report["failed_layers"] = sorted(k for k, v in report["layers"].items() if not v["passed"])
    (out / "gradcheck.json").write_text(json.dumps(report, indent=2) + "\n")
    return report


# --- argument parsing -----------------------------------------------------------

def _common(p: argparse.ArgumentParser, out_default=None) -> None:
    p.add_argument("--config", help="JSON experiment config; flags override it")
    p.add_argument("--seed", type=int, help="seed for data, noise and initialisation")
    p.add_argument("--cameras", help="comma-separated camera ids to use")
    p.add_argument("--workers", type=int, help="batch-assembly threads (training)")
    p.add_argument("--out", help="output directory", default=out_default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lift3d", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic multi-camera bundle")
    _common(p)
    p.add_argument("--sigma", type=float, help="2D detection noise std in pixels")
    p.add_argument("--dropout", type=float, help="probability of a missed detection")
    p.add_argument("--num-cameras", type=int, help="cameras in the rig")
    p.add_argument("--clips", type=int, help="number of motion clips")
    p.add_argument("--frames-per-clip", type=int)

    p = sub.add_parser("triangulate", help="DLT pseudo-labels and residual report")
    _common(p)
    p.add_argument("dataset", nargs="?")

    p = sub.add_parser("train", help="self-supervised training")
    _common(p)
    p.add_argument("dataset", nargs="?")
    p.add_argument("--model", help="resume from this model file")
    p.add_argument("--pseudo", help="precomputed pseudo3d.csv (default: triangulate)")
    p.add_argument("--frames", type=int, choices=FRAME_LADDER, help="receptive field")
    p.add_argument("--channels", type=int)
    p.add_argument("--lambda-tri", type=float)
    p.add_argument("--lambda-con", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")

    p = sub.add_parser("eval", help="evaluate predictions against gt3d")
    _common(p)
    p.add_argument("dataset", nargs="?")
    p.add_argument("--model")
    p.add_argument("--pseudo", help="pseudo3d.csv to evaluate with --source pseudo")
    p.add_argument("--source", choices=("model", "pseudo", "gt"), default="model")
    p.add_argument("--rf-sweep", nargs="+", metavar="MODEL",
                   help="evaluate several models and tabulate them by receptive field")

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _common(p)
    p.add_argument("--frames", type=int, choices=FRAME_LADDER)
    p.add_argument("--channels", type=int)
    p.add_argument("--length", type=int, help="input frames (default: receptive field + 2)")
    p.add_argument("--max-per-tensor", type=int, default=64,
                   help="entries sampled per parameter tensor; 0 checks every entry")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("LIFT3D_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ConfigError(f"LIFT3D_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        if args.out is None:
            args.out = None if args.config else f"out_{args.command}"
        cfg = resolve_config(args)
        if args.command == "gen":
            cmd_gen(cfg)
        elif args.command == "triangulate":
            cmd_triangulate(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.source, args.rf_sweep)
        elif args.command == "gradcheck":
            report = cmd_gradcheck(cfg, args.corrupt, args.length, args.max_per_tensor or None)
            if not report["passed"]:
                print(f"error: gradcheck-failed: layers {','.join(report['failed_layers'])}",
                      file=sys.stderr)
                return 1
    except Lift3DError as exc:
        print(f"error: {exc.code}: {_one_line(exc)}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 2
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split())


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
