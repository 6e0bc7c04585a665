"""Command-line entry point: synth, train, infer, eval, ablate."""
import argparse
import concurrent.futures
import dataclasses
import json
import logging
import os
import sys
import typing
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics as mt
from . import scene as sc
from . import training as tr
from .autodiff import DiffError
from .checkpoint import CheckpointError
from .model import ModelConfig, ModelConfigError, Network

log = logging.getLogger(__name__)

MODES = ("nms", "positions", "embedding", "geometric")


class CliError(ValueError):
    """Invalid invocation or configuration; maps to exit code 2."""


_RUNTIME_ERRORS = (
    tr.TrainingError, sc.SceneError, CheckpointError, mt.MetricsError,
    DiffError, ModelConfigError, OSError, ValueError,
)


@dataclass(frozen=True)
class RunConfig:
    """Flat run settings; every field is a JSON config key and a --flag."""

    # scene synthesis
    n_train: int = 64
    n_val: int = 16
    room_x: float = 6.0
    room_y: float = 6.0
    room_z: float = 3.0
    objects_min: int = 4
    objects_max: int = 12
    points_per_m2: float = 400.0
    noise_sigma: float = 0.005
    # model
    feature_dim: int = 64
    proposal_dim: int = 128
    gcn_layers: int = 10
    agg_mode: str = "geometric"
    group_radius: float = 0.3
    graph_radius: float = 2.0
    num_proposals: int = 500
    use_fps: bool = False
    # training
    steps: int = 4000
    batch_size: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    lr_halving: int = 500
    crop_size: float = 3.0
    max_points: int = 1024
    train_proposals: int = 32
    max_group: int = 32
    clip_norm: float = 1.0
    gcn_freeze_steps: int = 500
    log_every: int = 10
    # inference / aggregation
    mode: str = "geometric"
    dbscan_eps: float | None = None   # None: per-mode default
    dbscan_min_pts: int = 2
    infer_group: int = 256
    split: str = "val"
    # run plumbing
    seed: int = 0
    jobs: int = 1
    out: str = "out"
    scenes: str | None = None
    ckpt: str | None = None
    preds: str | None = None
    ckpt_gcn: str | None = None
    ckpt_plain: str | None = None
    ckpt_embedding: str | None = None

    def model_config(self, gcn_layers: int | None = None,
                     agg_mode: str | None = None) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim, proposal_dim=self.proposal_dim,
            gcn_layers=self.gcn_layers if gcn_layers is None else gcn_layers,
            agg_mode=self.agg_mode if agg_mode is None else agg_mode,
            group_radius=self.group_radius, graph_radius=self.graph_radius,
            num_proposals=self.num_proposals, use_fps=self.use_fps)

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr,
            momentum=self.momentum, lr_halving=self.lr_halving,
            crop_size=self.crop_size, max_points=self.max_points,
            train_proposals=self.train_proposals, max_group=self.max_group,
            clip_norm=self.clip_norm, gcn_freeze_steps=self.gcn_freeze_steps,
            log_every=self.log_every, seed=self.seed)

    def scene_params(self, seed: int) -> sc.SceneGenParams:
        return sc.SceneGenParams(
            seed=seed, room_extent=(self.room_x, self.room_y, self.room_z),
            objects_per_scene=(self.objects_min, self.objects_max),
            points_per_m2=self.points_per_m2, noise_sigma=self.noise_sigma)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _field_type(name: str) -> type:
    """Unwrap Optional[...] down to the scalar type."""
    t = _FIELDS[name].type
    args = [a for a in typing.get_args(t) if a is not type(None)]
    return args[0] if args else t


def _coerce(name: str, value):
    """Parse a config/flag value into the field's declared type."""
    if value is None:
        return None
    t = _field_type(name)
    try:
        if t is bool:
            if isinstance(value, bool):
                return value
            lowered = str(value).lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(f"expected a boolean, got {value!r}")
        if t is int:
            if isinstance(value, float) and value != int(value):
                raise ValueError(f"expected an integer, got {value!r}")
            return int(value)
        if t is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError) as err:
        raise CliError(f"{name}: {err}") from None


def build_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then config file, then explicit flags."""
    values = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise CliError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise CliError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(loaded, dict):
            raise CliError(f"{path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(_FIELDS))
        if unknown:
            raise CliError(f"{path}: unknown config keys {unknown}")
        values.update(loaded)
    values.update(overrides)
    values = {k: _coerce(k, v) for k, v in values.items()}
    try:
        config = RunConfig(**values)
    except TypeError as err:
        raise CliError(str(err)) from None
    if config.mode not in MODES:
        raise CliError(f"mode must be one of {MODES}, got {config.mode!r}")
    if config.agg_mode not in ("geometric", "embedding"):
        raise CliError(f"agg_mode must be geometric or embedding, got {config.agg_mode!r}")
    if config.jobs < 1:
        raise CliError("jobs must be >= 1")
    return config


# ---------------------------------------------------------------------------
# shared plumbing

def _prepare_out(out: str, force: bool) -> Path:
    path = Path(out).resolve()
    if path.exists() and any(path.iterdir()) and not force:
        raise CliError(f"output directory {path} is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _scene_dir(config: RunConfig, split: str | None = None) -> Path:
    if config.scenes is None:
        raise CliError("missing --scenes directory")
    root = Path(config.scenes).resolve()
    path = root / split if split else root
    if not path.is_dir():
        raise CliError(f"scene directory not found: {path}")
    return path


def _load_split(config: RunConfig, split: str) -> list[sc.Scene]:
    path = _scene_dir(config, split)
    files = sorted(path.glob("*.ply"))
    if not files:
        raise CliError(f"no .ply scenes under {path}")
    return [sc.load_scene(f) for f in files]


def _parallel(jobs: int, fn, items: list) -> list:
    """Order-preserving map, threaded when jobs > 1."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _write_xyz_ply(path: Path, points: np.ndarray) -> None:
    """Bare-position PLY for debug viewing."""
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {points.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for p in points:
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


# ---------------------------------------------------------------------------
# commands

def cmd_synth(config: RunConfig, force: bool) -> int:
    out = _prepare_out(config.out, force)
    (out / "train").mkdir(exist_ok=True)
    (out / "val").mkdir(exist_ok=True)
    jobs_spec = (
        [("train", config.seed + i) for i in range(config.n_train)]
        + [("val", config.seed + 10000 + i) for i in range(config.n_val)]
    )

    def build(item):
        split, seed = item
        scene = sc.generate_scene(config.scene_params(seed))
        sc.save_scene(scene, out / split / f"{scene.scene_id}.ply")
        return {"id": scene.scene_id, "seed": seed, "split": split,
                "points": scene.n_points}

    rows = _parallel(config.jobs, build, jobs_spec)
    manifest = {
        "seed": config.seed,
        "train": [r for r in rows if r["split"] == "train"],
        "val": [r for r in rows if r["split"] == "val"],
        "generator": dataclasses.asdict(config.scene_params(config.seed)),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {config.n_train} train + {config.n_val} val scenes to {out}")
    return 0


def cmd_train(config: RunConfig, force: bool) -> int:
    train_scenes = _load_split(config, "train")
    val_scenes = _load_split(config, "val")
    out = _prepare_out(config.out, force)
    net = Network.create(config.model_config(), seed=config.seed)
    records = tr.train(net, train_scenes, val_scenes, config.train_config(), out)
    totals = [r["total"] for r in records if "total" in r]
    print(f"trained {config.steps} steps: total {totals[0]:.4f} -> {totals[-1]:.4f}; "
          f"checkpoint {out / 'final.ckpt'}")
    return 0


def _infer_scene(net: Network, scene: sc.Scene, config: RunConfig,
                 out: Path, debug: bool) -> int:
    ip = tr.infer_upstream(net, scene, seed=tr.scene_seed(config.seed, scene.scene_id),
                           max_group=config.infer_group)
    objects = tr.finalize(ip, config.mode, eps=config.dbscan_eps,
                          min_pts=config.dbscan_min_pts)
    mt.write_predictions(out, scene.scene_id, objects, scene.n_points)
    if debug and ip is not None:
        dbg = out / "debug"
        dbg.mkdir(exist_ok=True)
        _write_xyz_ply(dbg / f"{scene.scene_id}_proposals.ply", ip.positions)
        _write_xyz_ply(dbg / f"{scene.scene_id}_positive.ply",
                       ip.positions[np.flatnonzero(ip.positive)])
    return len(objects)


def cmd_infer(config: RunConfig, force: bool) -> int:
    if config.ckpt is None:
        raise CliError("missing --ckpt checkpoint path")
    if not Path(config.ckpt).is_file():
        raise CliError(f"checkpoint not found: {config.ckpt}")
    scenes = _load_split(config, config.split)
    out = _prepare_out(config.out, force)
    net, _ = Network.load(config.ckpt)
    debug = log.getEffectiveLevel() <= logging.DEBUG
    counts = _parallel(config.jobs,
                       lambda s: _infer_scene(net, s, config, out, debug), scenes)
    print(f"wrote predictions for {len(scenes)} scenes "
          f"({sum(counts)} objects) to {out}")
    return 0


def cmd_eval(config: RunConfig, force: bool) -> int:
    if config.preds is None:
        raise CliError("missing --preds predictions directory")
    preds_dir = Path(config.preds).resolve()
    if not preds_dir.is_dir():
        raise CliError(f"predictions directory not found: {preds_dir}")
    scenes = _load_split(config, config.split)
    out = _prepare_out(config.out, force)
    table = mt.evaluate_scene_dirs(preds_dir, scenes)
    text = table.format_table()
    print(text)
    (out / "scores.json").write_text(table.to_json())
    (out / "scores.txt").write_text(text + "\n")
    return 0


ABLATION_ROWS = (
    # (circled id, label, checkpoint slot, aggregation mode, reference delta)
    ("1", "proposals + NMS", "ckpt_plain", "nms", None),
    ("2", "aggregation (positions)", "ckpt_plain", "positions", 4.9),
    ("3", "aggregation (embedding)", "ckpt_embedding", "embedding", 9.2),
    ("4", "aggregation (geometric)", "ckpt_plain", "geometric", 10.3),
    ("5", "aggregation (geometric + GCN)", "ckpt_gcn", "geometric", 11.6),
)


def cmd_ablate(config: RunConfig, force: bool) -> int:
    for slot in ("ckpt_gcn", "ckpt_plain"):
        value = getattr(config, slot)
        if value is None:
            raise CliError(f"missing --{slot.replace('_', '-')} checkpoint")
        if not Path(value).is_file():
            raise CliError(f"checkpoint not found: {value}")
    if config.ckpt_embedding is not None and not Path(config.ckpt_embedding).is_file():
        raise CliError(f"checkpoint not found: {config.ckpt_embedding}")

    scenes = _load_split(config, config.split)
    out = _prepare_out(config.out, force)
    gts = [g for scene in scenes for g in mt.gt_objects(scene)]

    upstream_cache: dict[str, list] = {}

    def upstream_for(slot: str):
        if slot not in upstream_cache:
            net, _ = Network.load(getattr(config, slot))
            upstream_cache[slot] = _parallel(
                config.jobs,
                lambda s: tr.infer_upstream(
                    net, s, seed=tr.scene_seed(config.seed, s.scene_id),
                    max_group=config.infer_group),
                scenes)
        return upstream_cache[slot]

    results = []
    for exp_id, label, slot, mode, reference in ABLATION_ROWS:
        if slot == "ckpt_embedding" and config.ckpt_embedding is None:
            results.append({"experiment": exp_id, "label": label, "mode": mode,
                            "map50": None, "delta": None, "reference_delta": reference})
            continue
        preds = []
        for scene, ip in zip(scenes, upstream_for(slot)):
            for obj in tr.finalize(ip, mode, eps=config.dbscan_eps,
                                   min_pts=config.dbscan_min_pts):
                box = mt.fit_box(scene.positions[obj.mask]) if obj.mask.size else None
                preds.append(mt.DetectionRecord(
                    scene_id=scene.scene_id, class_id=obj.semantic_class,
                    confidence=obj.confidence, mask=obj.mask, box=box))
        table = mt.evaluate(preds, gts)
        map50 = table.mean["ap50"]
        results.append({"experiment": exp_id, "label": label, "mode": mode,
                        "map50": None if map50 is None else float(map50),
                        "delta": None, "reference_delta": reference})

    base = results[0]["map50"]
    for row in results[1:]:
        if row["map50"] is not None and base is not None:
            row["delta"] = row["map50"] - base

    lines = [f"{'experiment':<34} {'mAP@50':>8} {'delta':>8} {'reference':>10}"]
    for row in results:
        map50 = "n/a" if row["map50"] is None else f"{row['map50']:.4f}"
        delta = "" if row["delta"] is None else f"{row['delta']:+.4f}"
        ref = "" if row["reference_delta"] is None else f"+{row['reference_delta']:.1f}"
        lines.append(f"({row['experiment']}) {row['label']:<30} {map50:>8} {delta:>8} {ref:>10}")
    text = "\n".join(lines)
    print(text)
    (out / "ablation.json").write_text(
        json.dumps({"experiments": results}, indent=2, sort_keys=True) + "\n")
    (out / "ablation.txt").write_text(text + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--force", action="store_true",
                        help="overwrite non-empty output directories")
    for name in _FIELDS:
        parser.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None,
                            metavar="V", help=f"override config field {name}")


def _setup_logging() -> None:
    level_name = os.environ.get("MPA_LOG", "warning").lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise CliError(f"MPA_LOG must be one of {sorted(levels)}, got {level_name!r}")
    logging.basicConfig(level=levels[level_name], force=True,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("voteseg").setLevel(levels[level_name])


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="voteseg",
        description="Point-cloud instance segmentation: center voting, proposal "
                    "grouping, graph consolidation, and proposal aggregation.")
    subs = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        _add_config_flags(subs.add_parser(name))
    args = parser.parse_args(argv)

    try:
        _setup_logging()
        overrides = {name: value for name, value in vars(args).items()
                     if name in _FIELDS and value is not None}
        config = build_config(args.config, overrides)
        return COMMANDS[args.command](config, args.force)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except _RUNTIME_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
