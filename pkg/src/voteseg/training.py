"""Training loop, multi-task loss composition, and full-scene inference."""
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import backbone as bb
from . import gcn as gc
from . import objgen as og
from . import proposals as pr
from . import scene as sc
from .autodiff import Tensor
from .model import Network

log = logging.getLogger(__name__)

LOSS_KEYS = ("point", "objectness", "semantic", "mask", "aggregation", "total")


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 4000
    batch_size: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    lr_halving: int = 500    # steps between halvings of the learning rate
    crop_size: float = 3.0   # square training crop edge (m)
    max_points: int = 1024   # per-crop point budget
    train_proposals: int = 32
    max_group: int = 32
    clip_norm: float = 1.0   # global gradient-norm bound
    gcn_freeze_steps: int = 500  # consolidation layers hold their init this long
    log_every: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("steps", "batch_size", "lr", "lr_halving", "crop_size",
                     "max_points", "train_proposals", "max_group", "clip_norm",
                     "log_every"):
            if getattr(self, name) <= 0:
                raise TrainingError(f"{name} must be positive")
        if self.gcn_freeze_steps < 0:
            raise TrainingError("gcn_freeze_steps must be >= 0")


def lr_at(step: int, config: TrainConfig) -> float:
    """Learning rate for a 1-indexed step: halves every `lr_halving` steps."""
    return config.lr * 0.5 ** ((step - 1) // config.lr_halving)


def total_loss(point: Tensor, objectness: Tensor, semantic: Tensor,
               mask: Tensor, aggregation: Tensor) -> Tensor:
    """L = L_point + L_obj + 0.1 L_sem + L_mask + L_agg."""
    out = ad.add(point, objectness)
    out = ad.add(out, ad.scale(semantic, 0.1))
    out = ad.add(out, mask)
    return ad.add(out, aggregation)


# ---------------------------------------------------------------------------
# per-crop forward

def prepare_crop(scene: sc.Scene, rng: np.random.Generator,
                 config: TrainConfig) -> sc.Scene:
    """Augment, then crop around a random point; resample crops without objects."""
    aug = sc.augment(scene, seed=int(rng.integers(2**63 - 1)))
    for _ in range(64):
        anchor = aug.positions[int(rng.integers(aug.n_points))]
        try:
            piece = sc.crop(aug, (float(anchor[0]), float(anchor[1])),
                            config.crop_size)
        except sc.EmptyCropError:
            continue
        if piece.n_points > config.max_points:
            keep = rng.choice(piece.n_points, size=config.max_points, replace=False)
            piece = sc.subset(piece, np.sort(keep))
        if not piece.object_mask().any():
            continue
        return piece
    raise TrainingError(f"no object-bearing crop found in scene {scene.scene_id}")


def forward_train(net: Network, crop: sc.Scene,
                  rng: np.random.Generator, config: TrainConfig) -> tuple[Tensor, dict]:
    """Full pipeline on one prepared crop; returns (total, per-component floats)."""
    dtype = net.proposal_mlp.weights[0].data.dtype
    pf = bb.extract_features(crop, net.backbone, dtype=dtype)
    l_point = bb.point_loss(pf, crop)

    votes = pr.cast_votes(pf, crop.positions, crop.object_mask())
    if votes.count == 0:
        raise TrainingError("training crop lost all object points")
    k = min(config.train_proposals, votes.count)
    rows = pr.sample_proposals(votes, k, rng)
    batch = pr.build_proposals(pf, votes, rows, net.config.group_radius,
                               net.proposal_mlp, max_group=config.max_group, rng=rng)

    feats = batch.features
    if net.config.gcn_layers > 0:
        graph = gc.build_graph(batch.positions.data, net.config.graph_radius)
        feats = gc.consolidate(graph, batch.positions, feats, net.gcn)
    heads = og.head_forward(feats, net.heads)

    ids, centers, radii = crop.instance_centers()
    labels = og.assign_objectness(batch.positions.data, centers)
    nearest = og.nearest_gt(batch.positions.data, centers)
    l_obj = og.objectness_loss(heads, labels)
    instance_class = np.array([crop.instance_class(int(i)) for i in ids],
                              dtype=np.int64)
    l_sem = og.proposal_semantic_loss(heads, labels, instance_class[nearest])

    if net.config.agg_mode == "geometric":
        l_agg = og.geometric_agg_loss(heads, batch.positions, labels,
                                      centers, radii, nearest)
    else:
        l_agg = og.embedding_agg_loss(heads, labels, nearest)

    pos_rows = np.flatnonzero(labels == 1)
    if pos_rows.size:
        member_lists = [batch.members[i] for i in pos_rows]
        fg_targets = [
            (crop.instance_id[m] == ids[nearest[i]]).astype(np.int64)
            for i, m in zip(pos_rows, member_lists)
        ]
        l_mask = og.mask_loss_batch(pf.features, member_lists, fg_targets, net.mask)
    else:
        l_mask = Tensor(np.asarray(0.0, dtype=dtype))

    total = total_loss(l_point, l_obj, l_sem, l_mask, l_agg)
    parts = {
        "point": float(l_point.data),
        "objectness": float(l_obj.data),
        "semantic": float(l_sem.data),
        "mask": float(l_mask.data),
        "aggregation": float(l_agg.data),
        "total": float(total.data),
    }
    return total, parts


# ---------------------------------------------------------------------------
# training loop

def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most `max_norm`."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def _dump_divergence(out_dir: Path, step: int, lr: float, parts: list[dict]) -> Path:
    path = out_dir / "divergence.json"
    path.write_text(json.dumps(
        {"step": step, "lr": lr, "batch": parts}, indent=2, sort_keys=True) + "\n")
    return path


def _validation_loss(net: Network, val_scenes: list, config: TrainConfig) -> float | None:
    if not val_scenes:
        return None
    rng = np.random.default_rng(config.seed + 1)  # same crop every epoch
    crop = prepare_crop(val_scenes[0], rng, config)
    with ad.no_grad():
        total, _ = forward_train(net, crop, rng, config)
    return float(total.data)


def train(net: Network, train_scenes: list, val_scenes: list,
          config: TrainConfig, out_dir) -> list[dict]:
    """SGD training; writes an ndjson log plus rolling and final checkpoints."""
    if not train_scenes:
        raise TrainingError("need at least one training scene")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(config.seed)
    named = net.named_parameters()
    opt = ad.SgdMomentum(net.parameters(), lr=config.lr, momentum=config.momentum)
    epoch_steps = max(1, math.ceil(len(train_scenes) / config.batch_size))
    # Early on every proposal is labeled negative (votes are still random),
    # which rewards constant consolidation output; channel max then collapses
    # all node features together and class information never recovers. Holding
    # the consolidation layers at their init until voting has converged keeps
    # them node-preserving while real supervision arrives.
    frozen = [p for name, p in named.items() if name.startswith("gcn.")]

    records: list[dict] = []
    with open(out / "train_log.ndjson", "w") as log_file:
        def emit(record: dict) -> None:
            records.append(record)
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

        for step in range(1, config.steps + 1):
            opt.lr = lr_at(step, config)
            opt.zero_grad()
            batch_parts: list[dict] = []
            batch_total: Tensor | None = None
            for _ in range(config.batch_size):
                scene = train_scenes[int(rng.integers(len(train_scenes)))]
                crop = prepare_crop(scene, rng, config)
                total, parts = forward_train(net, crop, rng, config)
                batch_parts.append(parts)
                batch_total = total if batch_total is None else ad.add(batch_total, total)
            mean_total = ad.scale(batch_total, 1.0 / config.batch_size)

            if not np.isfinite(mean_total.data):
                path = _dump_divergence(out, step, opt.lr, batch_parts)
                raise TrainingDiverged(f"non-finite loss at step {step}; see {path}")
            ad.backward(mean_total)
            for name, p in named.items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    path = _dump_divergence(out, step, opt.lr, batch_parts)
                    raise TrainingDiverged(
                        f"non-finite gradient in {name} at step {step}; see {path}")
            if step <= config.gcn_freeze_steps:
                for p in frozen:
                    p.grad = None
            grad_norm = clip_gradients(opt.params, config.clip_norm)
            opt.step()

            if step == 1 or step % config.log_every == 0:
                record = {"step": step, "lr": opt.lr, "grad_norm": grad_norm}
                for key in LOSS_KEYS:
                    record[key] = sum(p[key] for p in batch_parts) / len(batch_parts)
                emit(record)
                log.info("step %d lr %.4g total %.4f", step, opt.lr, record["total"])
            if step % epoch_steps == 0:
                val = _validation_loss(net, val_scenes, config)
                epoch_record = {"step": step, "event": "epoch"}
                if val is not None:
                    epoch_record["val_total"] = val
                emit(epoch_record)
                net.save(out / "latest.ckpt", {"step": step})

    net.save(out / "final.ckpt", {"step": config.steps})
    return records


# ---------------------------------------------------------------------------
# full-scene inference

def scene_seed(base_seed: int, scene_id: str) -> int:
    """Stable per-scene sampling seed."""
    digest = hashlib.sha256(f"{base_seed}:{scene_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def infer_upstream(net: Network, scene: sc.Scene, seed: int = 0,
                   max_group: int | None = 256) -> og.InferenceProposals | None:
    """Everything before aggregation: votes, proposals, heads, masks.

    Voting uses the predicted semantics; None when no point is predicted
    as an object. `max_group` bounds per-proposal memory on dense scenes.
    """
    with ad.no_grad():
        return _infer_upstream(net, scene, seed, max_group)


def _infer_upstream(net: Network, scene: sc.Scene, seed: int,
                    max_group: int | None) -> og.InferenceProposals | None:
    dtype = net.proposal_mlp.weights[0].data.dtype
    pf = bb.extract_features(scene, net.backbone, dtype=dtype)
    predicted = np.argmax(pf.semantic_logits.data, axis=1)
    object_mask = np.isin(predicted, sc.OBJECT_CLASSES)
    if not object_mask.any():
        return None

    votes = pr.cast_votes(pf, scene.positions, object_mask)
    rng = np.random.default_rng(seed)
    k = min(net.config.num_proposals, votes.count)
    method = "fps" if net.config.use_fps else "random"
    rows = pr.sample_proposals(votes, k, rng, method=method)
    batch = pr.build_proposals(pf, votes, rows, net.config.group_radius,
                               net.proposal_mlp, max_group=max_group, rng=rng)

    feats = batch.features
    if net.config.gcn_layers > 0:
        graph = gc.build_graph(batch.positions.data, net.config.graph_radius)
        feats = gc.consolidate(graph, batch.positions, feats, net.gcn)
    heads = og.head_forward(feats, net.heads)

    positive = heads.predicted_positive()
    fg_masks: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * batch.count
    pos_rows = np.flatnonzero(positive)
    if pos_rows.size:
        member_lists = [batch.members[i] for i in pos_rows]
        logits, starts = og.mask_forward_batch(pf.features, member_lists, net.mask)
        fg = logits.data[:, 1] > logits.data[:, 0]
        bounds = np.append(starts, fg.size)
        for row, members, lo, hi in zip(pos_rows, member_lists,
                                        bounds[:-1], bounds[1:]):
            fg_masks[row] = np.unique(members[fg[lo:hi]])

    return og.InferenceProposals(
        positions=batch.positions.data.astype(np.float64),
        objectness_prob=heads.objectness_prob(),
        positive=positive,
        semantic_class=np.argmax(heads.semantic_logits.data, axis=1),
        aggregation=heads.aggregation.data.astype(np.float64),
        fg_masks=fg_masks,
    )


def finalize(proposals: og.InferenceProposals | None, mode: str,
             eps: float | None = None, min_pts: int = 2) -> list[og.FinalObject]:
    """Aggregation stage only; `mode` picks clustering or the NMS baseline."""
    if proposals is None:
        return []
    if mode == "nms":
        return og.nms_baseline(proposals)
    return og.aggregate(proposals, mode, eps=eps, min_pts=min_pts)


def infer(net: Network, scene: sc.Scene, mode: str = "geometric", seed: int = 0,
          eps: float | None = None, min_pts: int = 2) -> list[og.FinalObject]:
    return finalize(infer_upstream(net, scene, seed), mode, eps=eps, min_pts=min_pts)
