"""Proposal heads, supervision targets, and object formation.

Each refined proposal predicts semantic logits, aggregation features,
and a two-way objectness score. At inference the predicted-positive
proposals either pass through score-ordered suppression (the baseline)
or are clustered and merged, multiple proposals explaining one object
jointly. Cluster membership comes from a density scan over the chosen
aggregation space: raw positions, refined centers with radii, or the
learned embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor
from .metrics import mask_iou

POSITIVE_RADIUS = 0.3
NEGATIVE_RADIUS = 0.6
AMBIGUITY_RATIO = 0.6

DBSCAN_EPS = {"positions": 0.3, "geometric": 0.3, "embedding": 0.05}
AGG_MODES = ("positions", "geometric", "embedding")


class ObjGenError(ValueError):
    pass


# ---------------------------------------------------------------------------
# proposal heads

@dataclass
class HeadParams:
    mlp: MlpParams  # D -> 128 -> 128 -> (S + E + 2)
    num_classes: int
    agg_dim: int

    @classmethod
    def create(cls, rng: np.random.Generator, in_dim: int = 128, num_classes: int = 5,
               agg_dim: int = 4, hidden: int = 128, dtype=np.float64) -> "HeadParams":
        out = num_classes + agg_dim + 2
        return cls(mlp=MlpParams.create((in_dim, hidden, hidden, out), rng, dtype=dtype),
                   num_classes=num_classes, agg_dim=agg_dim)

    def named(self) -> dict[str, Tensor]:
        return self.mlp.named("heads")


@dataclass
class ProposalHeads:
    semantic_logits: Tensor   # (K, S)
    aggregation: Tensor       # (K, E)
    objectness_logits: Tensor  # (K, 2), column 1 is "object"

    @property
    def count(self) -> int:
        return self.semantic_logits.data.shape[0]

    def refined_centers(self, positions: np.ndarray) -> np.ndarray:
        """positions + predicted center offsets (geometric head layout)."""
        return positions + self.aggregation.data[:, :3]

    def objectness_prob(self) -> np.ndarray:
        z = self.objectness_logits.data
        m = z.max(axis=1, keepdims=True)
        e = np.exp(z - m)
        return e[:, 1] / e.sum(axis=1)

    def predicted_positive(self) -> np.ndarray:
        z = self.objectness_logits.data
        return z[:, 1] > z[:, 0]


def head_forward(feats: Tensor, params: HeadParams) -> ProposalHeads:
    """Split the head MLP output into [semantic | aggregation | objectness]."""
    out = ad.mlp_forward(params.mlp, feats)
    s, e = params.num_classes, params.agg_dim
    if out.data.shape[1] != s + e + 2:
        raise ObjGenError(f"head output width {out.data.shape[1]} != {s}+{e}+2")
    return ProposalHeads(
        semantic_logits=ad.slice_cols(out, 0, s),
        aggregation=ad.slice_cols(out, s, s + e),
        objectness_logits=ad.slice_cols(out, s + e, s + e + 2),
    )


# ---------------------------------------------------------------------------
# supervision targets

def assign_objectness(positions: np.ndarray, gt_centers: np.ndarray) -> np.ndarray:
    """Per-proposal labels: 1 positive, 0 negative, -1 excluded.

    A proposal is positive when its nearest ground-truth center is closer
    than 0.3 m. It is negative when the nearest center is farther than
    0.6 m, or when it sits ambiguously between two centers (d1 > 0.6*d2).
    Everything else is excluded from the objectness loss. No ground truth
    at all makes every proposal negative.
    """
    k = positions.shape[0]
    if gt_centers.shape[0] == 0:
        return np.zeros(k, dtype=np.int64)
    d = np.linalg.norm(positions[:, None, :] - gt_centers[None, :, :], axis=2)
    d_sorted = np.sort(d, axis=1)
    d1 = d_sorted[:, 0]
    d2 = d_sorted[:, 1] if gt_centers.shape[0] > 1 else np.full(k, np.inf)
    labels = np.full(k, -1, dtype=np.int64)
    labels[(d1 > NEGATIVE_RADIUS) | (d1 > AMBIGUITY_RATIO * d2)] = 0
    labels[d1 < POSITIVE_RADIUS] = 1
    return labels


def nearest_gt(positions: np.ndarray, gt_centers: np.ndarray) -> np.ndarray:
    """Index of the closest ground-truth center for each proposal."""
    if gt_centers.shape[0] == 0:
        raise ObjGenError("no ground-truth centers to match against")
    d = np.linalg.norm(positions[:, None, :] - gt_centers[None, :, :], axis=2)
    return np.argmin(d, axis=1).astype(np.int64)


def objectness_loss(heads: ProposalHeads, labels: np.ndarray) -> Tensor:
    dtype = heads.objectness_logits.data.dtype
    keep = np.flatnonzero(labels >= 0)
    if keep.size == 0:
        return Tensor(np.asarray(0.0, dtype=dtype))
    return ad.cross_entropy(ad.gather_rows(heads.objectness_logits, keep), labels[keep])


def proposal_semantic_loss(heads: ProposalHeads, labels: np.ndarray,
                           target_class: np.ndarray) -> Tensor:
    """CE over positive proposals against their nearest object's class."""
    dtype = heads.semantic_logits.data.dtype
    pos = np.flatnonzero(labels == 1)
    if pos.size == 0:
        return Tensor(np.asarray(0.0, dtype=dtype))
    return ad.cross_entropy(ad.gather_rows(heads.semantic_logits, pos), target_class[pos])


# ---------------------------------------------------------------------------
# aggregation-feature losses

def geometric_agg_loss(heads: ProposalHeads, positions: Tensor, labels: np.ndarray,
                       gt_centers: np.ndarray, gt_radii: np.ndarray,
                       nearest: np.ndarray) -> Tensor:
    """Huber penalties pulling refined centers and radii to the nearest object."""
    dtype = heads.aggregation.data.dtype
    if heads.aggregation.data.shape[1] != 4:
        raise ObjGenError("geometric aggregation head must be 4-wide [offset, radius]")
    pos_rows = np.flatnonzero(labels == 1)
    if pos_rows.size == 0:
        return Tensor(np.asarray(0.0, dtype=dtype))
    target_c = gt_centers[nearest[pos_rows]].astype(dtype)
    target_r = gt_radii[nearest[pos_rows]].astype(dtype)[:, None]
    agg = ad.gather_rows(heads.aggregation, pos_rows)
    refined = ad.add(ad.gather_rows(positions, pos_rows), ad.slice_cols(agg, 0, 3))
    center_term = ad.huber_norm(ad.sub(refined, Tensor(target_c)))
    radius_term = ad.huber_norm(ad.sub(ad.slice_cols(agg, 3, 4), Tensor(target_r)))
    return ad.add(ad.mean_all(center_term), ad.mean_all(radius_term))


def discriminative_loss(features: Tensor, assignment: np.ndarray,
                        delta_v: float = 0.1, delta_d: float = 0.1,
                        gamma: float = 0.001) -> Tensor:
    """Pull embeddings to their cluster mean, push cluster means apart.

    L = L_var + L_dist + gamma * L_reg with hinges delta_v (pull) and
    2*delta_d (push); L_dist averages over ordered pairs of distinct
    clusters and vanishes when fewer than two clusters exist.
    """
    dtype = features.data.dtype
    p = features.data.shape[0]
    if p == 0:
        return Tensor(np.asarray(0.0, dtype=dtype))
    assignment = np.asarray(assignment, dtype=np.int64)
    if assignment.shape != (p,):
        raise ObjGenError(f"assignment shape {assignment.shape} != ({p},)")
    order = np.argsort(assignment, kind="stable")
    _, starts_idx = np.unique(assignment[order], return_index=True)
    c = starts_idx.size
    sorted_feats = ad.gather_rows(features, order)
    mu = ad.segment_mean(sorted_feats, starts_idx)

    seg_of_row = np.repeat(np.arange(c), np.diff(np.append(starts_idx, p)))
    pull = ad.rownorm(ad.sub(ad.gather_rows(mu, seg_of_row), sorted_feats))
    hinge_v = ad.relu(ad.add(pull, -delta_v))
    l_var = ad.mean_all(ad.segment_mean(ad.square(hinge_v), starts_idx))

    l_reg = ad.mean_all(ad.rownorm(mu))

    if c > 1:
        ia, ib = np.nonzero(~np.eye(c, dtype=bool))
        gap = ad.rownorm(ad.sub(ad.gather_rows(mu, ia), ad.gather_rows(mu, ib)))
        hinge_d = ad.relu(ad.add(ad.scale(gap, -1.0), 2.0 * delta_d))
        l_dist = ad.mean_all(ad.square(hinge_d))
    else:
        l_dist = Tensor(np.asarray(0.0, dtype=dtype))

    return ad.add(ad.add(l_var, l_dist), ad.scale(l_reg, gamma))


def embedding_agg_loss(heads: ProposalHeads, labels: np.ndarray,
                       nearest: np.ndarray) -> Tensor:
    """Discriminative loss over positive proposals, grouped by nearest object."""
    dtype = heads.aggregation.data.dtype
    pos_rows = np.flatnonzero(labels == 1)
    if pos_rows.size == 0:
        return Tensor(np.asarray(0.0, dtype=dtype))
    feats = ad.gather_rows(heads.aggregation, pos_rows)
    return discriminative_loss(feats, nearest[pos_rows])


# ---------------------------------------------------------------------------
# mask head

@dataclass
class MaskParams:
    embed: MlpParams     # F -> 128 shared affine
    classify: MlpParams  # 256 -> 128 -> 64 -> 32 -> 2

    @classmethod
    def create(cls, rng: np.random.Generator, feature_dim: int = 64,
               width: int = 128, dtype=np.float64) -> "MaskParams":
        return cls(
            embed=MlpParams.create((feature_dim, width), rng, dtype=dtype),
            classify=MlpParams.create((2 * width, 128, 64, 32, 2), rng, dtype=dtype),
        )

    def named(self) -> dict[str, Tensor]:
        out = self.embed.named("mask.embed")
        out.update(self.classify.named("mask.classify"))
        return out


def mask_forward_batch(point_features: Tensor, member_lists: list[np.ndarray],
                       params: MaskParams) -> tuple[Tensor, np.ndarray]:
    """Foreground/background logits for every member point of every proposal.

    Returns (logits (R, 2), segment starts) where R concatenates the member
    lists in order. Per proposal: a shared affine embeds its points, the
    channel max summarizes the group, and the classifier scores
    [point embedding, group summary] rows.
    """
    if not member_lists or any(m.size == 0 for m in member_lists):
        raise ObjGenError("mask head needs non-empty member lists")
    counts = np.array([m.size for m in member_lists], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    all_members = np.concatenate(member_lists)
    seg_of_row = np.repeat(np.arange(len(member_lists)), counts)

    per = ad.mlp_forward(params.embed, ad.gather_rows(point_features, all_members))
    pooled = ad.segment_max(per, starts)
    rows = ad.concat_cols([per, ad.gather_rows(pooled, seg_of_row)])
    return ad.mlp_forward(params.classify, rows), starts


def mask_head(point_features: Tensor, members: np.ndarray, params: MaskParams,
              instance_of_point: np.ndarray | None = None,
              target_instance: int | None = None,
              gamma: float = 2.0, alpha: float = 0.25) -> tuple[Tensor, Tensor | None]:
    """Mask logits for one proposal; adds the focal loss when targets are given.

    Foreground supervision marks the member points whose instance matches
    the proposal's assigned object.
    """
    logits, _ = mask_forward_batch(point_features, [np.asarray(members)], params)
    loss = None
    if instance_of_point is not None:
        if target_instance is None:
            raise ObjGenError("mask supervision needs the assigned instance")
        fg = (instance_of_point[members] == target_instance).astype(np.int64)
        loss = ad.focal_loss(logits, fg, gamma=gamma, alpha=alpha)
    return logits, loss


def mask_loss_batch(point_features: Tensor, member_lists: list[np.ndarray],
                    fg_targets: list[np.ndarray], params: MaskParams,
                    gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Mean over proposals of each proposal's mean focal loss."""
    logits, starts = mask_forward_batch(point_features, member_lists, params)
    targets = np.concatenate(fg_targets)
    rows = ad.focal_rows(logits, targets, gamma=gamma, alpha=alpha)
    return ad.mean_all(ad.segment_mean(rows, starts))


# ---------------------------------------------------------------------------
# density clustering

def dbscan(points: np.ndarray, eps: float, min_pts: int = 2) -> np.ndarray:
    """Density clustering; returns per-point cluster ids, -1 for noise.

    A point is core when at least `min_pts` points (itself included) lie
    within `eps` (inclusive). Clusters are connected components of core
    points, numbered in input order of their first core; border points
    join the lowest-id adjacent cluster. Deterministic for a fixed input
    ordering.
    """
    m = points.shape[0]
    if m == 0:
        return np.empty(0, dtype=np.int64)
    if points.ndim != 2:
        raise ObjGenError(f"dbscan expects (M, D) points, got {points.shape}")
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    adj = d2 <= eps * eps
    n_nbr = adj.sum(axis=1)
    core = n_nbr >= min_pts

    labels = np.full(m, -1, dtype=np.int64)
    cluster = 0
    for i in range(m):
        if not core[i] or labels[i] >= 0:
            continue
        frontier = [i]
        labels[i] = cluster
        while frontier:
            cur = frontier.pop()
            for j in np.flatnonzero(adj[cur] & core):
                if labels[j] < 0:
                    labels[j] = cluster
                    frontier.append(int(j))
        cluster += 1

    for i in range(m):
        if core[i] or labels[i] >= 0:
            continue
        nbr_clusters = labels[adj[i] & core]
        nbr_clusters = nbr_clusters[nbr_clusters >= 0]
        if nbr_clusters.size:
            labels[i] = nbr_clusters.min()
    return labels


# ---------------------------------------------------------------------------
# object formation

@dataclass
class FinalObject:
    """One predicted object: scene point indices, class id, confidence."""

    mask: np.ndarray
    semantic_class: int
    confidence: float


@dataclass
class InferenceProposals:
    """Numpy view of the positive-gated proposal outputs for one scene."""

    positions: np.ndarray        # (K, 3)
    objectness_prob: np.ndarray  # (K,)
    positive: np.ndarray         # (K,) bool gate
    semantic_class: np.ndarray   # (K,)
    aggregation: np.ndarray      # (K, E)
    fg_masks: list[np.ndarray]   # per proposal: predicted-foreground point idx

    @property
    def count(self) -> int:
        return self.positions.shape[0]


def _cluster_space(ip: InferenceProposals, mode: str, rows: np.ndarray) -> np.ndarray:
    if mode == "positions":
        return ip.positions[rows]
    if mode == "geometric":
        if ip.aggregation.shape[1] < 4:
            raise ObjGenError("geometric clustering needs [offset, radius] features")
        refined = ip.positions[rows] + ip.aggregation[rows, :3]
        return np.concatenate([refined, ip.aggregation[rows, 3:4]], axis=1)
    if mode == "embedding":
        return ip.aggregation[rows]
    raise ObjGenError(f"unknown aggregation mode '{mode}'")


def _majority_class(classes: np.ndarray, weights: np.ndarray) -> int:
    score: dict[int, float] = {}
    for c, w in zip(classes, weights):
        score[int(c)] = score.get(int(c), 0.0) + float(w)
    best = max(score.items(), key=lambda kv: (kv[1], -kv[0]))
    return best[0]


def aggregate(ip: InferenceProposals, mode: str, eps: float | None = None,
              min_pts: int = 2) -> list[FinalObject]:
    """Merge positive proposals into objects by density clustering.

    Cluster members pool their foreground masks (union); noise proposals
    become singleton objects. The object class is the objectness-weighted
    majority of member classes and the confidence the mean objectness.
    Clusters whose pooled mask is empty yield no object.
    """
    if mode not in AGG_MODES:
        raise ObjGenError(f"unknown aggregation mode '{mode}'")
    if eps is None:
        eps = DBSCAN_EPS[mode]
    rows = np.flatnonzero(ip.positive)
    if rows.size == 0:
        return []
    labels = dbscan(_cluster_space(ip, mode, rows), eps, min_pts)
    next_id = labels.max() + 1 if labels.size else 0
    labels = labels.copy()
    for i in np.flatnonzero(labels < 0):  # noise proposals stand alone
        labels[i] = next_id
        next_id += 1

    objects: list[FinalObject] = []
    for cluster_id in np.unique(labels):
        members = rows[labels == cluster_id]
        pooled = np.unique(np.concatenate([ip.fg_masks[i] for i in members]))
        if pooled.size == 0:
            continue
        cls = _majority_class(ip.semantic_class[members], ip.objectness_prob[members])
        conf = float(ip.objectness_prob[members].mean())
        objects.append(FinalObject(mask=pooled.astype(np.int64),
                                   semantic_class=cls, confidence=conf))
    return objects


def nms_baseline(ip: InferenceProposals, iou_threshold: float = 0.25) -> list[FinalObject]:
    """Score-ordered suppression over positive proposals' foreground masks."""
    rows = np.flatnonzero(ip.positive)
    if rows.size == 0:
        return []
    order = rows[np.lexsort((rows, -ip.objectness_prob[rows]))]
    kept: list[int] = []
    for i in order:
        if ip.fg_masks[i].size == 0:
            continue
        if all(mask_iou(ip.fg_masks[i], ip.fg_masks[j]) <= iou_threshold for j in kept):
            kept.append(int(i))
    return [FinalObject(mask=np.asarray(ip.fg_masks[i], dtype=np.int64),
                        semantic_class=int(ip.semantic_class[i]),
                        confidence=float(ip.objectness_prob[i]))
            for i in kept]
