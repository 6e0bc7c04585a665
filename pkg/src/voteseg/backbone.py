"""Per-point feature extraction with two-scale voxel context.

Each point contributes [voxel-local position, color, normal] to a shared
MLP; the per-point encodings are mean-pooled inside fine and coarse
voxels and the pooled context is concatenated back before a fusion MLP.
Feeding voxel-local rather than absolute coordinates keeps the features
equivariant to translations by exact voxel multiples. Two heads ride on
the fused features: per-point semantic logits and a 3-vector offset that
points from the surface toward the owning object center.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor
from .scene import Scene


class BackboneError(ValueError):
    pass


@dataclass
class BackboneParams:
    encoder: MlpParams        # 9 -> 32 -> 64
    fuse: MlpParams           # 192 -> 128 -> F
    semantic_head: MlpParams  # F -> 64 -> C
    center_head: MlpParams    # F -> 64 -> 3
    fine_voxel: float = 0.25
    coarse_voxel: float = 1.0

    @classmethod
    def create(cls, rng: np.random.Generator, feature_dim: int = 64,
               num_classes: int = 5, dtype=np.float64,
               fine_voxel: float = 0.25, coarse_voxel: float = 1.0) -> "BackboneParams":
        enc_out = 64
        return cls(
            encoder=MlpParams.create((9, 32, enc_out), rng, dtype=dtype),
            fuse=MlpParams.create((3 * enc_out, 128, feature_dim), rng, dtype=dtype),
            semantic_head=MlpParams.create((feature_dim, 64, num_classes), rng, dtype=dtype),
            center_head=MlpParams.create((feature_dim, 64, 3), rng, dtype=dtype),
            fine_voxel=fine_voxel,
            coarse_voxel=coarse_voxel,
        )

    def named(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.encoder.named("backbone.encoder"))
        out.update(self.fuse.named("backbone.fuse"))
        out.update(self.semantic_head.named("backbone.semantic"))
        out.update(self.center_head.named("backbone.center"))
        return out


@dataclass
class PointFeatures:
    """Backbone outputs for one scene; tensors share a live graph."""

    features: Tensor         # (N, F)
    semantic_logits: Tensor  # (N, C)
    center_offsets: Tensor   # (N, 3)

    @property
    def n_points(self) -> int:
        return self.features.data.shape[0]


def _voxel_inverse(positions: np.ndarray, voxel: float) -> tuple[np.ndarray, int]:
    """Map each point to a dense voxel index (deterministic ordering)."""
    cells = np.floor(positions / voxel).astype(np.int64)
    # positions are desk-scale; 2^20 cells per axis is unreachable
    base = np.int64(1) << 20
    key = (cells[:, 0] + (base >> 1)) * base * base \
        + (cells[:, 1] + (base >> 1)) * base \
        + (cells[:, 2] + (base >> 1))
    uniq, inverse = np.unique(key, return_inverse=True)
    return inverse, uniq.size


def extract_features(scene: Scene, params: BackboneParams, dtype=np.float64) -> PointFeatures:
    if scene.n_points == 0:
        raise BackboneError("cannot extract features from an empty scene")
    pos = scene.positions
    local = pos - params.fine_voxel * np.floor(pos / params.fine_voxel)
    x9 = np.concatenate([local, scene.colors, scene.normals], axis=1).astype(dtype)
    enc = ad.mlp_forward(params.encoder, Tensor(x9))

    inv_f, n_f = _voxel_inverse(pos, params.fine_voxel)
    inv_c, n_c = _voxel_inverse(pos, params.coarse_voxel)
    ctx_fine = ad.indexed_mean(enc, inv_f, n_f)
    ctx_coarse = ad.indexed_mean(enc, inv_c, n_c)

    fused = ad.mlp_forward(params.fuse, ad.concat_cols([enc, ctx_fine, ctx_coarse]))
    return PointFeatures(
        features=fused,
        semantic_logits=ad.mlp_forward(params.semantic_head, fused),
        center_offsets=ad.mlp_forward(params.center_head, fused),
    )


def center_loss(pf: PointFeatures, scene: Scene) -> Tensor:
    """Mean Huber penalty of ||x_i + offset_i - c*_i|| over object points.

    c*_i is the bounding-box center of the point's instance, computed from
    the points present in this (possibly cropped) scene. Scenes with zero
    object points contribute a hard zero.
    """
    dtype = pf.center_offsets.data.dtype
    obj = np.flatnonzero(scene.object_mask())
    if obj.size == 0:
        return Tensor(np.asarray(0.0, dtype=dtype))
    ids, centers, _ = scene.instance_centers()
    row_of = {int(i): k for k, i in enumerate(ids)}
    target = centers[[row_of[int(i)] for i in scene.instance_id[obj]]]
    base = (scene.positions[obj] - target).astype(dtype)
    resid = ad.add(ad.gather_rows(pf.center_offsets, obj), Tensor(base))
    return ad.mean_all(ad.huber_norm(resid))


def semantic_point_loss(pf: PointFeatures, scene: Scene) -> Tensor:
    return ad.cross_entropy(pf.semantic_logits, scene.semantic_label)


def point_loss(pf: PointFeatures, scene: Scene, semantic_weight: float = 0.1) -> Tensor:
    """Per-point objective: weighted semantic CE plus center-offset Huber."""
    return ad.add(ad.scale(semantic_point_loss(pf, scene), semantic_weight),
                  center_loss(pf, scene))
