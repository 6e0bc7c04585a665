"""Model configuration and the assembled parameter set.

The network is a plain container of parameter groups; the forward passes
live next to their losses (`backbone`, `proposals`, `gcn`, `objgen`) and
are orchestrated by `training`.
"""
from dataclasses import dataclass, asdict

import numpy as np

from .autodiff import MlpParams, Tensor
from . import checkpoint
from .backbone import BackboneParams
from .gcn import GcnParams
from .objgen import AGG_MODES, HeadParams, MaskParams


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs; everything that changes parameter shapes or wiring."""

    num_classes: int = 5
    feature_dim: int = 64      # per-point feature width F
    proposal_dim: int = 128    # proposal feature width D
    gcn_layers: int = 10
    agg_mode: str = "geometric"
    group_radius: float = 0.3  # vote grouping radius (m)
    graph_radius: float = 2.0  # proposal graph connectivity (m)
    fine_voxel: float = 0.25
    coarse_voxel: float = 1.0
    num_proposals: int = 500   # proposals sampled at inference
    use_fps: bool = False

    def __post_init__(self):
        if self.agg_mode not in AGG_MODES:
            raise ModelConfigError(f"unknown agg_mode {self.agg_mode!r}")
        if self.gcn_layers < 0:
            raise ModelConfigError("gcn_layers must be >= 0")

    @property
    def agg_dim(self) -> int:
        # geometric: center offset + radius; embedding: 5-d cluster space
        return 4 if self.agg_mode == "geometric" else 5


@dataclass
class Network:
    config: ModelConfig
    backbone: BackboneParams
    proposal_mlp: MlpParams   # (F + 3) -> 128 -> D, shared over group members
    gcn: GcnParams
    heads: HeadParams
    mask: MaskParams

    @classmethod
    def create(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "Network":
        rng = np.random.default_rng(seed)
        f, d = config.feature_dim, config.proposal_dim
        return cls(
            config=config,
            backbone=BackboneParams.create(
                rng, feature_dim=f, num_classes=config.num_classes, dtype=dtype,
                fine_voxel=config.fine_voxel, coarse_voxel=config.coarse_voxel),
            proposal_mlp=MlpParams.create((f + 3, 128, d), rng, dtype=dtype),
            gcn=GcnParams.create(config.gcn_layers, rng, feat_dim=d, dtype=dtype),
            heads=HeadParams.create(rng, in_dim=d, num_classes=config.num_classes,
                                    agg_dim=config.agg_dim, dtype=dtype),
            mask=MaskParams.create(rng, feature_dim=f, dtype=dtype),
        )

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.backbone.named())
        out.update(self.proposal_mlp.named("proposal"))
        out.update(self.gcn.named())
        out.update(self.heads.named())
        out.update(self.mask.named())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {name: t.data for name, t in self.named_parameters().items()}
        meta = {"config": asdict(self.config)}
        if extra_meta:
            meta.update(extra_meta)
        checkpoint.save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> tuple["Network", dict]:
        """Rebuild a network from a checkpoint; returns (network, meta)."""
        arrays, meta = checkpoint.load_arrays(path)
        if "config" not in meta:
            raise checkpoint.CheckpointError(f"{path}: no model config in metadata")
        config = ModelConfig(**meta["config"])
        net = cls.create(config, seed=0, dtype=np.float32)
        params = net.named_parameters()
        missing = sorted(set(params) - set(arrays))
        surplus = sorted(set(arrays) - set(params))
        if missing or surplus:
            raise checkpoint.CheckpointError(
                f"{path}: parameter mismatch (missing {missing[:3]}, surplus {surplus[:3]})")
        for name, tensor in params.items():
            arr = arrays[name]
            if arr.shape != tensor.data.shape:
                raise checkpoint.CheckpointError(
                    f"{path}: {name} has shape {arr.shape}, expected {tensor.data.shape}")
            tensor.data = arr
        return net, meta
