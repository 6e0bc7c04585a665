"""From points to proposals: center voting, radius grouping, graph consolidation.

Walks the untrained pipeline end to end on one scene to show the data flow
and the shapes involved. Nothing here is learned yet; the interesting part
is how points become votes, votes become grouped proposals, and proposals
become nodes of a neighborhood graph.
"""
import numpy as np

from voteseg import autodiff as ad
from voteseg import backbone as bb
from voteseg import gcn
from voteseg import proposals as pr
from voteseg import scene as sc
from voteseg.model import ModelConfig, Network

scene = sc.generate_scene(sc.SceneGenParams(seed=8, room_extent=(5.0, 5.0, 3.0),
                                            points_per_m2=120.0))
net = Network.create(ModelConfig(gcn_layers=3), seed=0)

# ---------------------------------------------------------------------------
# Per-point features and center votes
#
# The backbone fuses point encodings with fine (0.25 m) and coarse (1 m)
# voxel context, then predicts semantic logits and a per-point offset toward
# the owning object center. Only object points cast votes; here the ground
# truth mask stands in for the (untrained) semantic prediction.

with ad.no_grad():
    pf = bb.extract_features(scene, net.backbone, dtype=np.float32)
print(f"{scene.n_points} points -> features {pf.features.data.shape}, "
      f"logits {pf.semantic_logits.data.shape}, offsets {pf.center_offsets.data.shape}")

object_mask = scene.object_mask()
votes = pr.cast_votes(pf, scene.positions, object_mask)
print(f"{int(object_mask.sum())} object points cast {votes.count} votes")

# With a trained model the votes of one object collapse onto its center;
# untrained offsets scatter them:
ids, centers, _ = scene.instance_centers()
first = scene.instance_id[votes.point_indices] == ids[0]
d = np.linalg.norm(votes.positions.data[first] - centers[0], axis=1)
print(f"instance {ids[0]}: vote-to-center distance "
      f"mean {d.mean():.3f} m (untrained, unsurprisingly wide)")

# ---------------------------------------------------------------------------
# Sampling and grouping
#
# Proposal positions are a random subset of votes; each proposal gathers
# every vote strictly inside a 0.3 m ball and max-pools a shared MLP over
# the members' point features.

rng = np.random.default_rng(0)
rows = pr.sample_proposals(votes, 32, rng)
batch = pr.build_proposals(pf, votes, rows, radius=0.3,
                           params=net.proposal_mlp, max_group=64, rng=rng)
sizes = np.array([m.size for m in batch.members])
print(f"\n32 proposals; group sizes min/median/max = "
      f"{sizes.min()}/{int(np.median(sizes))}/{sizes.max()}")
print(f"proposal features: {batch.features.data.shape}")

# Farthest point sampling is the deterministic alternative to random rows:
fps_rows = pr.sample_proposals(votes, 8, np.random.default_rng(1), method="fps")
spread = np.linalg.norm(
    votes.positions.data[fps_rows][:, None] - votes.positions.data[fps_rows], axis=2)
print(f"fps spread: closest pair of 8 fps proposals {spread[spread > 0].min():.2f} m")

# ---------------------------------------------------------------------------
# The proposal graph
#
# Proposals within 2 m become graph neighbors; stacked edge-convolution
# layers then let every proposal see its neighborhood before the heads
# score it. Isolated proposals keep a zero neighbor instead of an edge.

graph = gcn.build_graph(batch.positions.data, radius=2.0)
degree = np.array([graph.degree(i) for i in range(graph.n_nodes)])
print(f"\ngraph: {graph.pairs.shape[0]} undirected edges, "
      f"degree min/mean/max = {degree.min()}/{degree.mean():.1f}/{degree.max()}")

with ad.no_grad():
    consolidated = gcn.consolidate(graph, batch.positions, batch.features, net.gcn)
delta = np.abs(consolidated.data - batch.features.data).mean()
print(f"consolidation moved features by {delta:.3f} on average (3 layers)")
