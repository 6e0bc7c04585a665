"""Votes, proposal sampling, and radius grouping.

Every object point casts a vote at its position plus the predicted
center offset. Proposals are sampled vote positions; each proposal
adopts the votes (and thereby the points) that land strictly within the
grouping radius of its position, and summarizes them with a max-pooled
shared MLP over [point feature, vote - proposal position] rows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, Tensor
from .backbone import PointFeatures


class ProposalError(ValueError):
    pass


class NoVotesError(ProposalError):
    """Proposal sampling requires at least one vote."""


@dataclass
class Votes:
    """One vote per object point; positions stay on the autodiff graph."""

    point_indices: np.ndarray  # (M,) indices into the scene
    positions: Tensor          # (M, 3) = point position + predicted offset

    @property
    def count(self) -> int:
        return self.point_indices.size


def cast_votes(pf: PointFeatures, positions: np.ndarray, object_mask: np.ndarray) -> Votes:
    """Votes for the points selected by `object_mask` (may be empty)."""
    idx = np.flatnonzero(object_mask)
    dtype = pf.center_offsets.data.dtype
    base = Tensor(positions[idx].astype(dtype))
    votes = ad.add(ad.gather_rows(pf.center_offsets, idx), base)
    return Votes(point_indices=idx, positions=votes)


def farthest_point_indices(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy farthest-point subset; seeded random start, ties to lowest index."""
    m = points.shape[0]
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = int(rng.integers(m))
    d = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, k):
        nxt = int(np.argmax(d))
        chosen[i] = nxt
        d = np.minimum(d, np.linalg.norm(points - points[nxt], axis=1))
    return chosen


def sample_proposals(votes: Votes, k: int, rng: np.random.Generator,
                     method: str = "random") -> np.ndarray:
    """Pick k vote rows as proposal positions.

    Random sampling is without replacement when enough votes exist and
    with replacement otherwise; `method="fps"` switches to farthest-point
    selection. Returns vote-row indices.
    """
    if votes.count == 0:
        raise NoVotesError("cannot sample proposals from zero votes")
    if k <= 0:
        raise ProposalError(f"need a positive proposal count, got {k}")
    if method == "random":
        replace = votes.count < k
        return rng.choice(votes.count, size=k, replace=replace).astype(np.int64)
    if method == "fps":
        if k >= votes.count:
            base = np.arange(votes.count, dtype=np.int64)
            extra = rng.choice(votes.count, size=k - votes.count, replace=True) \
                if k > votes.count else np.empty(0, dtype=np.int64)
            return np.concatenate([base, extra.astype(np.int64)])
        return farthest_point_indices(votes.positions.data, k, rng)
    raise ProposalError(f"unknown sampling method '{method}'")


class VoteGrid:
    """Uniform hash grid over vote positions for radius queries."""

    def __init__(self, positions: np.ndarray, radius: float):
        if radius <= 0:
            raise ProposalError(f"grouping radius must be positive, got {radius}")
        if not np.all(np.isfinite(positions)):
            raise ProposalError("vote positions contain non-finite values")
        self.positions = positions
        self.radius = float(radius)
        cells = np.floor(positions / radius).astype(np.int64)
        self._cells: dict[tuple[int, int, int], np.ndarray] = {}
        order = np.lexsort((cells[:, 2], cells[:, 1], cells[:, 0]))
        sorted_cells = cells[order]
        if order.size:
            change = np.flatnonzero(np.any(np.diff(sorted_cells, axis=0) != 0, axis=1)) + 1
            starts = np.concatenate([[0], change, [order.size]])
            for a, b in zip(starts[:-1], starts[1:]):
                key = tuple(int(v) for v in sorted_cells[a])
                self._cells[key] = np.sort(order[a:b])

    def query(self, center: np.ndarray) -> np.ndarray:
        """Vote rows strictly within the radius of `center`, ascending."""
        cx, cy, cz = np.floor(center / self.radius).astype(np.int64)
        buckets = []
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for dz in (-1, 0, 1):
                    rows = self._cells.get((int(cx + dx), int(cy + dy), int(cz + dz)))
                    if rows is not None:
                        buckets.append(rows)
        if not buckets:
            return np.empty(0, dtype=np.int64)
        cand = np.concatenate(buckets)
        d = np.linalg.norm(self.positions[cand] - center, axis=1)
        hit = cand[d < self.radius]
        return np.sort(hit)


def group_votes(votes: Votes, center: np.ndarray, radius: float,
                grid: VoteGrid | None = None) -> np.ndarray:
    """Vote rows strictly within `radius` of `center` (ascending order)."""
    if grid is not None:
        return grid.query(center)
    d = np.linalg.norm(votes.positions.data - center, axis=1)
    return np.flatnonzero(d < radius).astype(np.int64)


@dataclass
class ProposalBatch:
    """Sampled proposals with their vote groups and pooled features."""

    sample_rows: np.ndarray        # (K,) vote row of each proposal position
    positions: Tensor              # (K, 3)
    member_votes: list[np.ndarray]  # per proposal: vote rows in its group
    members: list[np.ndarray]       # per proposal: scene point indices
    features: Tensor               # (K, D) pooled descriptors

    @property
    def count(self) -> int:
        return self.sample_rows.size


def proposal_features(features: Tensor, votes: Votes, member_rows: np.ndarray,
                      center: Tensor, params: MlpParams) -> Tensor:
    """Pooled descriptor of one proposal from [f_j, vote_j - y] rows."""
    if member_rows.size == 0:
        raise ad.EmptyGroupError("proposal group is empty")
    f = ad.gather_rows(features, votes.point_indices[member_rows])
    rel = ad.sub(ad.gather_rows(votes.positions, member_rows), center)
    pooled, _ = ad.shared_mlp_maxpool(params, ad.concat_cols([f, rel]))
    return ad.reshape(pooled, (1, -1))


def build_proposals(pf: PointFeatures, votes: Votes, sample_rows: np.ndarray,
                    radius: float, params: MlpParams,
                    max_group: int | None = None,
                    rng: np.random.Generator | None = None) -> ProposalBatch:
    """Group votes around each sampled position and pool features in one pass.

    `max_group` caps each group's rows (uniform subsample via `rng`) for
    training throughput; the sampled vote itself always stays in the group.
    The pooled MLP runs once over the concatenated rows of all proposals.
    """
    grid = VoteGrid(votes.positions.data, radius)
    positions = ad.gather_rows(votes.positions, sample_rows)

    member_votes: list[np.ndarray] = []
    for i, row in enumerate(sample_rows):
        group = grid.query(votes.positions.data[row])
        if group.size == 0:
            # strict inequality can exclude the proposal's own vote only by
            # floating-point accident; keep the generator row regardless
            group = np.array([row], dtype=np.int64)
        if max_group is not None and group.size > max_group:
            if rng is None:
                raise ProposalError("max_group subsampling needs an rng")
            keep = rng.choice(group.size, size=max_group, replace=False)
            sub = group[np.sort(keep)]
            if row not in sub:
                sub[0] = row
                sub = np.sort(sub)
            group = sub
        member_votes.append(group)

    counts = np.array([g.size for g in member_votes], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    all_rows = np.concatenate(member_votes)
    seg_of_row = np.repeat(np.arange(sample_rows.size), counts)

    f = ad.gather_rows(pf.features, votes.point_indices[all_rows])
    rel = ad.sub(ad.gather_rows(votes.positions, all_rows),
                 ad.gather_rows(positions, seg_of_row))
    per_row = ad.mlp_forward(params, ad.concat_cols([f, rel]))
    pooled = ad.segment_max(per_row, starts)

    return ProposalBatch(
        sample_rows=np.asarray(sample_rows, dtype=np.int64),
        positions=positions,
        member_votes=member_votes,
        members=[votes.point_indices[g] for g in member_votes],
        features=pooled,
    )
