# ==============================================================================
# Region partition: n independent branch MLPs h_k score every point from the
# concatenation [x, e] of its coordinate and the shape embedding. Softmax
# over branches gives region probabilities, argmax gives hard labels, and the
# per-region max-pool of point features gives the region feature sequence.
# The same branch logits drive the inside-outside (occupancy) output.
# ==============================================================================

import logging
from dataclasses import dataclass

import numpy as np

from app.services import diffcore as dc
from app.services.cloud import PointCloud, centroid
from app.services.errors import PartitionError

BRANCH_HIDDEN = 32


@dataclass
class Branch:
    w1: dc.Tensor  # (d + 3) x 32
    b1: dc.Tensor
    w2: dc.Tensor  # 32 x 1
    b2: dc.Tensor


@dataclass
class PartitionParams:
    branches: list

    @property
    def n_regions(self):
        return len(self.branches)

    @property
    def input_dim(self):
        return self.branches[0].w1.shape[0]

    def named_tensors(self):
        named = {}
        for k, branch in enumerate(self.branches):
            for field in ("w1", "b1", "w2", "b2"):
                named[f"h{k}.{field}"] = getattr(branch, field)
        return named


@dataclass
class RegionState:
    scores: dc.Tensor      # N x n
    labels: np.ndarray     # N
    counts: np.ndarray     # n
    centroids: list        # n entries, None for empty regions
    rfs: dc.Tensor         # n x d
    occupied: np.ndarray   # n booleans

    @property
    def n_regions(self):
        return len(self.counts)


def init_partition(n_regions, embed_dim, rng):
    if n_regions < 1:
        raise PartitionError(f"need at least one region, got {n_regions}")
    branches = [
        Branch(w1=dc.glorot_uniform(rng, embed_dim + 3, BRANCH_HIDDEN), b1=dc.zeros_param(BRANCH_HIDDEN),
               w2=dc.glorot_uniform(rng, BRANCH_HIDDEN, 1), b2=dc.zeros_param(1))
        for _ in range(n_regions)
    ]
    return PartitionParams(branches)


def _coords(points):
    return points.points if isinstance(points, PointCloud) else np.asarray(points, dtype=float)


def branch_logits(points, embedding, params):
    """N x n matrix of h_k([x_i, e])."""
    coords = _coords(points)
    if embedding.shape[0] + 3 != params.input_dim:
        raise PartitionError(
            f"branch input is {params.input_dim} wide but [x, e] has {embedding.shape[0] + 3} entries")
    inputs = dc.concat([dc.tensor(coords), dc.tile_rows(embedding, len(coords))])
    columns = []
    for branch in params.branches:
        hidden = dc.relu(dc.linear(inputs, branch.w1, branch.b1))
        columns.append(dc.linear(hidden, branch.w2, branch.b2))
    return dc.concat(columns)


def score_points(points, embedding, params):
    """Row i is the softmax over k of h_k([x_i, e])."""
    return dc.softmax(branch_logits(points, embedding, params))


def assign_regions(scores, n_regions=None):
    """Hard labels (argmax, ties to the lowest region) and per-region counts."""
    values = scores.data if isinstance(scores, dc.Tensor) else np.asarray(scores)
    n_regions = n_regions or values.shape[1]
    labels = np.argmax(values, axis=1)
    return labels, np.bincount(labels, minlength=n_regions)


def region_feature_sequence(point_features, labels, n_regions):
    """Per-region max-pool of point features; empty regions get a zero row and occupied=False."""
    labels = np.asarray(labels)
    width = point_features.shape[1]
    rows, occupied = [], np.zeros(n_regions, dtype=bool)
    for k in range(n_regions):
        members = np.flatnonzero(labels == k)
        if len(members) == 0:
            rows.append(dc.zeros(width))
            continue
        pooled, _ = dc.max_reduce(dc.take_rows(point_features, members), axis=0)
        rows.append(pooled)
        occupied[k] = True
    return dc.stack(rows), occupied


def region_centroids(points, labels, n_regions):
    coords = _coords(points)
    labels = np.asarray(labels)
    return [centroid(coords[labels == k]) if np.any(labels == k) else None for k in range(n_regions)]


def occupancy_logits(points, embedding, params):
    """max_k h_k([x, e]); sigmoid of it equals max_k sigmoid(h_k)."""
    pooled, _ = dc.max_reduce(branch_logits(points, embedding, params), axis=1)
    return pooled


def occupancy(points, embedding, params):
    """Inside probability per point: a point is inside if any branch claims it."""
    return dc.sigmoid(occupancy_logits(points, embedding, params))


def partition(points, encoded, params):
    scores = score_points(points, encoded.shape_embedding, params)
    labels, counts = assign_regions(scores, params.n_regions)
    rfs, occupied = region_feature_sequence(encoded.point_features, labels, params.n_regions)
    empty = int(np.sum(~occupied))
    if empty:
        logging.debug(f"[Partition] {empty} of {params.n_regions} regions are empty")
    return RegionState(
        scores=scores, labels=labels, counts=counts,
        centroids=region_centroids(points, labels, params.n_regions),
        rfs=rfs, occupied=occupied,
    )
