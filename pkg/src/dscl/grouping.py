"""Pixel context extraction and context-guided grouping.

The affinity matrix holds pairwise Pearson correlations between pixel
embeddings. Per-pixel context vectors aggregate features with softmax-
normalized affinity rows; groups come from k-means over [feature ; context]
augmented vectors. Cluster assignments are treated as constants within a
training step, while prototypes and group context are recomputed from the
assignment differentiably so gradients reach the features.

The V x V affinity is quadratic in pixel count; inputs are capped at
V <= 4096 (64 x 64 feature grid).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ContractError, ShapeError, Tensor, matmul, softmax_rows

MAX_PIXELS = 4096


@dataclass
class GroupSet:
    assignment: np.ndarray  # (V,) group index
    prototypes: Tensor  # (G, D) feature-space means, differentiable
    group_class: list = field(default_factory=list)  # class id per group, set later
    wcss_history: list = field(default_factory=list)  # clustering objective per iteration

    @property
    def num_groups(self):
        return int(self.prototypes.data.shape[0])

    def member_matrix(self):
        """(G, V) constant row-stochastic membership: row u averages group u."""
        return _membership(self.assignment, self.num_groups)


@dataclass
class ContextBundle:
    affinity: Tensor  # (V, V)
    per_pixel: Tensor  # (V, D)
    threshold: float = 0.5


def _check_pixel_count(v):
    if v > MAX_PIXELS:
        raise ContractError(f"affinity needs V <= {MAX_PIXELS}, got V = {v}")


def pixel_affinity(features: Tensor) -> Tensor:
    """Pairwise Pearson correlations between pixel embeddings, (V, V).

    Zero-variance pixels get affinity 0 to every other pixel and 1 to self.
    Differentiable w.r.t. the features of non-degenerate pixels.
    """
    if features.data.ndim != 2:
        raise ShapeError(f"pixel_affinity needs (V, D) features, got {features.data.shape}")
    v, d = features.data.shape
    if d < 2:
        raise ContractError("pixel_affinity needs feature depth >= 2")
    _check_pixel_count(v)
    centered = features - features.mean(axis=1, keepdims=True)
    var = (centered * centered).mean(axis=1, keepdims=True)
    degenerate = var.data[:, 0] == 0.0
    # safe divisor: degenerate rows are exactly zero after centering, so any
    # positive divisor keeps them zero without producing NaN
    safe = Tensor(np.where(degenerate, 1.0, 0.0)[:, None])
    z = centered / (var + safe).sqrt()
    raw = matmul(z, z.T) * (1.0 / d)
    if degenerate.any():
        fix = np.zeros((v, v))
        fix[degenerate, degenerate] = 1.0
        raw = raw + Tensor(fix)
    return raw


def pixel_context(features: Tensor, affinity: Tensor) -> Tensor:
    """Context vector per pixel: softmax(affinity row) weighted feature sum."""
    if affinity.data.shape != (features.data.shape[0],) * 2:
        raise ShapeError(
            f"affinity {affinity.data.shape} inconsistent with features {features.data.shape}"
        )
    return matmul(softmax_rows(affinity), features)


def positive_set(affinity: Tensor, u: int, threshold: float = 0.5) -> set:
    """Indices whose affinity to pixel u meets the threshold; always contains u."""
    if not -1.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (-1, 1), got {threshold}")
    row = affinity.data[u]
    return set(np.flatnonzero(row >= threshold).tolist()) | {u}


def _membership(assignment, num_groups):
    v = assignment.shape[0]
    m = np.zeros((num_groups, v))
    for g in range(num_groups):
        members = assignment == g
        count = members.sum()
        if count == 0:
            raise AssertionError(f"group {g} is empty after repair")
        m[g, members] = 1.0 / count
    return Tensor(m)


def _kmeans_pp_init(x, k, rng):
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    dist_sq = ((x - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = dist_sq.sum()
        if total <= 0:
            centroids[i] = x[rng.integers(n)]
            continue
        probs = dist_sq / total
        centroids[i] = x[rng.choice(n, p=probs)]
        dist_sq = np.minimum(dist_sq, ((x - centroids[i]) ** 2).sum(axis=1))
    return centroids


def _repair_empty(assignment, centroids, x):
    for g in range(centroids.shape[0]):
        if np.any(assignment == g):
            continue
        sizes = np.bincount(assignment, minlength=centroids.shape[0])
        donor = int(sizes.argmax())
        members = np.flatnonzero(assignment == donor)
        dists = ((x[members] - centroids[donor]) ** 2).sum(axis=1)
        stray = members[int(dists.argmax())]
        assignment[stray] = g
        centroids[g] = x[stray]


def cluster_pixels(features: Tensor, context: Tensor, num_groups: int, seed) -> GroupSet:
    """k-means over [feature ; context] with k-means++ seeding.

    Deterministic per (inputs, seed). At most 100 iterations, stopping when
    centroids shift less than 1e-4; empty clusters are repaired by splitting
    the largest cluster at its farthest member. Prototypes are recomputed as
    differentiable feature-space means over the final assignment.
    """
    f = features.data
    v = f.shape[0]
    if not 1 <= num_groups <= v:
        raise ContractError(f"group count {num_groups} must lie in [1, {v}]")
    x = np.concatenate([f, context.data], axis=1)
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, num_groups, rng)
    assignment = None
    history = []
    for _ in range(100):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignment = d2.argmin(axis=1)
        _repair_empty(assignment, centroids, x)
        history.append(float(((x - centroids[assignment]) ** 2).sum()))
        new_centroids = np.stack(
            [x[assignment == g].mean(axis=0) for g in range(num_groups)]
        )
        shift = float(np.linalg.norm(new_centroids - centroids))
        centroids = new_centroids
        if shift < 1e-4:
            break
    prototypes = matmul(_membership(assignment, num_groups), features)
    return GroupSet(assignment.astype(np.int64), prototypes, wcss_history=history)


def groups_from_assignment(features: Tensor, assignment, num_groups: int) -> GroupSet:
    """Rebuild a GroupSet (differentiable prototypes) from a frozen assignment."""
    assignment = np.asarray(assignment)
    prototypes = matmul(_membership(assignment, num_groups), features)
    return GroupSet(assignment, prototypes)


def group_context(context: Tensor, groups: GroupSet) -> Tensor:
    """(G, D) matrix whose row u is the mean context over members of group u."""
    if context.data.shape[0] != groups.assignment.shape[0]:
        raise ShapeError(
            f"context rows {context.data.shape[0]} != assignment length {groups.assignment.shape[0]}"
        )
    return matmul(groups.member_matrix(), context)


def assign_group_classes(groups: GroupSet, pseudo: np.ndarray, present_classes) -> list:
    """Majority pseudo-label vote per group over present classes plus background."""
    allowed = sorted(set(int(c) for c in present_classes) | {0})
    labels = np.asarray(pseudo)
    if labels.shape[0] != groups.assignment.shape[0]:
        raise ShapeError(
            f"pseudo-label length {labels.shape[0]} != assignment length {groups.assignment.shape[0]}"
        )
    out = []
    for g in range(groups.num_groups):
        member_labels = labels[groups.assignment == g]
        votes = [(int((member_labels == c).sum()), c) for c in allowed]
        count, winner = max(votes, key=lambda vc: (vc[0], -vc[1]))
        out.append(winner)
    return out
