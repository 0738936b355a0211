"""Class-aware activation maps, pseudo labels, and the image-level loss.

The base head scores raw pixel embeddings (depth D); the refined head scores
the concatenated embedding (depth 2D) with its own weights. Pseudo labels are
a per-pixel argmax over the channels of the classes known to be present plus
background, ties broken toward the smaller class id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, matmul


@dataclass
class CamWeights:
    base: Tensor  # (K, D)
    refined: Tensor  # (K, 2D)

    @staticmethod
    def init(num_classes, depth, seed=0):
        """Foreground rows uniform; background row scaled down to ~0.

        The image-level loss carries no background target, so class 0 scores
        start near 0 and the argmax reads foreground evidence against a
        neutral boundary. The row keeps a tiny random direction (1e-3 of the
        foreground scale) so cosine-based ops stay defined; the semantic
        stream trains it from there.
        """
        entropy = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        streams = entropy.spawn(2)
        scale_b = np.sqrt(1.0 / depth)
        scale_r = np.sqrt(1.0 / (2 * depth))
        base_rows = np.random.default_rng(streams[0]).uniform(
            -scale_b, scale_b, size=(num_classes, depth)
        )
        refined_rows = np.random.default_rng(streams[1]).uniform(
            -scale_r, scale_r, size=(num_classes, 2 * depth)
        )
        base_rows[0] *= 1e-3
        refined_rows[0] *= 1e-3
        return CamWeights(Tensor(base_rows, requires_grad=True), Tensor(refined_rows, requires_grad=True))


@dataclass
class CamStack:
    scores: Tensor  # (V, K), one activation map column per class
    refined: bool = False

    @property
    def num_classes(self):
        return self.scores.data.shape[1]


@dataclass
class PseudoLabelMap:
    labels: np.ndarray  # (V,) uint16


def cam_forward(features: Tensor, weights: Tensor) -> CamStack:
    """scores[p, k] = <f_p, w_k>: a 1x1 class-aware convolution."""
    if features.data.ndim != 2 or weights.data.ndim != 2:
        raise ShapeError(
            f"cam_forward needs (V, D) features and (K, D) weights, got {features.data.shape} and {weights.data.shape}"
        )
    if features.data.shape[1] != weights.data.shape[1]:
        raise ShapeError(
            f"feature depth {features.data.shape[1]} != class-weight depth {weights.data.shape[1]}"
        )
    return CamStack(matmul(features, weights.T), refined=False)


def refined_cam(features_2d: Tensor, weights: Tensor) -> CamStack:
    """Same contract as cam_forward over concatenated features, flagged refined."""
    stack = cam_forward(features_2d, weights)
    stack.refined = True
    return stack


def _restricted_argmax(scores: np.ndarray, present_classes) -> np.ndarray:
    allowed = sorted(set(int(c) for c in present_classes) | {0})
    sub = scores[:, allowed]
    # argmax returns the first maximum; columns are sorted by class id, so ties
    # already resolve toward the smaller id
    winner = sub.argmax(axis=1)
    return np.asarray(allowed, dtype=np.uint16)[winner]


def pseudo_labels(stack: CamStack, present_classes) -> PseudoLabelMap:
    """Per-pixel argmax over channels restricted to present classes plus background."""
    k = stack.num_classes
    present = set(int(c) for c in present_classes)
    if any(c < 0 or c >= k for c in present):
        raise ValueError(f"present classes {sorted(present)} out of range for K={k}")
    return PseudoLabelMap(_restricted_argmax(stack.scores.data, present))


def update_pseudo_labels(refined_stack: CamStack, present_classes) -> PseudoLabelMap:
    return pseudo_labels(refined_stack, present_classes)


def classification_logits(stack: CamStack) -> Tensor:
    """Global average pool per class channel -> (K,) logits."""
    return stack.scores.mean(axis=0)


def ce_loss(logits: Tensor, present_classes) -> Tensor:
    """Multi-label binary cross-entropy over foreground classes.

    Target 1 for classes in the image-level label set, 0 otherwise; background
    (class 0) carries no target. Uses softplus(z) - t*z for stability.
    """
    k = logits.data.shape[0]
    targets = np.zeros(k)
    for c in present_classes:
        if not 0 < c < k:
            raise ValueError(f"class id {c} not a foreground id for K={k}")
        targets[c] = 1.0
    fg = logits[1:]
    t = Tensor(targets[1:])
    return (fg.softplus() - t * fg).mean()
