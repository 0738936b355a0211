"""Finite-difference verification of every loss term at a fixed small geometry.

Builds the joint objective over two leaf feature maps (no encoder) so checks
run fast at float64. Cluster assignments and pseudo labels are captured on
the first evaluation and frozen: both are discrete per-step constants, and
probing across their decision boundaries would measure the jump, not the
gradient.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, finite_diff_check
from .cam import (
    CamWeights,
    cam_forward,
    ce_loss,
    classification_logits,
    pseudo_labels,
    refined_cam,
)
from .contrast import (
    ContrastConfig,
    build_class_bank,
    pgcl_loss,
    semantic_consistency,
    sgcl_loss,
    similarity_matrix,
)
from .grouping import (
    assign_group_classes,
    cluster_pixels,
    groups_from_assignment,
    pixel_affinity,
    pixel_context,
)
from .pipeline import concat_features, group_context, refine_features, total_loss


class FeatureLevelObjective:
    """Two-image joint objective over leaf features f1, f2 and CAM weights."""

    def __init__(self, seed, wh=16, depth=8, num_classes=3, groups=3,
                 alpha=0.6, beta=0.4, tau=0.5):
        rng = np.random.default_rng(seed)
        self.f = [Tensor(rng.normal(size=(wh, depth)), requires_grad=True) for _ in range(2)]
        self.cam = CamWeights.init(num_classes, depth, seed=seed + 1)
        self.present = [frozenset(range(1, num_classes))] * 2
        self.num_classes = num_classes
        self.groups = groups
        self.alpha, self.beta = alpha, beta
        self.cfg = ContrastConfig(tau=tau)
        self.tau = tau
        self._frozen_assignments = {}
        self._frozen_pseudo = {}

    def params(self):
        return {
            "f1": self.f[0],
            "f2": self.f[1],
            "cam.base": self.cam.base,
            "cam.refined": self.cam.refined,
        }

    def _base(self, i):
        feats = self.f[i]
        base = cam_forward(feats, self.cam.base)
        if i not in self._frozen_pseudo:
            self._frozen_pseudo[i] = pseudo_labels(base, self.present[i]).labels
        return feats, base, self._frozen_pseudo[i]

    def _image(self, i):
        feats, base, pseudo = self._base(i)
        ctx = pixel_context(feats, pixel_affinity(feats))
        if i not in self._frozen_assignments:
            self._frozen_assignments[i] = cluster_pixels(
                feats, ctx, self.groups, seed=101 + i
            ).assignment
        group_set = groups_from_assignment(feats, self._frozen_assignments[i], self.groups)
        classes = assign_group_classes(group_set, pseudo, self.present[i])
        return feats, base, pseudo, ctx, group_set, classes

    def ce(self):
        terms = [
            ce_loss(classification_logits(self._base(i)[1]), self.present[i]) for i in range(2)
        ]
        return (terms[0] + terms[1]) * 0.5

    def pgcl(self):
        batch = [self._image(i)[4:6] for i in range(2)]
        return pgcl_loss(batch, self.cfg)

    def _semantic(self):
        per_image, feats_list, pseudo_list = [], [], []
        for i in range(2):
            feats, _, pseudo, ctx, group_set, classes = self._image(i)
            per_image.append((feats, ctx, group_set, classes))
            feats_list.append(feats)
            pseudo_list.append(pseudo)
        bank = build_class_bank(feats_list, pseudo_list, self.num_classes)
        rows, row_classes = [], []
        for i, (feats, ctx, group_set, classes) in enumerate(per_image):
            unmasked = (set(self.present[i]) | {0}) & set(bank.present)
            m = similarity_matrix(
                group_set.prototypes, self.cam.base, unmasked, self.tau,
                include_background=False,
            )
            rows.append(semantic_consistency(m, bank))
            row_classes.extend(classes)
        return per_image, bank, rows, row_classes

    def sgcl(self):
        _, bank, rows, row_classes = self._semantic()
        return sgcl_loss(concat(rows, axis=0), row_classes, bank, self.cfg)

    def m4(self):
        per_image, bank, rows, row_classes = self._semantic()
        lp = pgcl_loss([(gs, cls) for _, _, gs, cls in per_image], self.cfg)
        ls = sgcl_loss(concat(rows, axis=0), row_classes, bank, self.cfg)
        ce_terms = []
        for i, (feats, ctx, group_set, classes) in enumerate(per_image):
            refined = refine_features(feats, group_context(ctx, group_set), rows[i])
            stack = refined_cam(concat_features(feats, refined), self.cam.refined)
            base = cam_forward(feats, self.cam.base)
            ce_terms.append(
                ce_loss(classification_logits(base), self.present[i])
                + ce_loss(classification_logits(stack), self.present[i])
            )
        lce = (ce_terms[0] + ce_terms[1]) * 0.5
        return total_loss(lp.value, ls.value, lce, self.alpha, self.beta), lp, ls

    def m4_value(self):
        return self.m4()[0]

    def contrast_terms_usable(self):
        return not self.pgcl().degenerate and not self.sgcl().degenerate


def usable_objective(seed, **kwargs) -> FeatureLevelObjective:
    """First objective at or after seed whose contrast terms actually engage."""
    for salt in range(12):
        obj = FeatureLevelObjective(seed + 1000 * salt, **kwargs)
        if obj.contrast_terms_usable():
            return obj
    raise AssertionError(f"no usable gradcheck seed near {seed}")


LOSS_TERMS = ("ce", "pgcl", "sgcl", "m4")


def run_gradcheck(seed=0, tol=1e-4, wh=16, depth=8, num_classes=3, groups=3):
    """GradReport per loss term; parameters restricted to each term's inputs."""
    obj = usable_objective(seed, wh=wh, depth=depth, num_classes=num_classes, groups=groups)
    params = obj.params()
    reports = {}
    reports["ce"] = finite_diff_check(
        obj.ce, {k: params[k] for k in ("f1", "f2", "cam.base")}, tol=tol
    )
    reports["pgcl"] = finite_diff_check(
        lambda: obj.pgcl().value, {k: params[k] for k in ("f1", "f2")}, tol=tol
    )
    reports["sgcl"] = finite_diff_check(
        lambda: obj.sgcl().value, {k: params[k] for k in ("f1", "f2", "cam.base")}, tol=tol
    )
    reports["m4"] = finite_diff_check(obj.m4_value, params, tol=tol)
    return reports
