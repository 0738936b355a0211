"""Contrast scores, InfoNCE, group contrast, and semantic-graph contrast.

Temperature is applied as exp(cos(u, v) / tau). Scaling one argument by 1/tau
before a cosine would be a no-op (cosine is scale invariant), so the
temperature must live inside the exponent to have any effect; a strict mode
that drops the positive term from the denominator is kept behind a flag.

Anchors that lack either a positive or a negative are skipped; when every
anchor is skipped the loss is 0 with a diagnostic flag rather than an error,
because small batches hit this legitimately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    ContractError,
    DegenerateVectorError,
    ShapeError,
    Tensor,
    concat,
    cosine_similarity,
    matmul,
    softmax_rows,
)


@dataclass(frozen=True)
class ContrastConfig:
    tau: float = 0.1
    theta: float = 0.5
    include_positive_in_denominator: bool = True

    def __post_init__(self):
        if not 0.0 < self.tau <= 10.0:
            raise ContractError(f"temperature must lie in (0, 10], got {self.tau}")


@dataclass
class ContrastLoss:
    value: Tensor  # scalar
    anchors_used: int = 0
    degenerate: bool = False  # no anchor had both a positive and a negative

    def item(self):
        return self.value.item()


def contrast_score(u: Tensor, v: Tensor, tau: float) -> Tensor:
    """exp(cos(u, v) / tau); strictly positive."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return (cosine_similarity(u, v) * (1.0 / tau)).exp()


def _normalize_rows(t: Tensor, what: str) -> Tensor:
    norms_sq = (t * t).sum(axis=1, keepdims=True)
    if np.any(norms_sq.data == 0.0):
        raise DegenerateVectorError(f"zero-norm row in {what}")
    return t / norms_sq.sqrt()


def info_nce(anchor: Tensor, positive: Tensor, negatives, cfg: ContrastConfig) -> Tensor:
    """-log( phi(a,p) / (phi(a,p)*[include] + sum_n phi(a,n)) ).

    Evaluated as log(denominator) - cos(a,p)/tau so the positive term never
    round-trips through exp/log. The negatives are scored as one stacked
    matrix rather than pair by pair.
    """
    negatives = list(negatives)
    if not negatives:
        raise ContractError("info_nce needs at least one negative")
    d = anchor.data.shape[0]
    for other in [positive] + negatives:
        if other.data.shape != (d,):
            raise ShapeError(f"vector shape mismatch: {other.data.shape} vs ({d},)")
    a_hat = _normalize_rows(anchor.reshape(1, d), "anchor")
    stacked = concat([n.reshape(1, d) for n in negatives], axis=0)
    n_hat = _normalize_rows(stacked, "negatives")
    sim_pos = cosine_similarity(anchor, positive) * (1.0 / cfg.tau)
    neg_phi = (matmul(a_hat, n_hat.T) * (1.0 / cfg.tau)).exp().sum()
    denom = sim_pos.exp() + neg_phi if cfg.include_positive_in_denominator else neg_phi
    return denom.log() - sim_pos


def _scalar_mean(terms):
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def _masked_nce_terms(sims_row, positives_mask, negatives_mask, cfg):
    """Per-positive InfoNCE terms from one anchor's similarity row (1, T)."""
    scaled = sims_row * (1.0 / cfg.tau)
    phi = scaled.exp()
    neg_sum = (phi * Tensor(negatives_mask.astype(np.float64))).sum()
    phi_pos = phi[0, positives_mask]
    scaled_pos = scaled[0, positives_mask]
    if cfg.include_positive_in_denominator:
        return (phi_pos + neg_sum).log() - scaled_pos
    ones = Tensor(np.ones(int(positives_mask.sum())))
    return (ones * neg_sum).log() - scaled_pos


def pgcl_loss(batch, cfg: ContrastConfig) -> ContrastLoss:
    """Group contrast over a batch: same-class groups attract, others repel.

    batch is a sequence of (GroupSet, group_class) pairs, one per image. Each
    group's prototype is an anchor; positives are groups anywhere in the batch
    with the same assigned class (excluding the anchor itself), negatives are
    all differently-classed groups. Multiple positives average per anchor,
    then anchors average into the loss. Anchor/candidate similarities come
    from one normalized matmul over the stacked prototypes.
    """
    prototype_blocks, classes = [], []
    for groups, group_class in batch:
        if len(group_class) != groups.num_groups:
            raise ShapeError(
                f"group_class length {len(group_class)} != group count {groups.num_groups}"
            )
        prototype_blocks.append(groups.prototypes)
        classes.extend(int(c) for c in group_class)
    if not prototype_blocks:
        return ContrastLoss(Tensor(0.0), anchors_used=0, degenerate=True)
    stacked = (
        prototype_blocks[0] if len(prototype_blocks) == 1 else concat(prototype_blocks, axis=0)
    )
    classes = np.asarray(classes)
    hat = _normalize_rows(stacked, "prototypes")
    sims = matmul(hat, hat.T)
    anchor_terms = []
    for u in range(classes.shape[0]):
        positives = classes == classes[u]
        positives[u] = False
        negatives = classes != classes[u]
        if not positives.any() or not negatives.any():
            continue
        terms = _masked_nce_terms(sims[u : u + 1], positives, negatives, cfg)
        anchor_terms.append(terms.mean())
    if not anchor_terms:
        return ContrastLoss(Tensor(0.0), anchors_used=0, degenerate=True)
    return ContrastLoss(_scalar_mean(anchor_terms), anchors_used=len(anchor_terms))


# -- semantic stream ----------------------------------------------------------


@dataclass
class SemanticMatrix:
    m: Tensor  # (G, K); masked classes exactly 0
    unmasked: tuple  # class ids participating in the row softmax


@dataclass
class ClassPrototypeBank:
    """Per-class mean of batch features pooled under pseudo labels."""

    matrix: Tensor  # (K, D); rows of absent classes are zero
    present: frozenset

    @property
    def num_classes(self):
        return self.matrix.data.shape[0]

    def prototype(self, class_id) -> Tensor:
        if class_id not in self.present:
            raise ContractError(f"class {class_id} has no prototype in this bank")
        return self.matrix[class_id]


def build_class_bank(features_list, pseudo_list, num_classes) -> ClassPrototypeBank:
    """Pool features from the whole batch by pseudo-label class."""
    all_features = features_list[0] if len(features_list) == 1 else concat(features_list, axis=0)
    labels = np.concatenate([np.asarray(p) for p in pseudo_list])
    if labels.shape[0] != all_features.data.shape[0]:
        raise ShapeError(
            f"{labels.shape[0]} pseudo labels for {all_features.data.shape[0]} feature rows"
        )
    mask = np.zeros((num_classes, labels.shape[0]))
    present = []
    for k in range(num_classes):
        members = labels == k
        count = int(members.sum())
        if count:
            mask[k, members] = 1.0 / count
            present.append(k)
    return ClassPrototypeBank(matmul(Tensor(mask), all_features), frozenset(present))


def similarity_matrix(
    prototypes: Tensor,
    class_embeddings: Tensor,
    present_classes,
    tau: float,
    include_background: bool = True,
) -> SemanticMatrix:
    """Row-softmax of cos(prototype, class embedding)/tau over unmasked classes.

    Masked class columns are exactly zero. Background joins the unmasked set
    by default; callers that pre-intersect the class set pass it verbatim.
    """
    if prototypes.data.shape[1] != class_embeddings.data.shape[1]:
        raise ShapeError(
            f"prototype depth {prototypes.data.shape[1]} != class-embedding depth {class_embeddings.data.shape[1]}"
        )
    num_classes = class_embeddings.data.shape[0]
    unmasked = set(int(c) for c in present_classes)
    if include_background:
        unmasked |= {0}
    unmasked = sorted(unmasked)
    if not unmasked:
        raise ContractError("similarity_matrix needs at least one unmasked class")
    if any(c < 0 or c >= num_classes for c in unmasked):
        raise ContractError(f"present classes {unmasked} out of range for K={num_classes}")
    p_hat = _normalize_rows(prototypes, "prototypes")
    w_hat = _normalize_rows(class_embeddings[np.asarray(unmasked)], "class embeddings")
    sims = matmul(p_hat, w_hat.T) * (1.0 / tau)
    soft = softmax_rows(sims)  # (G, |unmasked|)
    scatter = np.zeros((len(unmasked), num_classes))
    for col, c in enumerate(unmasked):
        scatter[col, c] = 1.0
    return SemanticMatrix(matmul(soft, Tensor(scatter)), tuple(unmasked))


def semantic_consistency(m: SemanticMatrix, bank: ClassPrototypeBank) -> Tensor:
    """(G, D) semantic expectation per group: soft class mixture of bank rows."""
    missing = [c for c in m.unmasked if c not in bank.present]
    if missing:
        raise ContractError(f"bank lacks prototypes for unmasked classes {missing}")
    if m.m.data.shape[1] != bank.num_classes:
        raise ShapeError(
            f"similarity matrix has {m.m.data.shape[1]} classes, bank has {bank.num_classes}"
        )
    return matmul(m.m, bank.matrix)


def sgcl_loss(consistency: Tensor, group_class, bank: ClassPrototypeBank, cfg: ContrastConfig) -> ContrastLoss:
    """Semantic-graph contrast: each group's expectation against its class prototype.

    Anchor u with class k takes positive r_k and negatives {r_k' : k' != k in
    the bank}; the loss is the mean over usable anchors. Fewer than two bank
    classes makes every anchor unusable: 0 with the degenerate flag.
    """
    if consistency.data.shape[0] != len(group_class):
        raise ShapeError(
            f"{consistency.data.shape[0]} consistency rows vs {len(group_class)} group classes"
        )
    present = sorted(bank.present)
    if len(present) < 2:
        return ContrastLoss(Tensor(0.0), anchors_used=0, degenerate=True)
    used = [u for u, cls in enumerate(group_class) if int(cls) in bank.present]
    if not used:
        return ContrastLoss(Tensor(0.0), anchors_used=0, degenerate=True)
    col_of = {k: i for i, k in enumerate(present)}
    cand_hat = _normalize_rows(bank.matrix[np.asarray(present)], "bank prototypes")
    anchors_hat = _normalize_rows(consistency[np.asarray(used)], "semantic consistency")
    sims = matmul(anchors_hat, cand_hat.T)
    terms = []
    for row, u in enumerate(used):
        positives = np.zeros(len(present), dtype=bool)
        positives[col_of[int(group_class[u])]] = True
        terms.append(_masked_nce_terms(sims[row : row + 1], positives, ~positives, cfg).mean())
    return ContrastLoss(_scalar_mean(terms), anchors_used=len(terms))
