"""Dual-stream training: mode wiring, joint objective, optimizer, checkpoints.

Modes gate which loss terms and which CAM path are active:
    baseline  image-level CE on the base CAM only
    M1        + group contrast (beta forced to 0)
    M2        + semantic-graph contrast (alpha forced to 0)
    M3        both contrast losses, no feature refinement (refined CAM := base)
    M4        both losses plus refinement; CE moves to the refined CAM

Pseudo labels feeding group classes and the class bank always come from the
base CAM of the current step; refined labels are reported outputs only.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import (
    ContractError,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    concat,
    matmul,
    softmax_rows,
)
from .cam import (
    CamStack,
    CamWeights,
    cam_forward,
    ce_loss,
    classification_logits,
    pseudo_labels,
    refined_cam,
    update_pseudo_labels,
)
from .config import MODES, format_value, parse_config_text
from .contrast import (
    ContrastConfig,
    ContrastLoss,
    SemanticMatrix,
    build_class_bank,
    pgcl_loss,
    semantic_consistency,
    sgcl_loss,
    similarity_matrix,
)
from .encoder import TinyEncoder, encode, flatten_features
from .grouping import (
    assign_group_classes,
    cluster_pixels,
    group_context,
    groups_from_assignment,
    pixel_affinity,
    pixel_context,
)
from .io import write_container, read_container

MOMENTUM = 0.9


class NumericalAbort(RuntimeError):
    def __init__(self, step, term, detail=""):
        msg = f"non-finite value in '{term}' at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.step = step
        self.term = term


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.6
    beta: float = 0.4
    tau: float = 0.1
    theta: float = 0.5
    lr: float = 0.1
    steps: int = 500
    batch: int = 4
    seed: int = 0
    mode: str = "M4"
    width: int = 32
    height: int = 32
    classes: int = 4
    depth: int = 32
    background_group: bool = True
    include_positive_in_denominator: bool = True
    out_dir: str = "runs"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0 or self.beta < 0:
            raise ContractError("loss weights alpha and beta must be >= 0")

    def normalized(self) -> "TrainConfig":
        """Apply the per-mode weight constraints (M1 drops beta, M2 drops alpha)."""
        if self.mode == "M1" and self.beta != 0.0:
            return replace(self, beta=0.0)
        if self.mode == "M2" and self.alpha != 0.0:
            return replace(self, alpha=0.0)
        return self

    def validate_strict(self):
        """Constraints for full training runs (CLI path): M3/M4 need both weights."""
        if self.mode in ("M3", "M4") and (self.alpha <= 0 or self.beta <= 0):
            raise ContractError(f"mode {self.mode} needs alpha > 0 and beta > 0")
        if self.batch < 2:
            raise ContractError("batch size must be >= 2")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")

    def contrast(self) -> ContrastConfig:
        return ContrastConfig(
            tau=self.tau,
            theta=self.theta,
            include_positive_in_denominator=self.include_positive_in_denominator,
        )

    def to_kv(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "tau": self.tau,
            "theta": self.theta,
            "lr": self.lr,
            "steps": self.steps,
            "batch": self.batch,
            "seed": self.seed,
            "mode": self.mode,
            "width": self.width,
            "height": self.height,
            "classes": self.classes,
            "depth": self.depth,
            "background_group": self.background_group,
            "include_positive_in_denominator": self.include_positive_in_denominator,
            "out_dir": self.out_dir,
        }

    @staticmethod
    def from_kv(values: dict) -> "TrainConfig":
        return TrainConfig(**values)


@dataclass
class ModelState:
    encoder: TinyEncoder
    cam: CamWeights
    velocities: dict = field(default_factory=dict)
    step: int = 0

    def parameters(self) -> dict:
        named = dict(self.encoder.parameters())
        named["cam.base"] = self.cam.base
        named["cam.refined"] = self.cam.refined
        return named


def init_state(cfg: TrainConfig) -> ModelState:
    streams = np.random.SeedSequence(cfg.seed).spawn(2)
    encoder = TinyEncoder.build(
        in_channels=3, widths=(16, 24, cfg.depth), strides=(2, 2, 1), seed=streams[0]
    )
    cam = CamWeights.init(cfg.classes, cfg.depth, seed=streams[1])
    state = ModelState(encoder, cam)
    state.velocities = {name: np.zeros_like(p.data) for name, p in state.parameters().items()}
    return state


# -- spec-level ops -------------------------------------------------------------


def refine_features(features: Tensor, group_ctx: Tensor, consistency: Tensor) -> Tensor:
    """softmax(f C^T) S: pixels re-expressed as mixtures of semantic rows."""
    if features.data.shape[1] != group_ctx.data.shape[1]:
        raise ShapeError(
            f"feature depth {features.data.shape[1]} != group-context depth {group_ctx.data.shape[1]}"
        )
    if group_ctx.data.shape[0] != consistency.data.shape[0]:
        raise ShapeError(
            f"group counts differ: context {group_ctx.data.shape[0]} vs semantic {consistency.data.shape[0]}"
        )
    return matmul(softmax_rows(matmul(features, group_ctx.T)), consistency)


def concat_features(features: Tensor, refined: Tensor) -> Tensor:
    """Channel-wise concatenation, original features first."""
    if features.data.shape[0] != refined.data.shape[0]:
        raise ShapeError(
            f"row mismatch: {features.data.shape[0]} vs {refined.data.shape[0]}"
        )
    return concat([features, refined], axis=1)


def total_loss(lp: Tensor, ls: Tensor, lce: Tensor, alpha: float, beta: float) -> Tensor:
    if alpha < 0 or beta < 0:
        raise ContractError("loss weights must be >= 0")
    return lp * alpha + ls * beta + lce


# -- batch forward ---------------------------------------------------------------


@dataclass
class ImageForward:
    features: Tensor  # (V, D)
    base_stack: CamStack
    pseudo: np.ndarray  # (V,) uint16 from the base CAM
    present: frozenset
    groups: object = None
    group_class: list = None
    context: Tensor = None
    refined_stack: CamStack = None
    refined_pseudo: np.ndarray = None


@dataclass
class BatchResult:
    total: Tensor
    loss_ce: Tensor
    loss_pgcl: ContrastLoss
    loss_sgcl: ContrastLoss
    images: list

    def scalars(self) -> dict:
        return {
            "loss_total": float(self.total.data),
            "loss_ce": float(self.loss_ce.data),
            "loss_pgcl": float(self.loss_pgcl.value.data),
            "loss_sgcl": float(self.loss_sgcl.value.data),
        }


def group_count(present, background_group: bool) -> int:
    return len(present) + (1 if background_group else 0)


def _spliced_refined_stack(refined_stack: CamStack, base_stack: CamStack) -> CamStack:
    """Refined CAM with the base CAM's background channel.

    No loss carries a background target, so the refined head's class-0 row
    never receives a gradient; the base head's background channel is the one
    the semantic stream actually trains. Foreground channels come from the
    refined head, the background readout is shared.
    """
    spliced = concat(
        [base_stack.scores[:, 0:1], refined_stack.scores[:, 1:]], axis=1
    )
    return CamStack(spliced, refined=True)


def _vote_semantic_matrix(group_class, num_classes) -> SemanticMatrix:
    """One-hot semantic matrix at each group's assigned class.

    The refinement input uses the grouping's hard class estimate so that the
    refined features carry clean per-group class prototypes; the soft cosine
    matrix stays the semantic-contrast target.
    """
    rows = np.zeros((len(group_class), num_classes))
    for u, cls in enumerate(group_class):
        rows[u, int(cls)] = 1.0
    return SemanticMatrix(Tensor(rows), tuple(sorted(set(int(c) for c in group_class))))


def _cluster_seed(cfg_seed, step, slot):
    return np.random.SeedSequence([cfg_seed, step, slot, 0xC1]).generate_state(1)[0]


def forward_batch(state: ModelState, scenes, cfg: TrainConfig, cluster_cache=None) -> BatchResult:
    """Run one batch through the mode's wiring and assemble the joint loss.

    cluster_cache, when given, freezes k-means assignments across repeated
    calls on the same batch (slot -> assignment array); prototypes are still
    rebuilt differentiably from the current features. Finite-difference
    checks need this because cluster assignments are discrete.
    """
    cfg = cfg.normalized()
    ccfg = cfg.contrast()
    mode = cfg.mode
    want_groups = mode in ("M1", "M2", "M3", "M4")
    want_pgcl = mode in ("M1", "M3", "M4")
    want_sgcl = mode in ("M2", "M3", "M4")
    want_refine = mode == "M4"

    images = []
    for slot, scene in enumerate(scenes):
        feats = flatten_features(encode(state.encoder, scene.image))
        base = cam_forward(feats, state.cam.base)
        present = frozenset(int(c) for c in scene.image_labels)
        pseudo = pseudo_labels(base, present).labels
        fwd = ImageForward(feats, base, pseudo, present)
        if want_groups:
            affinity = pixel_affinity(feats)
            fwd.context = pixel_context(feats, affinity)
            g = min(group_count(present, cfg.background_group), feats.data.shape[0])
            if cluster_cache is not None and slot in cluster_cache:
                fwd.groups = groups_from_assignment(feats, cluster_cache[slot], g)
            else:
                fwd.groups = cluster_pixels(
                    feats, fwd.context, g, _cluster_seed(cfg.seed, state.step, slot)
                )
                if cluster_cache is not None:
                    cluster_cache[slot] = fwd.groups.assignment
            fwd.group_class = assign_group_classes(fwd.groups, pseudo, present)
        images.append(fwd)

    zero = Tensor(0.0)
    lp = ContrastLoss(zero, degenerate=True)
    if want_pgcl:
        lp = pgcl_loss([(fwd.groups, fwd.group_class) for fwd in images], ccfg)

    ls = ContrastLoss(zero, degenerate=True)
    refine_consistency = {}
    if want_sgcl or want_refine:
        bank = build_class_bank(
            [fwd.features for fwd in images], [fwd.pseudo for fwd in images], cfg.classes
        )
        rows, row_classes = [], []
        for fwd in images:
            unmasked = (set(fwd.present) | {0}) & set(bank.present)
            m = similarity_matrix(
                fwd.groups.prototypes,
                state.cam.base,
                unmasked,
                cfg.tau,
                include_background=False,
            )
            rows.append(semantic_consistency(m, bank))
            row_classes.extend(fwd.group_class)
            if want_refine:
                refine_consistency[id(fwd)] = semantic_consistency(
                    _vote_semantic_matrix(fwd.group_class, cfg.classes), bank
                )
        if want_sgcl:
            stacked = rows[0] if len(rows) == 1 else concat(rows, axis=0)
            ls = sgcl_loss(stacked, row_classes, bank, ccfg)

    ce_terms = []
    for fwd in images:
        if want_refine:
            c_matrix = group_context(fwd.context, fwd.groups)
            refined_feats = refine_features(
                fwd.features, c_matrix, refine_consistency[id(fwd)]
            )
            stacked = concat_features(fwd.features, refined_feats)
            fwd.refined_stack = _spliced_refined_stack(
                refined_cam(stacked, state.cam.refined), fwd.base_stack
            )
            # both heads are classification heads: the refined CE trains the
            # refinement path while the base CE keeps the pseudo-label source
            # (Eq. 2 side) learning exactly as in the unrefined modes
            ce_terms.append(
                ce_loss(classification_logits(fwd.base_stack), fwd.present)
                + ce_loss(classification_logits(fwd.refined_stack), fwd.present)
            )
        else:
            fwd.refined_stack = CamStack(fwd.base_stack.scores, refined=False)
            ce_terms.append(ce_loss(classification_logits(fwd.refined_stack), fwd.present))
        fwd.refined_pseudo = update_pseudo_labels(fwd.refined_stack, fwd.present).labels

    lce = ce_terms[0] if len(ce_terms) == 1 else _mean_scalars(ce_terms)
    total = total_loss(lp.value, ls.value, lce, cfg.alpha, cfg.beta)
    return BatchResult(total, lce, lp, ls, images)


def _mean_scalars(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))


# -- training loop -----------------------------------------------------------------


def sgd_step(state: ModelState, grads: dict, lr: float):
    for name, param in state.parameters().items():
        grad = grads.get(param)
        if grad is None:
            grad = np.zeros_like(param.data)
        v = MOMENTUM * state.velocities[name] + grad
        state.velocities[name] = v
        param.data = param.data - lr * v


def _batch_indices(cfg: TrainConfig, step, population):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step, 0xBA]))
    return rng.choice(population, size=cfg.batch, replace=population < cfg.batch)


def predict_scene(state: ModelState, scene, cfg: TrainConfig):
    """Inference for one scene: (base labels, refined labels), both (V,) uint16."""
    cfg = cfg.normalized()
    feats = flatten_features(encode(state.encoder, scene.image))
    base = cam_forward(feats, state.cam.base)
    present = frozenset(int(c) for c in scene.image_labels)
    base_labels = pseudo_labels(base, present).labels
    if cfg.mode != "M4":
        return base_labels, base_labels.copy()
    seed = zlib.crc32(scene.image_id.encode("utf-8")) if scene.image_id else 0
    affinity = pixel_affinity(feats)
    context = pixel_context(feats, affinity)
    g = min(group_count(present, cfg.background_group), feats.data.shape[0])
    groups = cluster_pixels(feats, context, g, seed)
    group_class = assign_group_classes(groups, base_labels, present)
    bank = build_class_bank([feats], [base_labels], cfg.classes)
    consistency = semantic_consistency(
        _vote_semantic_matrix(group_class, cfg.classes), bank
    )
    refined_feats = refine_features(feats, group_context(context, groups), consistency)
    stack = _spliced_refined_stack(
        refined_cam(concat_features(feats, refined_feats), state.cam.refined), base
    )
    refined_labels = update_pseudo_labels(stack, present).labels
    return base_labels, refined_labels


METRICS_HEADER = "step,loss_total,loss_ce,loss_pgcl,loss_sgcl,miou_base,miou_refined"


def train(cfg: TrainConfig, scenes, state: ModelState = None, eval_every: int = None,
          eval_scenes=None, metrics_path=None):
    """SGD with momentum over the scene corpus; deterministic per (cfg, seed).

    Returns (state, trace) where trace is a list of per-step metric dicts.
    Resuming from a checkpointed state continues the exact same trajectory.
    """
    from .evaluate import miou  # local import: evaluate stays pipeline-free

    cfg = cfg.normalized()
    if not scenes:
        raise ContractError("train needs a non-empty scene corpus")
    if state is None:
        state = init_state(cfg)
    if eval_every is None:
        eval_every = max(1, cfg.steps // 10)
    if eval_scenes is None:
        eval_scenes = [s for s in scenes if s.gt_mask is not None][:32]

    stride = state.encoder.total_stride

    def snapshot():
        if not eval_scenes:
            return "", ""
        base_preds, refined_preds, gts = [], [], []
        for scene in eval_scenes:
            base_labels, refined_labels = predict_scene(state, scene, cfg)
            base_preds.append(base_labels)
            refined_preds.append(refined_labels)
            gts.append(_downsample_mask(scene.gt_mask.data, stride))
        gt = np.concatenate(gts)
        return (
            repr(miou(np.concatenate(base_preds), gt, cfg.classes).miou),
            repr(miou(np.concatenate(refined_preds), gt, cfg.classes).miou),
        )

    trace = []
    rows = [METRICS_HEADER]
    for local_step in range(cfg.steps):
        step = state.step
        idx = _batch_indices(cfg, step, len(scenes))
        batch = [scenes[i] for i in idx]
        try:
            result = forward_batch(state, batch, cfg)
        except NonFiniteError as err:
            raise NumericalAbort(step, "forward", str(err)) from err
        for term, value in result.scalars().items():
            if not np.isfinite(value):
                raise NumericalAbort(step, term)
        grads = backward(result.total)
        sgd_step(state, grads, cfg.lr)
        state.step += 1
        measure = (state.step % eval_every == 0) or (state.step == cfg.steps)
        miou_base, miou_refined = snapshot() if measure else ("", "")
        scalars = result.scalars()
        trace.append({"step": state.step, **scalars,
                      "miou_base": miou_base, "miou_refined": miou_refined})
        rows.append(
            f"{state.step},{repr(scalars['loss_total'])},{repr(scalars['loss_ce'])},"
            f"{repr(scalars['loss_pgcl'])},{repr(scalars['loss_sgcl'])},{miou_base},{miou_refined}"
        )
    if metrics_path is not None:
        with open(metrics_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(rows) + "\n")
    return state, trace


def _downsample_mask(mask, stride):
    """Nearest-neighbor reduce a (W, H) mask to the encoder's output grid.

    Samples the center of each stride x stride patch, matching the spatial
    layout of flattened features.
    """
    w, h = mask.shape
    out_w, out_h = -(-w // stride), -(-h // stride)
    ri = np.minimum(np.arange(out_w) * stride + stride // 2, w - 1)
    ci = np.minimum(np.arange(out_h) * stride + stride // 2, h - 1)
    return mask[np.ix_(ri, ci)].reshape(-1)


# -- checkpointing -----------------------------------------------------------------


def save_checkpoint(path, state: ModelState, cfg: TrainConfig) -> None:
    tensors = [(name, p.data) for name, p in state.parameters().items()]
    tensors += [(f"velocity.{name}", v) for name, v in state.velocities.items()]
    meta_lines = [f"{k} = {format_value(v)}" for k, v in cfg.to_kv().items()]
    meta_lines.append(f"step = {state.step}")
    write_container(path, tensors, "\n".join(meta_lines) + "\n")


def load_checkpoint(path):
    """Rebuild (state, cfg) from a checkpoint container."""
    tensors, metadata = read_container(path)
    by_name = dict(tensors)
    step = 0
    kv = {}
    for line in metadata.splitlines():
        line = line.strip()
        if not line:
            continue
        key, raw = (tok.strip() for tok in line.split("=", 1))
        if key == "step":
            step = int(raw)
        else:
            kv[key] = raw
    cfg = TrainConfig.from_kv(parse_config_text(config_kv_text(kv), where=str(path)))
    state = init_state(cfg)
    for name, param in state.parameters().items():
        if name not in by_name:
            raise ValueError(f"checkpoint missing parameter '{name}'")
        param.data = by_name[name]
    for name in state.velocities:
        key = f"velocity.{name}"
        if key in by_name:
            state.velocities[name] = by_name[key]
    state.step = step
    return state, cfg


def config_kv_text(kv: dict) -> str:
    return "\n".join(f"{k} = {v}" for k, v in kv.items()) + "\n"
