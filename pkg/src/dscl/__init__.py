"""Dual-stream contrastive learning for weakly-supervised segmentation.

A desk-scale, fully testable engine: dense pixel embeddings from a small
convolutional encoder, class activation maps with pseudo-label extraction,
pixel-group and semantic-graph contrastive losses over cross-image context,
feature refinement feeding a second CAM head, joint training, mIoU
evaluation, and an efficiency benchmark of grouped vs pixel-by-pixel
contrast.
"""

from .autodiff import (
    ContractError,
    DegenerateVectorError,
    GradReport,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    concat,
    cosine_similarity,
    finite_checks,
    finite_diff_check,
    matmul,
    pearson_corr,
    softmax_rows,
)
from .bench import BenchRecord, bench_contrast
from .cam import (
    CamStack,
    CamWeights,
    PseudoLabelMap,
    cam_forward,
    ce_loss,
    classification_logits,
    pseudo_labels,
    refined_cam,
    update_pseudo_labels,
)
from .config import CONFIG_KEYS, MODES
from .contrast import (
    ClassPrototypeBank,
    ContrastConfig,
    ContrastLoss,
    SemanticMatrix,
    build_class_bank,
    contrast_score,
    info_nce,
    pgcl_loss,
    semantic_consistency,
    sgcl_loss,
    similarity_matrix,
)
from .encoder import TinyEncoder, encode, flatten_features
from .evaluate import IoUReport, miou
from .grouping import (
    GroupSet,
    assign_group_classes,
    cluster_pixels,
    group_context,
    groups_from_assignment,
    pixel_affinity,
    pixel_context,
    positive_set,
)
from .io import DatasetManifest, ManifestEntry, read_manifest, read_tensor, write_tensor
from .pipeline import (
    ModelState,
    NumericalAbort,
    TrainConfig,
    concat_features,
    forward_batch,
    init_state,
    load_checkpoint,
    predict_scene,
    refine_features,
    save_checkpoint,
    total_loss,
    train,
)
from .synth import Scene, SynthConfig, generate_corpus, generate_scene, load_corpus, write_corpus

__version__ = "0.1.0"
