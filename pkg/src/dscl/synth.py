"""Synthetic segmentation scenes: colored geometric blobs on textured ground.

Each foreground class is a color+shape family so that a small convolutional
encoder can separate them, while per-blob color jitter, shading, and additive
noise keep the task from saturating. Background is always class id 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .io import DatasetManifest, ManifestEntry, read_tensor, write_tensor

# base color per foreground class id (index 0 unused: background)
_PALETTE = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.85, 0.25, 0.20],
        [0.20, 0.75, 0.30],
        [0.20, 0.35, 0.85],
        [0.85, 0.80, 0.20],
        [0.80, 0.25, 0.80],
        [0.20, 0.80, 0.80],
        [0.90, 0.55, 0.15],
    ]
)

_SHAPES = ("disc", "square", "diamond", "ring", "stripe", "cross", "tri")


class GenerationError(RuntimeError):
    """Blob placement became infeasible after bounded retries."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    width: int = 32
    height: int = 32
    classes: int = 4
    min_blobs: int = 1
    max_blobs: int | None = None  # defaults to classes - 1
    noise_sigma: float = 0.05
    texture_amplitude: float = 0.18
    color_jitter: float = 0.22
    min_radius_frac: float = 0.12
    max_radius_frac: float = 0.20
    placement_retries: int = 80

    def __post_init__(self):
        if not (16 <= self.width <= 128 and 16 <= self.height <= 128):
            raise ConfigError(f"width/height must be in [16, 128], got {self.width}x{self.height}")
        if not (3 <= self.classes <= 8):
            raise ConfigError(f"classes must be in [3, 8], got {self.classes}")
        hi = self.max_blobs if self.max_blobs is not None else self.classes - 1
        if not (1 <= self.min_blobs <= hi <= self.classes - 1):
            raise ConfigError(
                f"blob count range [{self.min_blobs}, {hi}] must sit inside [1, {self.classes - 1}]"
            )

    @property
    def blob_range(self):
        hi = self.max_blobs if self.max_blobs is not None else self.classes - 1
        return self.min_blobs, hi


@dataclass
class Scene:
    """One image with its ground-truth mask and image-level label set.

    The mask exists for evaluation only; training consumes image_labels.
    """

    image: Tensor  # (W, H, 3) float64 in [0, 1]
    gt_mask: Tensor  # (W, H) uint16, 0 = background
    image_labels: frozenset
    image_id: str = ""

    def check(self, num_classes):
        mask_classes = set(int(c) for c in np.unique(self.gt_mask.data)) - {0}
        if mask_classes != set(self.image_labels):
            raise AssertionError(
                f"label set {sorted(self.image_labels)} != mask classes {sorted(mask_classes)}"
            )
        if not (1 <= len(self.image_labels) <= num_classes - 1):
            raise AssertionError(f"|Y| = {len(self.image_labels)} out of range")


def _blob_mask(shape, cx, cy, radius, xx, yy):
    dx, dy = xx - cx, yy - cy
    if shape == "disc":
        return dx * dx + dy * dy <= radius * radius
    if shape == "square":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= radius)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= radius * 1.3
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= radius * radius) & (r2 >= (0.45 * radius) ** 2)
    if shape == "stripe":
        return (np.abs(dx) <= radius) & (np.abs(dy) <= 0.45 * radius)
    if shape == "cross":
        arm = 0.45 * radius
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= radius)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= radius)
        )
    # tri: upper half-plane wedge
    return (dy >= -radius * 0.7) & (dy + 2 * np.abs(dx) <= radius * 0.8)


def class_shape(class_id):
    return _SHAPES[(class_id - 1) % len(_SHAPES)]


def generate_scene(cfg: SynthConfig, seed) -> Scene:
    """Deterministic scene for (cfg, seed); raises GenerationError when blobs don't fit."""
    rng = np.random.default_rng(seed)
    w, h = cfg.width, cfg.height
    xx, yy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64), indexing="ij")

    # textured background: two low-frequency waves plus broadband noise
    fx, fy = rng.uniform(0.5, 1.5, size=2)
    px, py = rng.uniform(0, 2 * np.pi, size=2)
    base = 0.42 + cfg.texture_amplitude * (
        0.6 * np.sin(2 * np.pi * fx * xx / w + px) * np.cos(2 * np.pi * fy * yy / h + py)
        + 0.4 * np.sin(2 * np.pi * (xx + yy) / (0.9 * (w + h)) + px)
    )
    channel_tint = rng.uniform(-0.05, 0.05, size=3)
    image = base[:, :, None] + channel_tint[None, None, :]
    mask = np.zeros((w, h), dtype=np.uint16)

    lo, hi = cfg.blob_range
    n_blobs = int(rng.integers(lo, hi + 1))
    placed = []
    min_dim = min(w, h)
    for _ in range(n_blobs):
        class_id = int(rng.integers(1, cfg.classes))
        shape = class_shape(class_id)
        for attempt in range(cfg.placement_retries + 1):
            if attempt == cfg.placement_retries:
                raise GenerationError(
                    f"could not place blob {len(placed) + 1}/{n_blobs} after {cfg.placement_retries} retries"
                )
            # later retries shrink the blob so crowded scenes stay feasible
            shrink = 1.0 - 0.5 * attempt / cfg.placement_retries
            radius = rng.uniform(cfg.min_radius_frac, cfg.max_radius_frac) * min_dim * shrink
            cx = rng.uniform(radius, w - 1 - radius)
            cy = rng.uniform(radius, h - 1 - radius)
            blob = _blob_mask(shape, cx, cy, radius, xx, yy)
            if not blob.any():
                continue
            if any((blob & m).any() for _, m in placed):
                continue
            placed.append((class_id, blob))
            break
        class_id, blob = placed[-1]
        color = _PALETTE[class_id] * (1.0 + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3))
        shading = 1.0 + 0.25 * (xx[blob] - cx) / max(radius, 1.0)
        image[blob] = color[None, :] * shading[:, None]
        mask[blob] = class_id

    image += rng.normal(scale=cfg.noise_sigma, size=image.shape)
    image = np.clip(image, 0.0, 1.0)
    labels = frozenset(int(c) for c in np.unique(mask) if c != 0)
    scene = Scene(Tensor(image), Tensor(mask), labels)
    scene.check(cfg.classes)
    return scene


def corpus_seeds(base_seed, count):
    """The per-scene seed stream used by every corpus-producing entry point."""
    return [int(s) for s in np.random.SeedSequence(base_seed).generate_state(count, dtype=np.uint64)]


def generate_corpus(cfg: SynthConfig, count, base_seed):
    scenes = []
    for i, s in enumerate(corpus_seeds(base_seed, count)):
        scene = generate_scene(cfg, s)
        scene.image_id = f"scene{i:05d}"
        scenes.append(scene)
    return scenes


def write_corpus(out_dir, scenes, num_classes, base_seed) -> DatasetManifest:
    """Write image/mask tensor files plus manifest.txt into out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for scene in scenes:
        image_rel = f"{scene.image_id}_image.dst"
        mask_rel = f"{scene.image_id}_mask.dst"
        write_tensor(out_dir / image_rel, scene.image)
        write_tensor(out_dir / mask_rel, scene.gt_mask)
        entries.append(
            ManifestEntry(scene.image_id, image_rel, tuple(sorted(scene.image_labels)), mask_rel)
        )
    manifest = DatasetManifest(entries, num_classes, seed=base_seed, directory=out_dir)
    manifest.write(out_dir / "manifest.txt")
    return manifest


def load_scene(manifest: DatasetManifest, entry: ManifestEntry) -> Scene:
    image = read_tensor(manifest.resolve(entry.image_path))
    mask = None
    if entry.mask_path is not None:
        mask = read_tensor(manifest.resolve(entry.mask_path))
    else:
        mask = Tensor(np.zeros(image.shape[:2], dtype=np.uint16))
    return Scene(image, mask, frozenset(entry.class_ids), entry.image_id)


def load_corpus(manifest: DatasetManifest):
    return [load_scene(manifest, e) for e in manifest.entries]
