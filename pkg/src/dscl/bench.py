"""Wall-clock comparison of pixel-by-pixel contrast vs grouped contrast.

One "iteration" is the contrast stage of a training step on a batch of
feature maps, forward plus backward, built from the library's differentiable
ops exactly as the training loop builds them:

  pixelwise  one InfoNCE term per pixel anchor against every other pixel of
             the same image (positives share the anchor's label), so the
             V*(V-1)/2 same-image pairs all enter the loss
  grouped    pixel affinity + context aggregation + k-means grouping
             (clustering cost included in the timing) + the cross-image
             group contrast over group pairs

Inputs are float32; timings use a monotonic clock, one warmup run, and the
median over repeats, with the BLAS pool pinned to one thread. Post-op finite
checks are switched off inside the timed region so both variants time pure
arithmetic and graph construction.
"""

from __future__ import annotations

import time
from contextlib import nullcontext
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, backward, finite_checks, matmul
from .contrast import ContrastConfig, pgcl_loss
from .grouping import assign_group_classes, cluster_pixels, pixel_affinity, pixel_context

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - installed in the supported environment
    threadpool_limits = None


@dataclass
class BenchRecord:
    resolution: int  # feature grid side; V = resolution**2
    group_count: int
    variant: str  # "pixelwise" | "grouped"
    seconds: float  # median wall time per iteration
    pairs: int  # contrast pairs entering the loss per iteration

    def csv_row(self):
        return f"{self.resolution},{self.group_count},{self.variant},{self.seconds!r},{self.pairs}"


BENCH_CSV_HEADER = "resolution,G,variant,median_seconds,pairs"


def pixel_pair_count(v: int) -> int:
    return v * (v - 1) // 2


def group_pair_count(batch: int, groups: int) -> int:
    t = batch * groups
    return t * (t - 1) // 2


def _pixelwise_iteration(features_list, labels_list, tau):
    one_over_tau = 1.0 / tau
    for feats, labels in zip(features_list, labels_list):
        v = feats.shape[0]
        f = Tensor(feats, requires_grad=True)
        zhat = f / (f * f).sum(axis=1, keepdims=True).sqrt()
        zt = zhat.T
        total, used = None, 0
        for u in range(v):
            same = labels == labels[u]
            positives = same.copy()
            positives[u] = False
            negatives = ~same
            if not positives.any() or not negatives.any():
                continue
            row = zhat[u : u + 1]
            sims = matmul(row, zt) * one_over_tau
            phi = sims.exp()
            neg_sum = (phi * Tensor(negatives.astype(feats.dtype))).sum()
            anchor = ((phi[0, positives] + neg_sum).log() - sims[0, positives]).mean()
            total = anchor if total is None else total + anchor
            used += 1
        if total is not None:
            backward(total * (1.0 / used))


def _grouped_iteration(features_list, labels_list, groups, cfg, seed):
    batch = []
    for slot, (feats, labels) in enumerate(zip(features_list, labels_list)):
        f = Tensor(feats, requires_grad=True)
        affinity = pixel_affinity(f)
        context = pixel_context(f, affinity)
        group_set = cluster_pixels(f, context, groups, seed=seed + slot)
        classes = assign_group_classes(group_set, labels, set(np.unique(labels)))
        batch.append((group_set, classes))
    loss = pgcl_loss(batch, cfg)
    if not loss.degenerate:
        backward(loss.value)


def _median_time(fn, repeats):
    fn()  # warmup
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def bench_contrast(
    resolutions, group_counts, repeats=5, batch=2, depth=32, tau=0.1, seed=0
) -> list:
    """Measure both variants for every (resolution, G) cell; float32 inputs."""
    if repeats < 3:
        raise ValueError(f"bench needs repeats >= 3, got {repeats}")
    cfg = ContrastConfig(tau=tau)
    records = []
    pin = threadpool_limits(limits=1) if threadpool_limits is not None else nullcontext()
    with pin, finite_checks(False):
        for resolution in resolutions:
            v = resolution * resolution
            for groups in group_counts:
                rng = np.random.default_rng(np.random.SeedSequence([seed, resolution, groups]))
                features = [
                    rng.normal(size=(v, depth)).astype(np.float32) for _ in range(batch)
                ]
                labels = [
                    rng.integers(0, max(groups, 2), size=v).astype(np.uint16)
                    for _ in range(batch)
                ]
                pixel_seconds = _median_time(
                    lambda: _pixelwise_iteration(features, labels, tau), repeats
                )
                records.append(
                    BenchRecord(
                        resolution, groups, "pixelwise", pixel_seconds,
                        batch * pixel_pair_count(v),
                    )
                )
                grouped_seconds = _median_time(
                    lambda: _grouped_iteration(features, labels, groups, cfg, seed), repeats
                )
                records.append(
                    BenchRecord(
                        resolution, groups, "grouped", grouped_seconds,
                        group_pair_count(batch, groups),
                    )
                )
    return records


def bench_csv(records) -> str:
    return BENCH_CSV_HEADER + "\n" + "\n".join(r.csv_row() for r in records) + "\n"
