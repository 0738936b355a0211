"""Module-ablation runner: trains every mode on shared corpora, reports medians.

For each seed one corpus is generated and split into train/eval scenes; all
five modes train on the identical train split and are scored on the identical
held-out split, so mode differences are attributable to the wiring alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import MODES
from .evaluate import miou
from .pipeline import NumericalAbort, TrainConfig, _downsample_mask, predict_scene, train
from .synth import SynthConfig, generate_corpus


@dataclass
class AblationCell:
    mode: str
    seed: int
    miou_base: float
    miou_refined: float
    aborted: bool = False


@dataclass
class AblationTable:
    cells: list

    def rows_for(self, mode):
        return [c for c in self.cells if c.mode == mode and not c.aborted]

    def median_refined(self, mode):
        rows = self.rows_for(mode)
        return float(np.median([c.miou_refined for c in rows])) if rows else float("nan")

    def median_base(self, mode):
        rows = self.rows_for(mode)
        return float(np.median([c.miou_base for c in rows])) if rows else float("nan")

    def to_csv(self) -> str:
        lines = ["mode,seed,miou_base,miou_refined"]
        for c in self.cells:
            if c.aborted:
                lines.append(f"{c.mode},{c.seed},aborted,aborted")
            else:
                lines.append(f"{c.mode},{c.seed},{c.miou_base!r},{c.miou_refined!r}")
        return "\n".join(lines) + "\n"

    def summary_lines(self):
        out = []
        for mode in MODES:
            rows = self.rows_for(mode)
            per_seed = " ".join(f"{c.miou_refined:.4f}" for c in rows)
            out.append(
                f"{mode:9s} median refined mIoU = {self.median_refined(mode):.4f} "
                f"(base {self.median_base(mode):.4f})  seeds: {per_seed}"
            )
        return out


def evaluate_on(state, cfg, scenes):
    """Base/refined mIoU pooled over all scenes at the encoder's output grid."""
    stride = state.encoder.total_stride
    base_preds, refined_preds, gts = [], [], []
    for scene in scenes:
        base_labels, refined_labels = predict_scene(state, scene, cfg)
        base_preds.append(base_labels)
        refined_preds.append(refined_labels)
        gts.append(_downsample_mask(scene.gt_mask.data, stride))
    gt = np.concatenate(gts)
    return (
        miou(np.concatenate(base_preds), gt, cfg.classes).miou,
        miou(np.concatenate(refined_preds), gt, cfg.classes).miou,
    )


def run_ablation(
    base_cfg: TrainConfig,
    seeds,
    train_count: int = 200,
    eval_count: int = 50,
    csv_path=None,
    modes=MODES,
    log=None,
) -> AblationTable:
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError(f"ablation needs >= 3 seeds, got {len(seeds)}")
    cells = []
    for seed in seeds:
        synth = SynthConfig(
            width=base_cfg.width, height=base_cfg.height, classes=base_cfg.classes
        )
        corpus = generate_corpus(synth, train_count + eval_count, base_seed=seed)
        train_scenes = corpus[:train_count]
        eval_scenes = corpus[train_count:]
        for mode in modes:
            cfg = replace(base_cfg, mode=mode, seed=seed).normalized()
            try:
                state, _ = train(cfg, train_scenes, eval_scenes=[])
                base_score, refined_score = evaluate_on(state, cfg, eval_scenes)
                cell = AblationCell(mode, seed, base_score, refined_score)
            except NumericalAbort:
                cell = AblationCell(mode, seed, float("nan"), float("nan"), aborted=True)
            cells.append(cell)
            if log is not None:
                log(
                    f"mode={mode} seed={seed} "
                    + ("aborted" if cell.aborted else
                       f"miou_base={cell.miou_base:.4f} miou_refined={cell.miou_refined:.4f}")
                )
    table = AblationTable(cells)
    if csv_path is not None:
        Path(csv_path).write_text(table.to_csv(), encoding="utf-8")
    return table
