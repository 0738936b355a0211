"""Command-line entry point: generate / train / eval / ablate / bench /
gradcheck / dump-groups.

Exit codes: 0 success, 1 validation or usage error, 2 numerical abort.
All randomness is threaded through the single config seed, so every command
is idempotent given identical inputs.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .ablation import run_ablation
from .autodiff import ContractError, NonFiniteError, finite_checks
from .bench import bench_contrast, bench_csv
from .config import CONFIG_KEYS, ConfigFileError, load_config_file, parse_config_text
from .evaluate import miou
from .gradcheck import LOSS_TERMS, run_gradcheck
from .io import FormatError, read_manifest, write_tensor
from .pipeline import (
    NumericalAbort,
    TrainConfig,
    load_checkpoint,
    predict_scene,
    save_checkpoint,
    train,
    _downsample_mask,
)
from .synth import ConfigError, SynthConfig, generate_corpus, load_corpus, write_corpus


class UsageError(ValueError):
    pass


def _config_from_args(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for override in getattr(args, "set", None) or []:
        if "=" not in override:
            raise UsageError(f"--set expects key=value, got {override!r}")
        values.update(parse_config_text(override, where="--set"))
    return TrainConfig.from_kv(values)


def cmd_generate(args) -> int:
    cfg = _config_from_args(args)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    synth = SynthConfig(width=cfg.width, height=cfg.height, classes=cfg.classes)
    scenes = generate_corpus(synth, args.count, base_seed=cfg.seed)
    manifest = write_corpus(args.out, scenes, cfg.classes, base_seed=cfg.seed)
    print(f"wrote {len(scenes)} scenes and manifest.txt to {args.out}")
    return 0


def _load_scenes(manifest_path, num_classes):
    manifest = read_manifest(manifest_path, num_classes=num_classes)
    return load_corpus(manifest)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg = cfg.normalized()
    cfg.validate_strict()
    scenes = _load_scenes(args.manifest, cfg.classes)
    out_dir = Path(args.out if args.out else cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume)
    state, trace = train(cfg, scenes, state=state, metrics_path=out_dir / "metrics.csv")
    save_checkpoint(out_dir / "checkpoint.dst", state, cfg)
    last = trace[-1] if trace else {}
    print(f"trained {cfg.steps} steps (mode {cfg.mode}); checkpoint in {out_dir}")
    if last:
        print(
            f"final: loss_total={last['loss_total']:.6f} loss_ce={last['loss_ce']:.6f} "
            f"loss_pgcl={last['loss_pgcl']:.6f} loss_sgcl={last['loss_sgcl']:.6f}"
        )
    return 0


def cmd_eval(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    scenes = _load_scenes(args.manifest, cfg.classes)
    stride = state.encoder.total_stride
    preds, gts = [], []
    for scene in scenes:
        base_labels, refined_labels = predict_scene(state, scene, cfg)
        labels = refined_labels if cfg.mode == "M4" else base_labels
        preds.append(labels)
        gts.append(_downsample_mask(scene.gt_mask.data, stride))
    report = miou(np.concatenate(preds), np.concatenate(gts), cfg.classes)
    for line in report.lines():
        print(line)
    print(f"mIoU = {report.miou:.4f}")
    out = Path(args.out)
    rows = ["class,iou"] + [f"{k},{v!r}" for k, v in sorted(report.per_class.items())]
    rows.append(f"mean,{report.miou!r}")
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip() != ""]
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = run_ablation(
        cfg,
        seeds,
        train_count=args.train_count,
        eval_count=args.eval_count,
        csv_path=out_dir / "ablation.csv",
        log=print,
    )
    for line in table.summary_lines():
        print(line)
    print(f"wrote {out_dir / 'ablation.csv'}")
    return 0


def cmd_bench(args) -> int:
    sizes = [int(tok) for tok in args.sizes.split(",") if tok.strip()]
    groups = [int(tok) for tok in args.groups.split(",") if tok.strip()]
    records = bench_contrast(sizes, groups, repeats=args.repeats)
    text = bench_csv(records)
    Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    with finite_checks(False):
        reports = run_gradcheck(seed=args.seed, tol=args.tol)
    failed = False
    for term in LOSS_TERMS:
        report = reports[term]
        status = "PASS" if report.passed else "FAIL"
        print(f"{term}: {status} worst_rel_error={report.worst():.3e} tol={report.tolerance:.1e}")
        failed = failed or not report.passed
    return 1 if failed else 0


def cmd_dump_groups(args) -> int:
    state, cfg = load_checkpoint(args.checkpoint)
    manifest = read_manifest(args.manifest, num_classes=cfg.classes)
    matches = [e for e in manifest.entries if e.image_id == args.image_id]
    if not matches:
        raise UsageError(f"image id {args.image_id!r} not found in {args.manifest}")
    from .cam import cam_forward, pseudo_labels
    from .encoder import encode, flatten_features
    from .grouping import assign_group_classes, cluster_pixels, pixel_affinity, pixel_context
    from .pipeline import group_count
    from .synth import load_scene
    import zlib

    scene = load_scene(manifest, matches[0])
    feats = flatten_features(encode(state.encoder, scene.image))
    present = frozenset(scene.image_labels)
    pseudo = pseudo_labels(cam_forward(feats, state.cam.base), present).labels
    ctx = pixel_context(feats, pixel_affinity(feats))
    g = min(group_count(present, cfg.background_group), feats.data.shape[0])
    groups = cluster_pixels(feats, ctx, g, zlib.crc32(args.image_id.encode("utf-8")))
    classes = assign_group_classes(groups, pseudo, present)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    assignment_path = out_dir / f"{args.image_id}_groups.dst"
    write_tensor(assignment_path, groups.assignment.astype(np.uint16))
    proto_path = out_dir / f"{args.image_id}_prototypes.csv"
    depth = groups.prototypes.data.shape[1]
    rows = ["group,class," + ",".join(f"d{j}" for j in range(depth))]
    for u in range(groups.num_groups):
        values = ",".join(repr(float(x)) for x in groups.prototypes.data[u])
        rows.append(f"{u},{classes[u]},{values}")
    proto_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(f"wrote {assignment_path} and {proto_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dscl",
        description="dual-stream contrastive learning for weakly-supervised segmentation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help=f"override a config key (valid: {', '.join(CONFIG_KEYS)})",
        )

    p = sub.add_parser("generate", help="generate a synthetic scene corpus")
    add_config_args(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train a model on a manifest")
    add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output directory (default: out_dir from config)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", default="eval.csv")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run the module ablation over seeds")
    add_config_args(p)
    p.add_argument("--seeds", required=True, help="comma-separated seed list")
    p.add_argument("--train-count", type=int, default=200)
    p.add_argument("--eval-count", type=int, default=50)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("bench", help="time grouped vs pixel-by-pixel contrast")
    p.add_argument("--sizes", required=True, help="comma-separated feature grid sides")
    p.add_argument("--groups", required=True, help="comma-separated group counts")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("dump-groups", help="dump one image's group assignment and prototypes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--image-id", required=True)
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_dump_groups)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (UsageError, ConfigFileError, ConfigError, ContractError, FormatError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (NumericalAbort, NonFiniteError) as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
