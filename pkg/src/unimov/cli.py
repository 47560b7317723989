"""``unimov`` command line.

Every subcommand prints a human-readable block followed by a ``[metrics]`` (or
``[output]``) section of ``key=value`` lines, so scripts can parse the tail.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .captions import build_caption_pairs, default_specs, write_caption_manifest
from .config import DEFAULT_CLASS_NAMES, TOY_PRESET, load_config
from .errors import UnimovError
from .evaluate import (
    gt_instances_from_cloud,
    instance_metrics,
    parse_partition,
    read_instances,
    read_predictions,
    semantic_metrics,
    classify_points,
    write_predictions,
)
from .scene import SectorSpec, load_scene, make_synthetic_scene, partition_sectors, save_scene, write_partition_manifest

log = logging.getLogger("unimov")


def _kv_block(title, items):
    print(f"[{title}]")
    for k, v in items.items():
        print(f"{k}={'none' if v is None else (repr(v) if isinstance(v, float) else v)}")


def _floats(text):
    return [float(s) for s in text.split(",") if s.strip()]


def _gt_labels(path):
    """Ground-truth semantic ids from a scene file or a prediction-format dump."""
    head = Path(path).read_text().split(maxsplit=1)[:1]
    if head == ["UNIMOV-PRED"]:
        return read_predictions(path)
    return load_scene(path).cloud.sem_labels


# ---------------------------------------------------------------------------
# handlers


def cmd_synth(args):
    classes = [int(c) for c in args.classes.split(",")]
    sample = make_synthetic_scene(args.seed, args.points, classes, image_size=args.image_size, scene_id=Path(args.out).stem)
    save_scene(sample, args.out)
    _kv_block("output", {"scene": args.out, "points": len(sample.cloud)})


def cmd_partition(args):
    sample = load_scene(args.inp)
    spec = SectorSpec(args.theta, args.phi)
    assignment = partition_sectors(sample.cloud, spec)
    write_partition_manifest(sample.scene_id, assignment, args.out)
    sizes = assignment.sizes()
    print(f"{sample.scene_id}: {spec.sector_count} sectors, step {spec.step_deg:g} deg")
    _kv_block("output", {"manifest": args.out, "sectors": spec.sector_count, "sizes": ",".join(map(str, sizes))})


def _model_for(args):
    import torch

    from .checkpoint import load_module
    from .train import UniModel

    cfg = load_config(args.config) if args.config else TOY_PRESET
    model = UniModel(cfg)
    if getattr(args, "checkpoint", None):
        load_module(model, args.checkpoint)
    model.eval()
    torch.set_num_threads(1)
    return cfg, model


def cmd_extract(args):
    from .extractor import extract

    _, model = _model_for(args)
    sample = load_scene(args.scene)
    per_point, pooled = extract(sample.cloud, model=model.extractor)
    n, m = per_point.shape
    with open(args.out, "w") as fh:
        fh.write(f"{n} {m}\n")
        for row in per_point:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    _kv_block("output", {"features": args.out, "N": n, "M": m, "pooled_norm": float(np.linalg.norm(pooled))})


def cmd_predict(args):
    from .train import make_provider

    cfg, model = _model_for(args)
    sample = load_scene(args.scene)
    provider = make_provider(cfg)
    ids = list(range(len(cfg.class_names)))
    queries = np.stack([provider.concept_embedding(n) for n in cfg.class_names])
    pred = classify_points(model.point_embeddings(sample.cloud), queries, ids)
    write_predictions(pred, args.out)
    _kv_block("output", {"predictions": args.out, "N": len(pred)})


def cmd_captions_build(args):
    sample = load_scene(args.scene)
    names = args.names.split(",") if args.names else list(DEFAULT_CLASS_NAMES)
    label_names = {i: n for i, n in enumerate(names)}
    records = build_caption_pairs(sample, default_specs(_floats(args.views), args.phi), label_names=label_names)
    write_caption_manifest(records, args.out)
    counts = {v: sum(r.view == v for r in records) for v in ("global", "eye", "sector")}
    _kv_block("output", {"manifest": args.out, "records": len(records), **{f"records.{k}": c for k, c in counts.items()}})


def _print_seg(m):
    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}"

    print(f"hIoU {pct(m.hiou)}  mIoU^B {pct(m.miou_base)}  mIoU^N {pct(m.miou_novel)}")
    for c, v in sorted(m.per_class_iou.items()):
        print(f"  class {c:>3}  IoU {pct(v)}")


def cmd_eval_sem(args):
    pred = read_predictions(args.pred)
    gt = _gt_labels(args.gt)
    m = semantic_metrics(pred, gt, parse_partition(args.partition))
    _print_seg(m)
    _kv_block("metrics", m.as_dict())


def cmd_eval_inst(args):
    preds = read_instances(args.pred)
    if Path(args.gt).read_text().startswith("UNIMOV-SCENE"):
        gts = gt_instances_from_cloud(load_scene(args.gt).cloud)
    else:
        gts = [(p.point_indices, p.class_id) for p in read_instances(args.gt)]
    hap, mb, mn, per_class = instance_metrics(preds, gts, parse_partition(args.partition))

    def pct(v):
        return "-" if v is None else f"{100 * v:.2f}"

    print(f"hAP50 {pct(hap)}  mAP50^B {pct(mb)}  mAP50^N {pct(mn)}")
    for c, v in sorted(per_class.items()):
        print(f"  class {c:>3}  AP50 {pct(v)}")
    _kv_block("metrics", {"hap50": hap, "map50_base": mb, "map50_novel": mn})


def cmd_train(args):
    from .checkpoint import save_module
    from .report import emit_report
    from .train import run_toy, toy_partition

    cfg = load_config(args.config)
    out = Path(args.out)
    model, report = run_toy(cfg, label=args.label or Path(args.config).stem)
    paths = emit_report(report, out)
    save_module(model, out / "model.ckpt")
    (out / "partition.txt").write_text(toy_partition(cfg).to_text())
    print(paths["table"].read_text(), end="")
    _kv_block("metrics", {**{k: report.metrics.get(k) for k in ("miou_base", "miou_novel", "hiou")}, "out": str(out)})


def cmd_ablate(args):
    from .report import emit_ablation
    from .train import run_ablation

    cfg = load_config(args.config) if args.config else TOY_PRESET
    rows = run_ablation(args.grid, cfg)
    paths = emit_ablation(rows, args.out, title=args.grid)
    print(paths["table"].read_text(), end="")
    _kv_block("output", {"rows": len(rows), "out": args.out})


def cmd_report(args):
    from .report import emit_report, load_report

    report = load_report(args.inp)
    paths = emit_report(report, args.out)
    print(paths["table"].read_text(), end="")
    _kv_block("metrics", {k: report.metrics.get(k) for k in ("miou_base", "miou_novel", "hiou")})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="unimov", description="Open-vocabulary 3D scene understanding toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic scene file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--points", type=int, default=256)
    s.add_argument("--classes", default="0,1,2,3")
    s.add_argument("--image-size", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("partition", help="sector-membership manifest for one view")
    s.add_argument("--theta", type=float, required=True)
    s.add_argument("--phi", type=float, default=0.0)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_partition)

    s = sub.add_parser("extract", help="dump per-point extractor features")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("predict", help="open-vocabulary per-point class predictions")
    s.add_argument("--config")
    s.add_argument("--checkpoint")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("captions", help="caption pair construction")
    csub = s.add_subparsers(dest="captions_command", required=True)
    b = csub.add_parser("build")
    b.add_argument("--scene", required=True)
    b.add_argument("--views", default="360,120,60")
    b.add_argument("--phi", type=float, default=0.0)
    b.add_argument("--names", help="comma-separated class names by id")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_captions_build)

    for name, func, what in (("eval-sem", cmd_eval_sem, "semantic"), ("eval-inst", cmd_eval_inst, "instance")):
        s = sub.add_parser(name, help=f"{what} segmentation metrics")
        s.add_argument("--pred", required=True)
        s.add_argument("--gt", required=True)
        s.add_argument("--partition", required=True, help="partition file or dataset:split[:seed]")
        s.set_defaults(func=func)

    s = sub.add_parser("train", help="toy training run with report and checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--out", default="run")
    s.add_argument("--label")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("ablate", help="run an ablation grid")
    s.add_argument("--grid", required=True, choices=["table4", "table5", "table6"])
    s.add_argument("--config")
    s.add_argument("--out", default="ablation")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("report", help="re-render a saved report")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (UnimovError, OSError) as exc:
        print(f"unimov: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
