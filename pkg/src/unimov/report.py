"""Report emission: plain-text tables, a key=value block, and matplotlib figures.

Wall-clock time goes to its own file so the other outputs stay bit-identical
across reruns of the same configuration.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .config import hash_snapshot  # noqa: E402
from .train import COMPONENTS, VIEW_COMPONENTS, RunReport  # noqa: E402

METRIC_KEYS = ("miou_base", "miou_novel", "hiou")


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(v: str):
    if v == "none":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def config_hash(report: RunReport) -> str:
    return hash_snapshot(report.config)


def report_kv(report: RunReport) -> str:
    lines = [f"label={report.label}"]
    lines += [f"{k}={_fmt(report.metrics.get(k))}" for k in METRIC_KEYS]
    lines.append(f"config_hash={config_hash(report)}")
    lines.append(f"epochs={len(report.epochs)}")
    for cid, iou in sorted(report.per_class_iou.items()):
        lines.append(f"iou.{cid}={_fmt(iou)}")
    for e in report.epochs:
        for k in COMPONENTS + VIEW_COMPONENTS + ("overall",):
            lines.append(f"epoch.{e['epoch']}.{k}={_fmt(e[k])}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = _parse(value.strip())
    return out


def _pct(v):
    return "   -  " if v is None else f"{100 * v:6.2f}"


def report_table(report: RunReport) -> str:
    m = report.metrics
    names = dict(enumerate(report.config.get("class_names", [])))
    lines = [
        f"run {report.label or '(unlabelled)'}  config {config_hash(report)}",
        "",
        "  hIoU   mIoU^B  mIoU^N",
        f"{_pct(m.get('hiou'))}  {_pct(m.get('miou_base'))}  {_pct(m.get('miou_novel'))}",
        "",
        "class            IoU",
    ]
    for cid, iou in sorted(report.per_class_iou.items()):
        lines.append(f"{names.get(cid, str(cid)):<14} {_pct(iou)}")
    lines += ["", "epoch " + " ".join(f"{k:>13}" for k in COMPONENTS + ("overall",))]
    for e in report.epochs:
        lines.append(f"{e['epoch']:>5} " + " ".join(f"{e[k]:13.6f}" for k in COMPONENTS + ("overall",)))
    return "\n".join(lines) + "\n"


def plot_losses(report: RunReport, path) -> None:
    epochs = [e["epoch"] for e in report.epochs]
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for k in COMPONENTS + ("overall",):
        ax.plot(epochs, [e[k] for e in report.epochs], marker="o", ms=3, lw=1.5 if k == "overall" else 1, label=k)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(report.label or "training loss")
    ax.legend(frameon=False, fontsize=8, ncol=3)
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_report(report: RunReport, out) -> dict:
    """Write report.txt, report.kv, report.json, loss_curve.png and timing.txt into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "table": out / "report.txt",
        "kv": out / "report.kv",
        "json": out / "report.json",
        "plot": out / "loss_curve.png",
        "timing": out / "timing.txt",
    }
    paths["table"].write_text(report_table(report))
    paths["kv"].write_text(report_kv(report))
    paths["json"].write_text(json.dumps(report.to_dict(include_timing=False), indent=1, sort_keys=True) + "\n")
    plot_losses(report, paths["plot"])
    paths["timing"].write_text(f"wall_clock_s={report.wall_clock!r}\n")
    return paths


def load_report(path) -> RunReport:
    """A report from ``report.json`` or from a directory containing one."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return RunReport.from_dict(json.loads(path.read_text()))


# ---------------------------------------------------------------------------
# ablations


def ablation_table(rows) -> str:
    width = max([len(label) for label, _ in rows] + [10])
    lines = [f"{'setting':<{width}}    hIoU  mIoU^B  mIoU^N"]
    for label, r in rows:
        m = r.metrics
        lines.append(f"{label:<{width}}  {_pct(m.get('hiou'))}  {_pct(m.get('miou_base'))}  {_pct(m.get('miou_novel'))}")
    return "\n".join(lines) + "\n"


def ablation_kv(rows) -> str:
    lines = []
    for i, (label, r) in enumerate(rows):
        lines.append(f"row.{i}.label={label}")
        lines += [f"row.{i}.{k}={_fmt(r.metrics.get(k))}" for k in METRIC_KEYS]
    return "\n".join(lines) + ("\n" if lines else "")


def plot_ablation(rows, path, title="") -> None:
    fig, ax = plt.subplots(figsize=(7, 0.45 * max(len(rows), 1) + 1.5))
    labels = [label for label, _ in rows]
    ypos = range(len(rows))
    bar = 0.27
    for j, (k, name) in enumerate(zip(METRIC_KEYS[::-1], ("hIoU", "mIoU^N", "mIoU^B"))):
        vals = [100 * (r.metrics.get(k) or 0.0) for _, r in rows]
        ax.barh([y + (j - 1) * bar for y in ypos], vals, height=bar, label=name)
    ax.set_yticks(list(ypos), labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlim(0, 100)
    ax.set_xlabel("score (%)")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False, fontsize=8, loc="lower right")
    ax.spines[["top", "right"]].set_visible(False)
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def emit_ablation(rows, out, title="") -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"table": out / "ablation.txt", "kv": out / "ablation.kv", "plot": out / "ablation.png"}
    paths["table"].write_text(ablation_table(rows))
    paths["kv"].write_text(ablation_kv(rows))
    plot_ablation(rows, paths["plot"], title)
    for i, (_, r) in enumerate(rows):
        emit_report(r, out / f"row{i:02d}")
    return paths
