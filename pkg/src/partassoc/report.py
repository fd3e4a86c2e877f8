"""Tabular summaries and curve figures for evaluation reports."""
from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# PNG metadata carries the matplotlib version by default; dropping it keeps files byte-stable.
_PNG_META = {"Software": None}


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def summary_rows(report: dict) -> list[tuple[str, str, str]]:
    """``(group, metric, value)`` rows for every scalar headline metric."""
    rows = [("images", "count", _fmt(report.get("n_images")))]
    body = report.get("body", {})
    for key in ("ap", "mr2", "n_gt", "n_det"):
        rows.append(("body", key, _fmt(body.get(key))))
    for label, entry in report.get("parts", {}).items():
        for key in ("ap", "mr2", "precision", "n_gt", "n_det"):
            rows.append((f"part:{label}", key, _fmt(entry.get(key))))
    pairs = report.get("pairs", {})
    for key in ("mmr2", "joint_ap", "cond_accuracy"):
        rows.append(("pairs", key, _fmt(pairs.get(key))))
    for key in ("mmr2_per_slot", "joint_ap_per_slot", "cond_accuracy_per_slot"):
        for label, v in pairs.get(key, {}).items():
            rows.append((f"pairs:{label}", key.replace("_per_slot", ""), _fmt(v)))
    contact = report.get("contact")
    if contact:
        for state, v in contact.get("per_state", {}).items():
            rows.append(("contact", f"ap_{state}", _fmt(v)))
        rows.append(("contact", "mAP", _fmt(contact.get("mAP"))))
    return rows


def to_tsv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, delimiter="\t", lineterminator="\n")
    writer.writerow(("group", "metric", "value"))
    writer.writerows(rows)
    return buf.getvalue()


def _legend(ax):
    if ax.get_legend_handles_labels()[0]:
        ax.legend(fontsize=7)


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_figures(report: dict, out_dir: str | Path) -> list[Path]:
    """Precision-recall, miss-rate and miss-matching-rate curves as PNG files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = report.get("curves", {})
    written = []
    names = [n for n in curves if n != "pairs"]

    fig, ax = plt.subplots(figsize=(5, 4))
    for name in names:
        pts = curves[name].get("pr", [])
        if pts:
            r, p = zip(*pts)
            ax.step(r, p, where="post", label=name)
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1.02), ylim=(0, 1.02), title="Precision-recall")
    _legend(ax)
    written.append(_save(fig, out / "pr.png"))

    fig, ax = plt.subplots(figsize=(5, 4))
    for name in names:
        pts = [(f, m) for f, m in curves[name].get("fppi_mr", []) if f > 0]
        if pts:
            f, m = zip(*pts)
            ax.step(f, m, where="post", label=name)
    pair_pts = [(f, m) for f, m in curves.get("pairs", {}).get("fppi_mmr", []) if f > 0]
    if pair_pts:
        f, m = zip(*pair_pts)
        ax.step(f, m, where="post", linestyle="--", label="pairs (mismatch)")
    ax.set(xscale="log", xlabel="false positives per image", ylabel="miss rate", ylim=(0, 1.02),
           title="Miss rate vs FPPI")
    ax.axvspan(1e-2, 1.0, color="0.9", zorder=0)
    _legend(ax)
    written.append(_save(fig, out / "fppi.png"))
    return written
