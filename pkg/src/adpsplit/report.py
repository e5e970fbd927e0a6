"""Report emission: metric CSVs, table-shaped summaries and plots."""
from __future__ import annotations

import csv
import json
import shutil
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from . import metrics as MT  # noqa: E402

METRICS_COLUMNS = (
    "experiment_id",
    "split",
    "strategy",
    "method",
    "arch",
    "S_alpha",
    "S_beta",
    "Ao_alpha",
    "Ao_beta",
    "Ai_alpha",
    "Ai_beta",
    "msssim_before",
    "msssim_after",
    "verdict",
    "protection",
    "note",
)
INFERENCE_COLUMNS = ("protection", "strategy", "method", "split", "arch", "S_alpha", "S_beta", "Ao_alpha", "Ao_beta", "Ai_alpha", "Ai_beta", "verdict")
RECONSTRUCTION_COLUMNS = ("protection", "strategy", "method", "split", "msssim_before", "msssim_after")
# shallow-split bar for the PCA comparison: server within 10 points, adversary at most 60%
DIVERGENCE_EPS_S = 0.10
DIVERGENCE_A_MAX = 0.60
# choices the numbers depend on but that a reader of the tables would not see
CONVENTIONS = {
    "pca_mean_centering": True,
    "pca_fit_data": "unprotected primary-task training feature maps",
    "ae_loss": "mse(apply(F_o), F_p)",
    "msssim_scales": "reduced to what the image size supports, weights renormalised",
}


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_rows(rows, path, columns) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _order(row):
    return (row.get("protection") or "", row.get("strategy") or "", row.get("method") or "", row.get("split") or "", row.get("arch") or "")


def reference_rows(table: str | None = None) -> list[dict]:
    """Full-scale reference numbers shipped with the package, optionally one table."""
    text = resources.files("adpsplit").joinpath("data_files/full_scale_reference.csv").read_text()
    rows = list(csv.DictReader(text.splitlines()))
    return [r for r in rows if table is None or r["table"] == table]


def pca_passing_ks(sweep: list[dict], s_alpha: float, eps_s: float = DIVERGENCE_EPS_S, a_max: float = DIVERGENCE_A_MAX) -> list[int]:
    """Component counts at which PCA keeps the server within ``eps_s`` and pushes A^i to ``a_max`` or below."""
    out = []
    for r in sweep:
        s, a = float(r["S"]), float(r["Ai"])
        if s >= s_alpha - eps_s - 1e-9 and a <= a_max + 1e-9:
            out.append(int(r["k"]))
    return out


def divergence_summary(rows: list[dict]) -> dict:
    """Per split: does any PCA k pass the bar ADP is held to? ``divergent`` flags it."""
    out = {}
    for r in rows:
        if r.get("protection") != "pca" or not r.get("_inference_dir"):
            continue
        sweep_path = Path(r["_inference_dir"]) / "pca_sweep.csv"
        if not sweep_path.exists():
            continue
        ks = pca_passing_ks(read_rows(sweep_path), float(r["S_alpha"]))
        adp = [x for x in rows if x.get("split") == r["split"] and str(x.get("protection", "")).startswith("adp_ae")]
        out[r["split"]] = {
            "pca_passing_ks": ks,
            "divergent": bool(ks),
            "adp_verdicts": {x["experiment_id"]: x.get("verdict") for x in adp},
        }
    return out


def plot_epoch_curve(curve: list[dict], path, title: str = "") -> None:
    epochs = [int(r["epoch"]) for r in curve]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(epochs, [float(r["S"]) for r in curve], marker="o", ms=3, label="server S")
    ax.plot(epochs, [float(r["Ai"]) for r in curve], marker="s", ms=3, label="adversary A^i")
    ax.set_xlabel("AE epoch")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_pca_sweep(sweep: list[dict], path, title: str = "") -> None:
    ks = [int(r["k"]) for r in sweep]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(ks, [float(r["S"]) for r in sweep], marker="o", ms=3, label="server S")
    ax.plot(ks, [float(r["Ai"]) for r in sweep], marker="s", ms=3, label="adversary A^i")
    ax.set_xscale("log")
    ax.set_xlabel("principal components")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.05)
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_adp_vs_pca(rows: list[dict], path) -> bool:
    """Grouped bars of S_beta and Ai_beta per split for each protection; False if nothing to plot."""
    rows = [r for r in rows if r.get("verdict") != "skipped" and r.get("S_beta") not in (None, "")]
    if not rows:
        return False
    splits = sorted({r["split"] for r in rows})
    kinds = sorted({r["protection"] for r in rows})
    width = 0.8 / (2 * len(kinds))
    fig, ax = plt.subplots(figsize=(1.8 + 1.6 * len(splits), 3.4))
    for i, kind in enumerate(kinds):
        for j, (col, label) in enumerate((("S_beta", "S"), ("Ai_beta", "A^i"))):
            xs, ys = [], []
            for s_i, sp in enumerate(splits):
                hit = [r for r in rows if r["split"] == sp and r["protection"] == kind]
                if hit:
                    xs.append(s_i + (2 * i + j) * width - 0.4 + width / 2)
                    ys.append(float(hit[0][col]))
            ax.bar(xs, ys, width, label=f"{kind} {label}")
    ax.set_xticks(range(len(splits)))
    ax.set_xticklabels(splits)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("accuracy after protection")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def emit_report(rows: list[dict], out, thresholds: MT.Thresholds = MT.Thresholds()) -> dict:
    """Write metric/table CSVs, plots and triptychs for ``rows`` into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sorted(rows, key=_order)
    written = {}
    write_rows(rows, out / "metrics.csv", METRICS_COLUMNS)
    write_rows([r for r in rows if r.get("verdict") != "skipped"], out / "table_inference.csv", INFERENCE_COLUMNS)
    write_rows([r for r in rows if r.get("msssim_before") not in (None, "")], out / "table_reconstruction.csv", RECONSTRUCTION_COLUMNS)
    ref = reference_rows()
    with open(out / "reference_full_scale.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(ref[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(ref)
    written["metrics"] = out / "metrics.csv"

    plots = out / "plots"
    plots.mkdir(exist_ok=True)
    for r in rows:
        inf = r.get("_inference_dir")
        if inf:
            curve = Path(inf) / "epoch_curve.csv"
            sweep = Path(inf) / "pca_sweep.csv"
            if curve.exists():
                plot_epoch_curve(read_rows(curve), plots / f"epochs_{r['experiment_id']}.png", r["experiment_id"])
            if sweep.exists():
                plot_pca_sweep(read_rows(sweep), plots / f"pca_sweep_{r['experiment_id']}.png", r["experiment_id"])
        rec = r.get("_reconstruction_dir")
        if rec:
            for trip in sorted(Path(rec).glob("triptych_*.png")):
                shutil.copyfile(trip, plots / f"{r['experiment_id']}_{trip.name}")
    plot_adp_vs_pca(rows, plots / "adp_vs_pca.png")
    div = divergence_summary(rows)
    (out / "pca_divergence.json").write_text(json.dumps(div, indent=2, sort_keys=True))
    (out / "thresholds.json").write_text(json.dumps(asdict(thresholds), sort_keys=True))
    (out / "conventions.json").write_text(json.dumps(CONVENTIONS, indent=2, sort_keys=True))
    written["divergence"] = out / "pca_divergence.json"
    return written
