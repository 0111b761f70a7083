"""Seen/unseen localization error, false-positive rate, and report emission.

Seen-zone MAE is computed on the reserved damaged validation samples,
unseen-zone MAE on the spatially held-out damaged test samples, and the FPR
on pristine test samples. A prediction counts as "damaged" exactly when it
falls inside the closed unit square (optionally widened by a margin); the
no-damage training target sits just outside, so pristine predictions that
track it are classified undamaged.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .errors import MetricError, ReportError
from .geometry import P_UNDAMAGED
from .training import PreparedDataset, make_predictor

MARKER_CLASSES = (
    "true damage",
    "predicted (damaged)",
    "predicted (undamaged)",
    "no-damage target",
    "transducers",
)


def mae(predictions, truths, side_length_mm: float) -> tuple[float, float]:
    """Mean Euclidean localization error, normalized and in millimeters."""
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.size == 0 or predictions.shape != truths.shape:
        raise MetricError(
            f"need equal-length nonempty prediction/truth lists, got {predictions.shape} "
            f"vs {truths.shape}"
        )
    norm = float(np.mean(np.linalg.norm(predictions - truths, axis=-1)))
    return norm, norm * side_length_mm


def classify_no_damage(prediction, margin: float = 0.0) -> bool:
    """True when the prediction lies outside the (closed) admissible domain."""
    p = np.asarray(prediction, dtype=float).reshape(2)
    inside = bool(np.all(p >= -margin) and np.all(p <= 1.0 + margin))
    return not inside


def fpr(pristine_predictions, margin: float = 0.0) -> tuple[float, str]:
    """Fraction of pristine predictions mapped inside the plate, with counts."""
    preds = np.asarray(pristine_predictions, dtype=float).reshape(-1, 2)
    if preds.shape[0] == 0:
        raise MetricError("FPR needs at least one pristine prediction")
    false_pos = sum(0 if classify_no_damage(p, margin) else 1 for p in preds)
    return false_pos / preds.shape[0], f"{false_pos}/{preds.shape[0]}"


def evaluate_run(model, kind: str, dataset: PreparedDataset, margin: float = 0.0) -> dict:
    """Per-sample predictions plus the split metrics for one trained model."""
    predictor = make_predictor(kind, model, dataset)
    model.eval()
    records = {}
    with torch.no_grad():
        all_idx = np.arange(dataset.n_samples)
        preds = predictor(all_idx).numpy()
    for k in all_idx:
        records[dataset.sample_ids[k]] = {
            "prediction": [float(v) for v in preds[k]],
            "target": [float(v) for v in dataset.targets[k]],
            "damaged": bool(dataset.damaged[k]),
            "partition": dataset.partition[k],
            "classified_damaged": not classify_no_damage(preds[k], margin),
        }

    def collect(partition, damaged):
        idx = dataset.indices(partition, damaged_only=damaged, pristine_only=not damaged)
        return preds[idx], dataset.targets[idx].numpy()

    seen_p, seen_t = collect("val", damaged=True)
    unseen_p, unseen_t = collect("test", damaged=True)
    train_p, train_t = collect("train", damaged=True)
    pristine_test, _ = collect("test", damaged=False)

    seen_norm, seen_mm = mae(seen_p, seen_t, dataset.side_length_mm)
    unseen_norm, unseen_mm = mae(unseen_p, unseen_t, dataset.side_length_mm)
    train_norm, train_mm = mae(train_p, train_t, dataset.side_length_mm)
    rate, fraction = fpr(pristine_test, margin)

    return {
        "model": kind,
        "split": dataset.split_name,
        "seed": dataset.seed,
        "metrics": {
            "seen_mae_norm": seen_norm,
            "seen_mae_mm": seen_mm,
            "unseen_mae_norm": unseen_norm,
            "unseen_mae_mm": unseen_mm,
            "train_mae_norm": train_norm,
            "train_mae_mm": train_mm,
            "fpr": rate,
            "fpr_fraction": fraction,
        },
        "predictions": records,
    }


def _aggregate(values: list[float]) -> dict:
    agg = {"mean": float(np.mean(values)), "values": [float(v) for v in values]}
    agg["std"] = float(np.std(values, ddof=1)) if len(values) > 1 else None
    return agg


def emit_report(run_dirs: list[str | Path], out_dir: str | Path) -> Path:
    """Aggregate evaluated runs into report.json, report.md, and map plots.

    Every run directory must contain ``manifest.json`` and ``eval.json``;
    aggregation is a pure function of those artifacts (no timestamps), so
    re-running reproduces identical report files.
    """
    out_dir = Path(out_dir)
    runs = []
    missing = []
    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        eval_path = run_dir / "eval.json"
        manifest_path = run_dir / "manifest.json"
        if not eval_path.exists() or not manifest_path.exists():
            missing.append(str(run_dir))
            continue
        with open(eval_path) as fh:
            evaluation = json.load(fh)
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        runs.append((run_dir, manifest, evaluation))
    if missing:
        raise ReportError(f"run artifacts missing for: {', '.join(sorted(missing))}")
    if not runs:
        raise ReportError("no completed runs to report")

    grouped: dict[tuple[str, str], list] = {}
    for run_dir, manifest, evaluation in runs:
        grouped.setdefault((evaluation["split"], evaluation["model"]), []).append(
            (run_dir, manifest, evaluation)
        )

    report: dict = {"splits": {}, "runs": []}
    for (split, model_kind), entries in sorted(grouped.items()):
        entries = sorted(entries, key=lambda e: e[2]["seed"])
        metrics = [e[2]["metrics"] for e in entries]
        false_pos = sum(int(m["fpr_fraction"].split("/")[0]) for m in metrics)
        total = sum(int(m["fpr_fraction"].split("/")[1]) for m in metrics)
        block = {
            "seeds": [e[2]["seed"] for e in entries],
            "seen_mae_norm": _aggregate([m["seen_mae_norm"] for m in metrics]),
            "seen_mae_mm": _aggregate([m["seen_mae_mm"] for m in metrics]),
            "unseen_mae_norm": _aggregate([m["unseen_mae_norm"] for m in metrics]),
            "unseen_mae_mm": _aggregate([m["unseen_mae_mm"] for m in metrics]),
            "train_mae_norm": _aggregate([m["train_mae_norm"] for m in metrics]),
            "fpr": {
                "rate": false_pos / total,
                "count": false_pos,
                "total": total,
                "fraction": f"{false_pos}/{total}",
            },
            "single_seed": len(entries) == 1,
        }
        report["splits"].setdefault(split, {})[model_kind] = block
    # run identity by directory name, so reports from equivalent runs in
    # different working directories compare byte-identical
    for run_dir, manifest, evaluation in sorted(runs, key=lambda e: e[0].name):
        report["runs"].append(
            {
                "run": run_dir.name,
                "split": evaluation["split"],
                "model": evaluation["model"],
                "seed": evaluation["seed"],
                "checkpoint_checksum": manifest.get("checkpoint_checksum"),
            }
        )

    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    with open(report_path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_markdown(report, out_dir / "report.md")

    maps_dir = out_dir / "maps"
    maps_dir.mkdir(exist_ok=True)
    for run_dir, manifest, evaluation in runs:
        name = f"{evaluation['split']}_{evaluation['model']}_{evaluation['seed']}.png"
        plot_localization_map(evaluation, run_dir, maps_dir / name)
    return report_path


def _fmt(agg: dict) -> str:
    if agg["std"] is None:
        return f"{agg['mean']:.3f} (single seed)"
    return f"{agg['mean']:.3f} +/- {agg['std']:.3f}"


def _write_markdown(report: dict, path: Path) -> None:
    lines = ["# Localization report", ""]
    for split in sorted(report["splits"]):
        lines += [f"## Split {split}", ""]
        lines.append("| Model | Seen MAE | Unseen MAE | FPR |")
        lines.append("|---|---|---|---|")
        for model_kind in sorted(report["splits"][split]):
            block = report["splits"][split][model_kind]
            fpr_s = f"{100 * block['fpr']['rate']:.1f}% ({block['fpr']['fraction']})"
            lines.append(
                f"| {model_kind} | {_fmt(block['seen_mae_norm'])} | "
                f"{_fmt(block['unseen_mae_norm'])} | {fpr_s} |"
            )
        lines.append("")
    lines.append("MAE values are normalized by the plate side length; multiply by the side")
    lines.append("length in millimeters for physical errors. Single-seed rows omit the std.")
    path.write_text("\n".join(lines) + "\n")


def plot_localization_map(evaluation: dict, run_dir: Path, out_path: Path) -> list[str]:
    """Scatter plot of one run's test-time behavior; returns the legend labels."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    transducers = _load_transducers(run_dir)
    fig, ax = plt.subplots(figsize=(6, 6))
    records = evaluation["predictions"].values()
    truths = np.array(
        [r["target"] for r in records if r["damaged"] and r["partition"] != "train"]
    )
    pred_dmg = np.array(
        [
            r["prediction"]
            for r in records
            if r["partition"] != "train" and r["classified_damaged"]
        ]
    )
    pred_ud = np.array(
        [
            r["prediction"]
            for r in records
            if r["partition"] != "train" and not r["classified_damaged"]
        ]
    )
    if truths.size:
        ax.scatter(truths[:, 0], truths[:, 1], marker="o", facecolors="none",
                   edgecolors="tab:blue", s=70, label=MARKER_CLASSES[0])
    else:  # keep the legend contract even for degenerate runs
        ax.scatter([], [], marker="o", facecolors="none", edgecolors="tab:blue",
                   label=MARKER_CLASSES[0])
    ax.scatter(*(pred_dmg.T if pred_dmg.size else ([], [])), marker="x", color="tab:red",
               s=50, label=MARKER_CLASSES[1])
    ax.scatter(*(pred_ud.T if pred_ud.size else ([], [])), marker="s", color="tab:green",
               s=40, label=MARKER_CLASSES[2])
    ax.scatter([P_UNDAMAGED[0]], [P_UNDAMAGED[1]], marker="D", color="gray", s=60,
               label=MARKER_CLASSES[3])
    if transducers is not None:
        ax.scatter(transducers[:, 0], transducers[:, 1], marker="^", color="black", s=50,
                   label=MARKER_CLASSES[4])
    else:
        ax.scatter([], [], marker="^", color="black", label=MARKER_CLASSES[4])
    ax.add_patch(plt.Rectangle((0, 0), 1, 1, fill=False, linestyle="--", color="0.6"))
    ax.set_xlim(-0.1, 1.1)
    ax.set_ylim(-0.1, 1.1)
    ax.set_aspect("equal")
    ax.set_title(f"{evaluation['model']} / split {evaluation['split']} / seed {evaluation['seed']}")
    legend = ax.legend(loc="upper left", bbox_to_anchor=(1.02, 1.0), fontsize=8)
    labels = [t.get_text() for t in legend.get_texts()]
    fig.savefig(out_path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return labels


def _load_transducers(run_dir: Path) -> np.ndarray | None:
    manifest_path = Path(run_dir) / "manifest.json"
    if manifest_path.exists():
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        coords = manifest.get("transducers")
        if coords is not None:
            return np.asarray(coords, dtype=float)
    return None
