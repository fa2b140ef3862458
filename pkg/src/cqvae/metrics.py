"""Shape-variation, bias and correlation metrics, plus the evaluation loop."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .matching import sample_gt_shapes
from .quantize import entropy

log = logging.getLogger(__name__)


@dataclass
class VariationReport:
    mean_shape: np.ndarray
    per_point_variation: np.ndarray
    scalar_variation: float


@dataclass
class EvalRecord:
    record_id: str
    var_gt: float
    var_model: float
    entropy: float
    bias_best: float


class DegenerateSeriesError(ValueError):
    pass


def shape_variation(samples):
    """Average distance of each point from the sample mean.

    samples: (K, J, 2).  The scalar is the mean of the per-point values, i.e.
    a double average over samples and points.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 3 or samples.shape[0] == 0:
        raise ValueError("shape_variation needs a nonempty (K, J, 2) sample set")
    # centering on one sample first keeps identical sets at exactly zero
    mean_shape = samples[0] + (samples - samples[0]).mean(axis=0)
    dev = np.linalg.norm(samples - mean_shape, axis=2)  # (K, J)
    per_point = dev.mean(axis=0)
    return VariationReport(mean_shape, per_point, float(per_point.mean()))


def bias(s, s_star):
    """Mean pointwise Euclidean distance between a shape and the consensus."""
    s = np.asarray(s, dtype=np.float64)
    s_star = np.asarray(s_star, dtype=np.float64)
    if s.shape != s_star.shape:
        raise ValueError(f"bias: point counts differ, {s.shape} vs {s_star.shape}")
    return float(np.linalg.norm(s - s_star, axis=-1).mean())


def correlation(xs, ys, names=("xs", "ys")):
    """Pearson correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("correlation needs two 1-D series of equal length")
    if x.size < 2:
        raise ValueError("correlation needs at least two points")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    for name, s, v in ((names[0], sx, x), (names[1], sy, y)):
        if s <= 1e-12 * max(1.0, float(np.abs(v).max())):
            raise DegenerateSeriesError(f"series {name!r} has zero variance")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


SUMMARY_PAIRS = (
    ("var_model", "var_gt"),
    ("entropy", "var_gt"),
    ("bias_best", "var_model"),
    ("bias_best", "entropy"),
)


def summarize(records):
    summary = {"n_images": len(records), "correlations": {}, "degenerate": []}
    for a, b in SUMMARY_PAIRS:
        key = f"corr({a},{b})"
        try:
            xs = [getattr(r, a) for r in records]
            ys = [getattr(r, b) for r in records]
            summary["correlations"][key] = correlation(xs, ys, names=(a, b))
        except ValueError as exc:
            summary["correlations"][key] = None
            summary["degenerate"].append(f"{key}: {exc}")
    for field in ("var_gt", "var_model", "entropy", "bias_best"):
        vals = np.array([getattr(r, field) for r in records], dtype=np.float64)
        summary[f"mean_{field}"] = float(vals.mean()) if vals.size else None
    return summary


def record_stream(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def evaluate(model, records, l_max=100, k_max=100, seed=0, heatmap_ids=()):
    """Per-image uncertainty and accuracy, and the summary correlations.

    ``records`` need ``record_id``, ``image``, ``experts`` and ``consensus``.
    Returns (eval_records, summary, heatmaps, failures); heatmaps maps a
    record id to its ground-truth and model VariationReports.
    """
    out, heatmaps, failures = [], {}, []
    wanted = set(heatmap_ids)
    for i, rec in enumerate(records):
        try:
            rng = record_stream(seed, i)
            pi = model.probabilities(rec.image)
            samples = model.sample_shapes(rec.image, l_max, rng)
            gt = sample_gt_shapes(rec.experts, k_max, rng)
            model_var = shape_variation(samples)
            gt_var = shape_variation(gt)
            best = model.best_shape(rec.image)
            er = EvalRecord(
                record_id=rec.record_id,
                var_gt=gt_var.scalar_variation,
                var_model=model_var.scalar_variation,
                entropy=entropy(pi),
                bias_best=bias(best, rec.consensus),
            )
            if not all(np.isfinite([er.var_gt, er.var_model, er.entropy, er.bias_best])):
                raise FloatingPointError("non-finite metric")
        except (ValueError, FloatingPointError) as exc:
            log.warning("evaluation failed on %s: %s", rec.record_id, exc)
            failures.append((rec.record_id, str(exc)))
            continue
        out.append(er)
        if rec.record_id in wanted:
            heatmaps[rec.record_id] = {"gt": gt_var, "model": model_var}
    return out, summarize(out), heatmaps, failures


def _fmt(x):
    return repr(float(x))


def write_eval_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["record_id", "var_gt", "var_model", "entropy", "bias_best"])
        for r in records:
            w.writerow([r.record_id, _fmt(r.var_gt), _fmt(r.var_model), _fmt(r.entropy), _fmt(r.bias_best)])


def read_eval_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [EvalRecord(r["record_id"], float(r["var_gt"]), float(r["var_model"]), float(r["entropy"]),
                       float(r["bias_best"])) for r in rows]


def write_summary_json(path, summary, failures=()):
    payload = dict(summary)
    payload["failures"] = [{"record_id": rid, "error": msg} for rid, msg in failures]
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_heatmap_csv(path, report):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "variation"])
        for (x, y), v in zip(report.mean_shape, report.per_point_variation):
            w.writerow([_fmt(x), _fmt(y), _fmt(v)])


def render_heatmap(path, image, report, title=None, vmax=None):
    """Mean shape over the image, each point colored by its variation.

    Red marks low variation and blue high variation.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    h, w = image.shape
    fig, ax = plt.subplots(figsize=(3, 3), dpi=100)
    ax.imshow(image, cmap="gray", extent=(0, 1, 1, 0), vmin=0, vmax=1)
    pts = report.mean_shape
    sc = ax.scatter(pts[:, 0], pts[:, 1], c=report.per_point_variation, cmap="jet_r", s=6,
                    vmin=0, vmax=vmax if vmax is not None else float(report.per_point_variation.max()) or 1.0)
    fig.colorbar(sc, ax=ax, fraction=0.046)
    ax.set_xlim(0, 1)
    ax.set_ylim(1, 0)
    ax.set_axis_off()
    if title:
        ax.set_title(title, fontsize=8)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def write_report(out_dir, records, summary, heatmaps=None, failures=(), images=None):
    """Evaluation CSV, correlation JSON and per-image heatmap CSV/PNG files."""
    os.makedirs(out_dir, exist_ok=True)
    write_eval_csv(os.path.join(out_dir, "eval.csv"), records)
    write_summary_json(os.path.join(out_dir, "summary.json"), summary, failures)
    if not heatmaps:
        return
    hm_dir = os.path.join(out_dir, "heatmaps")
    os.makedirs(hm_dir, exist_ok=True)
    for rid, pair in sorted(heatmaps.items()):
        vmax = max(float(pair["gt"].per_point_variation.max()), float(pair["model"].per_point_variation.max())) or 1.0
        for side in ("gt", "model"):
            stem = os.path.join(hm_dir, f"{rid}_{side}")
            write_heatmap_csv(stem + ".csv", pair[side])
            if images is not None and rid in images:
                render_heatmap(stem + ".png", images[rid], pair[side], title=f"{rid} {side}", vmax=vmax)


def as_dicts(records):
    return [asdict(r) for r in records]
