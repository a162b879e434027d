"""Whole-scan inference, per-class centroid aggregation and evaluation metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .data import CLASS_INDEX, CLASS_NAMES, FormatError, Volume
from .nn import model_forward, predict_coordinates

ID_THRESHOLD_MM = 20.0
REJECT_RADIUS_MM = 40.0
REGIONS = {"Cer": range(0, 7), "Tho": range(7, 19), "Lum": range(19, 24), "Sac": range(24, 26)}


def region_of(cls):
    for name, r in REGIONS.items():
        if cls in r:
            return name
    raise ValueError(f"class index {cls} outside 0..25")


@dataclass
class Vote:
    cls: int
    prob: float
    world_mm: np.ndarray
    local_xyz: np.ndarray
    crop_origin: tuple  # crop corner in array order (may be negative when padded)


@dataclass
class ClassPrediction:
    present: bool
    centroid_mm: np.ndarray | None = None
    confidence: float = 0.0


@dataclass
class ScanPrediction:
    classes: dict = field(default_factory=dict)  # class index -> ClassPrediction
    votes: list = field(default_factory=list)

    def present(self):
        return {c: p.centroid_mm for c, p in self.classes.items() if p.present}


# -- sliding window inference -------------------------------------------------------

def window_origins(extent, crop, stride):
    """Window start indices along one axis; the last one is clamped to the edge."""
    if extent <= crop:
        return [-((crop - extent) // 2)]
    starts = list(range(0, extent - crop + 1, stride))
    if starts[-1] != extent - crop:
        starts.append(extent - crop)
    return starts


def padded_window(vol, corner, crop_shape):
    """Crop at ``corner`` (array order, may be negative), padded with the air floor."""
    out = np.full(crop_shape, vol.floor_value, dtype=vol.data.dtype)
    src, dst = [], []
    for c, n, k in zip(corner, vol.data.shape, crop_shape):
        lo, hi = max(c, 0), min(c + k, n)
        src.append(slice(lo, hi))
        dst.append(slice(lo - c, hi - c))
    out[tuple(dst)] = vol.data[tuple(src)]
    return out


def sliding_infer(vol: Volume, model, crop_shape=None, stride=None, threshold=0.5):
    """Votes ``(class, prob, world coordinate)`` from every window whose class
    probability exceeds ``threshold``."""
    crop_shape = tuple(model.config.crop_shape if crop_shape is None else crop_shape)
    stride = tuple(max(1, c // 2) for c in crop_shape) if stride is None else tuple(stride)
    axes = [window_origins(n, c, s) for n, c, s in zip(vol.data.shape, crop_shape, stride)]
    votes = []
    mode = model.config.mode
    with ag.no_grad():
        for z in axes[0]:
            for y in axes[1]:
                for x in axes[2]:
                    corner = (z, y, x)
                    window = padded_window(vol, corner, crop_shape)
                    logits, loc = model_forward(model.as_input(window), model)
                    probs = ag.sigmoid(logits).data
                    coords = predict_coordinates(loc, mode)
                    for cls in np.flatnonzero(probs > threshold):
                        local = np.asarray(coords[cls], dtype=np.float64)
                        world = vol.index_to_world(local + np.asarray(corner[::-1], dtype=np.float64))
                        votes.append(Vote(int(cls), float(probs[cls]), world, local, corner))
    return votes


def aggregate_kmeans(votes, reject_radius=REJECT_RADIUS_MM):
    """Single-cluster K-means over one class's votes: confidence-weighted mean
    after dropping votes farther than ``reject_radius`` from the median."""
    if not votes:
        raise ValueError("no votes to aggregate")
    pts = np.array([v.world_mm for v in votes], dtype=np.float64)
    w = np.array([v.prob for v in votes], dtype=np.float64)
    med = np.median(pts, axis=0)
    keep = np.linalg.norm(pts - med, axis=1) <= reject_radius
    if not keep.any():
        # highest confidence; ties broken by coordinate so vote order never matters
        best = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], -w))[0]
        return pts[best], float(w[best])
    pts, w = pts[keep], w[keep]
    return (w[:, None] * pts).sum(axis=0) / w.sum(), float(w.mean())


def aggregate_scan(votes, num_classes=26, reject_radius=REJECT_RADIUS_MM):
    by_class = {}
    for v in votes:
        by_class.setdefault(v.cls, []).append(v)
    pred = ScanPrediction(votes=list(votes))
    for cls in range(num_classes):
        if cls in by_class:
            c, conf = aggregate_kmeans(by_class[cls], reject_radius)
            pred.classes[cls] = ClassPrediction(True, c, conf)
        else:
            pred.classes[cls] = ClassPrediction(False)
    return pred


def predict_scan(vol, model, stride=None, threshold=0.5):
    votes = sliding_infer(vol, model, stride=stride, threshold=threshold)
    return aggregate_scan(votes, model.config.num_classes)


# -- metrics ------------------------------------------------------------------------

@dataclass
class RegionStats:
    id_rate: float
    mean_mm: float
    std_mm: float
    n_truth: int
    n_errors: int


@dataclass
class MetricsReport:
    scopes: dict  # "ALL", "Cer", "Tho", "Lum", "Sac" -> RegionStats
    errors_mm: list
    map_score: float | None = None

    @property
    def id_rate(self):
        return self.scopes["ALL"].id_rate

    @property
    def mean_error(self):
        return self.scopes["ALL"].mean_mm

    @property
    def std_error(self):
        return self.scopes["ALL"].std_mm


def identification_metrics(preds, truths) -> MetricsReport:
    """Identification rate (nearest estimate has the right class and lies
    within 20 mm) and same-class localization error, overall and per region.

    ``preds`` are :class:`ScanPrediction` objects or ``{class: xyz_mm}`` dicts;
    ``truths`` are :class:`LabelSet` objects or dicts.
    """
    if len(preds) != len(truths):
        raise ValueError("prediction and truth lists differ in length")
    hits = {k: [] for k in ("ALL", *REGIONS)}
    errs = {k: [] for k in ("ALL", *REGIONS)}
    for pred, truth in zip(preds, truths):
        p = pred.present() if isinstance(pred, ScanPrediction) else dict(pred)
        t = truth.as_dict() if hasattr(truth, "as_dict") else dict(truth)
        p_cls = list(p)
        p_pts = np.array([p[c] for c in p_cls], dtype=np.float64).reshape(-1, 3)
        for cls, gt in t.items():
            gt = np.asarray(gt, dtype=np.float64)
            ok = False
            if len(p_cls):
                d = np.linalg.norm(p_pts - gt, axis=1)
                j = int(np.argmin(d))
                ok = p_cls[j] == cls and d[j] < ID_THRESHOLD_MM
            reg = region_of(cls)
            hits["ALL"].append(ok)
            hits[reg].append(ok)
            if cls in p:
                e = float(np.linalg.norm(np.asarray(p[cls], dtype=np.float64) - gt))
                errs["ALL"].append(e)
                errs[reg].append(e)
    scopes = {}
    for k in hits:
        h, e = hits[k], errs[k]
        scopes[k] = RegionStats(
            100.0 * sum(h) / len(h) if h else math.nan,  # one rounding from integer counts
            float(np.mean(e)) if e else math.nan,
            float(np.std(e)) if e else math.nan,
            len(h), len(e))
    if not hits["ALL"]:
        scopes["ALL"].id_rate = 0.0
    return MetricsReport(scopes, errs["ALL"])


def average_precision(labels, scores):
    """Area under the step-wise precision-recall curve, one step per distinct
    score threshold (tied scores enter together)."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, l = scores[order], labels[order]
    tp = np.cumsum(l)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]  # end of each tie group
    tp = tp[last]
    precision = tp / (last + 1)
    recall = tp / n_pos
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def mean_average_precision(probs, truths):
    """Unweighted mean AP over classes with at least one positive.

    ``probs`` and ``truths`` are ``[num_crops, num_classes]``.  Returns
    ``(mAP, {class: AP}, skipped_classes)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    truths = np.asarray(truths)
    per_class, skipped = {}, []
    for c in range(probs.shape[1]):
        if truths[:, c].sum() == 0:
            skipped.append(c)
            continue
        per_class[c] = average_precision(truths[:, c], probs[:, c])
    score = float(np.mean(list(per_class.values()))) if per_class else math.nan
    return score, per_class, skipped


def crop_probabilities(model, samples):
    """Sigmoid probabilities ``[M, N]`` and presence flags ``[M, N]`` over crops."""
    probs, truths = [], []
    with ag.no_grad():
        for crop, target in samples:
            logits, _ = model_forward(model.as_input(crop), model)
            probs.append(ag.sigmoid(logits).data.astype(np.float64))
            truths.append(target.u)
    return np.array(probs), np.array(truths)


def crop_localization_errors(model, samples, spacing_mm=2.0):
    """Distances (mm) between predicted and true crop-local centroids of present classes."""
    errs = []
    with ag.no_grad():
        for crop, target in samples:
            _, loc = model_forward(model.as_input(crop), model)
            coords = predict_coordinates(loc, model.config.mode)
            for n in np.flatnonzero(target.u):
                errs.append(float(np.linalg.norm(coords[n] - target.v[n])) * spacing_mm)
    return np.array(errs)


# -- file formats ---------------------------------------------------------------

def write_predictions(path, pred: ScanPrediction):
    with open(path, "w") as f:
        for cls, name in enumerate(CLASS_NAMES):
            p = pred.classes.get(cls, ClassPrediction(False))
            if p.present:
                x, y, z = (repr(float(v)) for v in p.centroid_mm)
                f.write(f"{name} 1 {x} {y} {z} {float(p.confidence)!r}\n")
            else:
                f.write(f"{name} 0 nan nan nan 0.0\n")


def read_predictions(path) -> ScanPrediction:
    pred = ScanPrediction()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6 or parts[0] not in CLASS_INDEX or parts[1] not in ("0", "1"):
                raise FormatError(f"{path}:{lineno}: expected '<class> <0|1> <x> <y> <z> <conf>'")
            try:
                nums = [float(v) for v in parts[2:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: bad number") from None
            cls = CLASS_INDEX[parts[0]]
            if parts[1] == "1":
                pred.classes[cls] = ClassPrediction(True, np.array(nums[:3]), nums[3])
            else:
                pred.classes[cls] = ClassPrediction(False, None, nums[3])
    return pred


METRIC_SCOPES = ("ALL", "Cer", "Tho", "Lum", "Sac")


def write_metrics_csv(path, report: MetricsReport):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scope", "id_rate", "mean_mm", "std_mm"])
        for k in METRIC_SCOPES:
            s = report.scopes[k]
            w.writerow([k, _fmt(s.id_rate), _fmt(s.mean_mm), _fmt(s.std_mm)])


def _fmt(v, digits=None):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.{digits}f}" if digits is not None else repr(float(v))


def format_metrics_table(report: MetricsReport):
    """Text table: one column per scope, rows Id rate / Mean / Std."""
    head = f"{'':<14}" + "".join(f"{k:>9}" for k in METRIC_SCOPES)
    rows = [head]
    for label, attr in (("Id rate (%)", "id_rate"), ("Mean (mm)", "mean_mm"), ("Std (mm)", "std_mm")):
        vals = [getattr(report.scopes[k], attr) for k in METRIC_SCOPES]
        rows.append(f"{label:<14}" + "".join(f"{(_fmt(v, 1) or '-'):>9}" for v in vals))
    if report.map_score is not None:
        rows.append(f"{'mAP (%)':<14}{100 * report.map_score:>9.1f}")
    return "\n".join(rows)


def format_ablation_table(rows):
    """``rows``: list of ``(mode, mean_mm, std_mm)``."""
    lines = [f"{'Method':<16}{'Mean (mm)':>11}{'Std (mm)':>10}"]
    for mode, mean, std in rows:
        lines.append(f"{mode:<16}{mean:>11.2f}{std:>10.2f}")
    return "\n".join(lines)
