"""Confusion-matrix metrics, threshold sweeps and diagnostic renders."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# Error-map palette (RGB, uint8).
TP_COLOR = (255, 255, 255)  # true detection
FP_COLOR = (255, 0, 0)  # false alarm
FN_COLOR = (0, 0, 255)  # omission
TN_COLOR = (0, 0, 0)
INVALID_COLOR = (128, 128, 128)

# Density colormap: piecewise linear between these (position, RGB in [0, 1]) stops.
DENSITY_STOPS = (
    (0.0, (0.0, 0.0, 1.0)),  # blue
    (1 / 3, (0.0, 1.0, 1.0)),  # cyan
    (2 / 3, (1.0, 1.0, 0.0)),  # yellow
    (1.0, (1.0, 0.0, 0.0)),  # red
)

METRIC_KEYS = ("OA", "KC", "Pre", "Rec", "F1", "mIOU", "cIOU")
DEFAULT_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricsReport:
    threshold: float | None
    OA: float
    KC: float
    Pre: float
    Rec: float
    F1: float
    mIOU: float
    cIOU: float
    counts: ConfusionCounts
    degenerate: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["counts"] = asdict(self.counts)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def row(self) -> str:
        return "\t".join(f"{getattr(self, k):.4f}" for k in METRIC_KEYS)


def _binary(a, what):
    a = np.asarray(a)
    if not ((a == 0) | (a == 1)).all():
        raise ValueError(f"{what} must be binary (0/1)")
    return a.astype(bool)


def confusion(binary_map, reference, valid_mask=None) -> ConfusionCounts:
    """Pixel counts with change as the positive class; ``valid_mask`` drops unlabeled pixels."""
    pred = _binary(binary_map, "binary map")
    ref = _binary(reference, "reference")
    if pred.shape != ref.shape:
        raise ValueError(f"map {pred.shape} and reference {ref.shape} differ in shape")
    if valid_mask is not None:
        valid = _binary(valid_mask, "valid mask")
        if valid.shape != ref.shape:
            raise ValueError("valid mask shape does not match reference")
        pred, ref = pred[valid], ref[valid]
    tp = int(np.count_nonzero(pred & ref))
    fp = int(np.count_nonzero(pred & ~ref))
    fn = int(np.count_nonzero(~pred & ref))
    return ConfusionCounts(tp, fp, fn, int(pred.size) - tp - fp - fn)


def _ratio(num, den, name, flags):
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics_from_counts(counts: ConfusionCounts, threshold: float | None = None) -> MetricsReport:
    """OA, Cohen's kappa, precision, recall, F1, mean and change IoU.

    Any metric whose denominator vanishes is reported as 0 and named in
    ``degenerate``.
    """
    tp, fp, fn, tn = counts.tp, counts.fp, counts.fn, counts.tn
    n = counts.total
    if n <= 0:
        raise ValueError("cannot compute metrics over zero pixels")
    flags: list[str] = []
    # each metric is one ratio of integers, so the float result is correctly rounded
    oa = (tp + tn) / n
    chance = (tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)
    kc = _ratio(n * (tp + tn) - chance, n * n - chance, "KC", flags)
    pre = _ratio(tp, tp + fp, "Pre", flags)
    rec = _ratio(tp, tp + fn, "Rec", flags)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "F1", flags)
    ciou = _ratio(tp, tp + fp + fn, "cIOU", flags)
    c_den, u_den = tp + fp + fn, tn + fp + fn
    _ratio(tn, u_den, "uIOU", flags)
    if c_den and u_den:
        miou = (tp * u_den + tn * c_den) / (2 * c_den * u_den)
    else:
        miou = tp / (2 * c_den) if c_den else (tn / (2 * u_den) if u_den else 0.0)
    return MetricsReport(threshold, oa, kc, pre, rec, f1, miou, ciou, counts, flags)


def evaluate(prob_map, reference, threshold: float = 0.5, valid_mask=None) -> MetricsReport:
    binary = (np.asarray(prob_map) >= threshold).astype(np.uint8)
    return metrics_from_counts(confusion(binary, reference, valid_mask), threshold)


def threshold_sweep(prob_map, reference, thresholds: Sequence[float] = DEFAULT_THRESHOLDS, valid_mask=None) -> list[MetricsReport]:
    """One report per threshold, binarizing with ``prob >= t``."""
    t = np.asarray(thresholds, dtype=float)
    if t.size == 0:
        raise ValueError("threshold list is empty")
    if (t <= 0).any() or (t >= 1).any() or (np.diff(t) <= 0).any():
        raise ValueError("thresholds must be strictly increasing inside (0, 1)")
    return [evaluate(prob_map, reference, float(v), valid_mask) for v in t]


def best_threshold(reports: Sequence[MetricsReport], key: str = "F1") -> MetricsReport:
    return max(reports, key=lambda r: getattr(r, key))


# -- renders ----------------------------------------------------------------

def render_error_map(binary_map, reference, valid_mask=None) -> np.ndarray:
    """(H, W, 3) uint8: TP white, FP red, FN blue, TN black, unlabeled gray."""
    pred = _binary(binary_map, "binary map")
    ref = _binary(reference, "reference")
    if pred.shape != ref.shape:
        raise ValueError(f"map {pred.shape} and reference {ref.shape} differ in shape")
    img = np.empty(pred.shape + (3,), dtype=np.uint8)
    img[...] = TN_COLOR
    img[pred & ref] = TP_COLOR
    img[pred & ~ref] = FP_COLOR
    img[~pred & ref] = FN_COLOR
    if valid_mask is not None:
        valid = _binary(valid_mask, "valid mask")
        if valid.shape != ref.shape:
            raise ValueError("valid mask shape does not match reference")
        img[~valid] = INVALID_COLOR
    return img


def density_colormap(values) -> np.ndarray:
    """Map values in [0, 1] to RGB floats in [0, 1] through ``DENSITY_STOPS``."""
    v = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    pos = np.array([p for p, _ in DENSITY_STOPS])
    rgb = np.array([c for _, c in DENSITY_STOPS])
    return np.stack([np.interp(v, pos, rgb[:, k]) for k in range(3)], axis=-1)


def grayscale(base_image) -> np.ndarray:
    """(C, H, W) or (H, W) raster to a 2-98 percentile stretched gray image in [0, 1]."""
    a = np.asarray(base_image, dtype=float)
    if a.ndim == 3:
        a = a[:3].mean(axis=0)
    lo, hi = np.percentile(a, [2, 98])
    if hi <= lo:
        return np.zeros_like(a)
    return np.clip((a - lo) / (hi - lo), 0.0, 1.0)


def render_density(prob_map, base_image, alpha: float = 0.5) -> np.ndarray:
    """Alpha-blend the density colormap over a grayscale rendering of ``base_image``."""
    prob = np.asarray(prob_map, dtype=float)
    if prob.min() < 0 or prob.max() > 1:
        raise ValueError("probabilities must lie in [0, 1]")
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must lie in [0, 1]")
    gray = grayscale(base_image)
    if gray.shape != prob.shape:
        raise ValueError(f"base image {gray.shape} and probability map {prob.shape} differ in shape")
    out = (1 - alpha) * gray[..., None] + alpha * density_colormap(prob)
    return np.rint(out * 255).astype(np.uint8)


def save_png(path, rgb: np.ndarray) -> Path:
    from PIL import Image

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb).save(path)
    return path


def plot_losses(reports, out_dir, prefix: str = "loss") -> list[Path]:
    """One PNG line plot per loss term; several reports are overlaid as runs.

    Series are concatenated across training stages in execution order, with
    dashed vertical lines at stage boundaries.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not isinstance(reports, (list, tuple)):
        reports = [reports]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    terms: list[str] = []
    for rep in reports:
        for stage in rep.losses.values():
            for t in stage:
                if t not in terms:
                    terms.append(t)
    if not terms:
        raise ValueError("no loss series to plot")
    paths = []
    for term in terms:
        fig, ax = plt.subplots(figsize=(6, 3.5))
        boundaries = []
        for k, rep in enumerate(reports):
            xs, ys, offset = [], [], 0
            for stage, series in rep.losses.items():
                n = max((len(v) for v in series.values()), default=0)
                if term in series:
                    xs += [offset + i + 1 for i in range(len(series[term]))]
                    ys += list(series[term])
                offset += n
                if k == 0 and n:
                    boundaries.append(offset)
            if xs:
                ax.plot(xs, ys, marker="o" if len(xs) == 1 else None, lw=1, label=f"run {k + 1}")
        for b in boundaries[:-1]:
            ax.axvline(b + 0.5, color="gray", ls="--", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel(term)
        ax.autoscale(enable=True, tight=False)
        if len(reports) > 1:
            ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / f"{prefix}_{term}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths
