"""
Evaluation metrics: Dice, image accuracy, pixel pAUC, threshold sweep

All functions work on plain numpy arrays (predicted maps are already
detached when they get here).
"""

import os
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata
from sklearn.metrics import roc_auc_score

from errors import MetricsError, ShapeError
from classifier import predict_label

SWEEP_THRESHOLDS = (0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_THRESHOLD = 0.5


def binarize(seg_map, threshold=DEFAULT_THRESHOLD):
    """pixel >= threshold -> 1 (inclusive)"""
    if not 0.0 < threshold < 1.0:
        raise MetricsError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(seg_map) >= threshold).astype(np.uint8)


def dice_score(pred, mask):
    """100 * 2|P & M| / (|P| + |M|); two empty masks score 100"""
    pred = np.asarray(pred).astype(bool)
    mask = np.asarray(mask).astype(bool)
    if pred.shape != mask.shape:
        raise ShapeError(f"prediction {pred.shape} and mask {mask.shape} differ")
    total = int(pred.sum()) + int(mask.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2 * int(np.logical_and(pred, mask).sum()) / total


def accuracy(predicted, labels):
    predicted = np.asarray(predicted).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if labels.size == 0:
        raise MetricsError("accuracy of an empty set is undefined")
    if predicted.size != labels.size:
        raise ShapeError(f"{predicted.size} predictions but {labels.size} labels")
    return 100.0 * int((predicted == labels).sum()) / labels.size


def pixel_pauc(scores, labels):
    """Rank-based (Mann-Whitney) AUROC over pooled pixels, in percent; ties count 0.5"""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.size != labels.size:
        raise ShapeError(f"{scores.size} scores but {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("pixel pAUC needs at least one positive and one negative pixel")
    ranks = rankdata(scores, method="average")
    u_statistic = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return 100.0 * u_statistic / (n_pos * n_neg)


def image_auroc(scores, labels):
    """Image-level AUROC of S in percent, None for a single-class split"""
    labels = np.asarray(labels).reshape(-1)
    if np.unique(labels).size < 2:
        return None
    return 100.0 * float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def mean_dice(seg_maps, masks, threshold=DEFAULT_THRESHOLD):
    """Mean of per-image Dice at one threshold"""
    if len(seg_maps) != len(masks):
        raise ShapeError(f"{len(seg_maps)} maps but {len(masks)} masks")
    if not seg_maps:
        raise MetricsError("no images to score")
    return float(np.mean([dice_score(binarize(g, threshold), m) for g, m in zip(seg_maps, masks)]))


def threshold_sweep(seg_maps, masks, thresholds=SWEEP_THRESHOLDS):
    """{threshold: mean Dice}, in the given threshold order"""
    return {float(t): mean_dice(seg_maps, masks, t) for t in thresholds}


def pixel_counts(seg_maps, masks, threshold=DEFAULT_THRESHOLD):
    tp = fp = fn = 0
    for g, m in zip(seg_maps, masks):
        pred = binarize(g, threshold).astype(bool)
        m = np.asarray(m).astype(bool)
        tp += int(np.logical_and(pred, m).sum())
        fp += int(np.logical_and(pred, ~m).sum())
        fn += int(np.logical_and(~pred, m).sum())
    return tp, fp, fn


@dataclass
class MetricsReport:
    dice_percent: float
    accuracy_percent: float
    pauc_percent: Optional[float]
    sweep: Dict[float, float]
    tp: int
    fp: int
    fn: int
    n_images: int
    image_auroc_percent: Optional[float] = None
    loss: Optional[Dict[str, float]] = field(default=None)

    def to_text(self):
        """key: value lines; floats in repr form so the file round-trips exactly"""
        lines = [
            f"n_images: {self.n_images}",
            f"dice_percent: {self.dice_percent!r}",
            f"accuracy_percent: {self.accuracy_percent!r}",
            f"pauc_percent: {self.pauc_percent!r}",
            f"image_auroc_percent: {self.image_auroc_percent!r}",
            f"tp_pixels: {self.tp}",
            f"fp_pixels: {self.fp}",
            f"fn_pixels: {self.fn}",
        ]
        for threshold, value in self.sweep.items():
            lines.append(f"dice_at_{threshold:.1f}: {value!r}")
        for key, value in (self.loss or {}).items():
            lines.append(f"{key}: {value!r}")
        return "\n".join(lines) + "\n"

    def sweep_frame(self):
        """One-row table, one column per threshold"""
        return pd.DataFrame([[self.sweep[t] for t in self.sweep]],
                            columns=[f"{t:.1f}" for t in self.sweep], index=["dice_percent"])

    def save(self, output_dir, stem="report"):
        os.makedirs(output_dir, exist_ok=True)
        report_path = os.path.join(output_dir, f"{stem}.txt")
        with open(report_path, "w", encoding="utf-8") as f:
            f.write(self.to_text())
        sweep_path = os.path.join(output_dir, "sweep.csv" if stem == "report" else f"{stem}_sweep.csv")
        self.sweep_frame().to_csv(sweep_path, index_label="metric")
        return report_path, sweep_path


def build_report(seg_maps, masks, scores, labels, loss=None):
    """Headline Dice and the sweep come from the same mean_dice, so the 0.5 column matches exactly"""
    sweep = threshold_sweep(seg_maps, masks)
    headline = mean_dice(seg_maps, masks, DEFAULT_THRESHOLD)
    predicted = [predict_label(s) for s in scores]
    pooled_masks = np.concatenate([np.asarray(m).reshape(-1) for m in masks])
    if pooled_masks.any() and not pooled_masks.all():
        pauc = pixel_pauc(np.concatenate([np.asarray(g).reshape(-1) for g in seg_maps]), pooled_masks)
    else:
        pauc = None
    tp, fp, fn = pixel_counts(seg_maps, masks)
    return MetricsReport(
        dice_percent=headline,
        accuracy_percent=accuracy(predicted, labels),
        pauc_percent=pauc,
        sweep=sweep,
        tp=tp, fp=fp, fn=fn,
        n_images=len(seg_maps),
        image_auroc_percent=image_auroc(scores, labels),
        loss=loss,
    )


def read_report(path):
    """Parse a report.txt back into {key: float | int | None}"""
    values = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            key, sep, raw = line.partition(":")
            if not sep:
                continue
            raw = raw.strip()
            if raw == "None":
                values[key.strip()] = None
            elif raw.lstrip("-").isdigit():
                values[key.strip()] = int(raw)
            else:
                values[key.strip()] = float(raw)
    return values
