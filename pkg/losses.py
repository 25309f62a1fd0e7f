"""
Training objectives: BCE on S, Focal + Dice on G, the margin hinge on cosine
similarities, and their unweighted sum
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from errors import ShapeError, LossError, ConfigError
from numerics import (Tensor, as_tensor, stack, clamp, log, power, mean_all, sum_all,
                      cosine_similarity, relu, reshape)

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0
FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25
DEFAULT_MARGIN = 0.4


@dataclass
class MarginConfig:
    tau: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"margin must lie in (0, 1], got {self.tau}")


@dataclass
class LossBreakdown:
    l_cls: float
    l_seg: float
    l_mc: float
    l_total: float
    l_dice: float = 0.0
    l_focal: float = 0.0
    total: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self):
        return {"l_cls": self.l_cls, "l_dice": self.l_dice, "l_focal": self.l_focal,
                "l_seg": self.l_seg, "l_mc": self.l_mc, "l_total": self.l_total}


def _as_vector(values):
    if isinstance(values, Tensor):
        return reshape(values, (1,)) if values.data.ndim == 0 else values
    values = list(values)
    if values and all(isinstance(v, Tensor) for v in values):
        return stack(values, axis=0)
    return as_tensor(np.asarray(values, dtype=np.float64).reshape(-1))


def bce_loss(scores, labels):
    """-(1/N) sum[y log S + (1-y) log(1-S)], S clamped to [eps, 1-eps]"""
    s = _as_vector(scores)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size == 0:
        raise ShapeError("bce_loss needs a non-empty batch")
    if s.shape != y.shape:
        raise ShapeError(f"{s.shape[0]} scores but {y.size} labels")
    s = clamp(s, PROB_EPS, 1.0 - PROB_EPS)
    per_sample = y * log(s) + (1.0 - y) * log(1.0 - s)
    return -mean_all(per_sample)


def dice_loss(seg_map, mask):
    """Soft Dice: 1 - (2 sum(G M) + 1) / (sum G + sum M + 1)"""
    g = as_tensor(seg_map)
    m = np.asarray(mask, dtype=np.float64)
    if g.shape != m.shape:
        raise ShapeError(f"map {g.shape} and mask {m.shape} differ")
    overlap = sum_all(g * m)
    return 1.0 - (overlap * 2.0 + DICE_SMOOTH) / (sum_all(g) + (float(m.sum()) + DICE_SMOOTH))


def focal_loss(seg_map, mask, gamma=FOCAL_GAMMA, alpha=FOCAL_ALPHA):
    """Pixel mean of -alpha_t (1 - p_t)^gamma log p_t"""
    g = as_tensor(seg_map)
    m = np.asarray(mask, dtype=np.float64)
    if g.shape != m.shape:
        raise ShapeError(f"map {g.shape} and mask {m.shape} differ")
    p_t = clamp(g * m + (1.0 - g) * (1.0 - m), PROB_EPS, 1.0 - PROB_EPS)
    alpha_t = alpha * m + (1.0 - alpha) * (1.0 - m)
    return mean_all(power(1.0 - p_t, gamma) * log(p_t) * (-alpha_t))


def seg_loss(seg_maps, masks, with_parts=False):
    """(1/N) sum_i [Focal(G_i, M_i) + Dice(G_i, M_i)]

    with_parts=True also returns the batch-mean Dice and Focal terms.
    """
    seg_maps, masks = list(seg_maps), list(masks)
    if not seg_maps or len(seg_maps) != len(masks):
        raise ShapeError(f"{len(seg_maps)} maps but {len(masks)} masks")
    focal_terms = [focal_loss(g, m) for g, m in zip(seg_maps, masks)]
    dice_terms = [dice_loss(g, m) for g, m in zip(seg_maps, masks)]
    total = mean_all(stack([f + d for f, d in zip(focal_terms, dice_terms)], axis=0))
    if not with_parts:
        return total
    dice_mean = float(np.mean([d.item() for d in dice_terms]))
    focal_mean = float(np.mean([f.item() for f in focal_terms]))
    return total, dice_mean, focal_mean


def signed_labels(labels):
    """+1 for normal (y=0), -1 for abnormal (y=1)"""
    y = np.asarray(labels).reshape(-1)
    return np.where(y == 1, -1.0, 1.0)


def mc_loss(features, prototypes, labels, margin=DEFAULT_MARGIN):
    """mean_i max(0, tau - ybar_i (cos(f_i, t_n) - cos(f_i, t_a)))"""
    MarginConfig(margin)
    features = list(features)
    signs = signed_labels(labels)
    if not features or len(features) != signs.size:
        raise ShapeError(f"{len(features)} features but {signs.size} labels")
    hinges = []
    for f, sign in zip(features, signs):
        gap = cosine_similarity(f, prototypes.normal) - cosine_similarity(f, prototypes.abnormal)
        hinges.append(relu(margin - gap * sign))
    return mean_all(stack(hinges, axis=0))


def total_loss(l_cls, l_seg, l_mc=None, l_dice=0.0, l_focal=0.0):
    """L = L_cls + L_seg + L_MC (L_MC omitted when None)"""
    terms = {"l_cls": as_tensor(l_cls), "l_seg": as_tensor(l_seg),
             "l_mc": as_tensor(0.0 if l_mc is None else l_mc)}
    for name, term in terms.items():
        value = float(term.data.reshape(-1)[0])
        if not np.isfinite(value):
            raise LossError(name, value)
    total = (terms["l_cls"] + terms["l_seg"]) + terms["l_mc"]
    return LossBreakdown(
        l_cls=terms["l_cls"].item(), l_seg=terms["l_seg"].item(), l_mc=terms["l_mc"].item(),
        l_total=total.item(), l_dice=float(l_dice), l_focal=float(l_focal), total=total)
