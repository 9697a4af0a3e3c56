"""Training objectives: MIL matching loss and the pseudo-label losses.

Pseudo labels and their confidence weights are computed from plain arrays
and enter the graph as constants, so no gradient flows through label
generation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .moment_map import moment_count, valid_mask

EPS = 1e-7


class InvalidIntervalError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    o_min: float = 0.9
    o_max: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.o_min < self.o_max <= 1.0):
            raise ConfigurationError(
                f"thresholds need 0 <= o_min < o_max <= 1, got {self.o_min}, {self.o_max}")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.25
    gamma: float = 0.25

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError("loss weights must be nonnegative")
        if abs(self.alpha + self.beta + self.gamma - 1.0) > 1e-9:
            raise ConfigurationError(
                f"loss weights must sum to 1, got {self.alpha + self.beta + self.gamma}")


def _bce(p: Tensor, y) -> Tensor:
    """Elementwise ``-(y log p + (1-y) log(1-p))`` after clamping ``p``."""
    p = ad.clamp(p, EPS, 1.0 - EPS)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), p.shape)
    pos = ad.log(p) * y
    negs = ad.log(1.0 - p) * (1.0 - y)
    return ad.neg(ad.add(pos, negs))


def mil_loss(P: Tensor, y_m: int) -> Tensor:
    """Binary cross entropy between the video-level score and the matching label."""
    return ad.tensor_sum(_bce(P, float(y_m)))


def iou(a, b) -> float:
    """Temporal intersection over union of ``[s, e]`` intervals."""
    sa, ea = a
    sb, eb = b
    if sa >= ea or sb >= eb:
        raise InvalidIntervalError(f"degenerate interval in iou({a}, {b})")
    inter = max(0.0, min(ea, eb) - max(sa, sb))
    return inter / (max(ea, eb) - min(sa, sb))


def _iou_to_anchor(n: int, i: int, j: int) -> np.ndarray:
    """IoU of every moment's clip span ``[a, b+1)`` with ``[i, j+1)``; 0 below the diagonal."""
    a = np.arange(n)[:, None]
    b = np.arange(n)[None, :] + 1
    inter = np.maximum(0, np.minimum(b, j + 1) - np.maximum(a, i))
    union = np.maximum(b, j + 1) - np.minimum(a, i)
    return np.where(valid_mask(n), inter / union, 0.0)


def truncate(o: np.ndarray, th: Thresholds) -> np.ndarray:
    """Piecewise-linear soft label: 0 at or below o_min, 1 at or above o_max."""
    mid = (o - th.o_min) / (th.o_max - th.o_min)
    return np.where(o <= th.o_min, 0.0, np.where(o >= th.o_max, 1.0, mid))


def pseudo_labels(source_map, th: Thresholds = Thresholds()) -> tuple[np.ndarray, float]:
    """Soft labels around the source map's argmax and its confidence weight.

    Returns ``(labels, w)`` with ``w = max(source_map)`` over valid entries.
    """
    vals = source_map.values if isinstance(source_map, Tensor) else np.asarray(source_map)
    n = vals.shape[-1]
    mask = valid_mask(n)
    if not mask.any():
        raise ValueError("pseudo_labels: empty map")
    flat = int(np.argmax(np.where(mask, vals, -np.inf)))
    i, j = divmod(flat, n)
    labels = np.where(mask, truncate(_iou_to_anchor(n, i, j), th), 0.0)
    return labels, float(vals[i, j])


def soft_ce_loss(pred_map: Tensor, labels: np.ndarray, w: float) -> Tensor:
    """``(w / C) * sum_valid BCE(p, y)`` over the ``C`` valid moments."""
    n = pred_map.shape[-1]
    mask = valid_mask(n)
    p = ad.masked_select(pred_map, mask)
    y = np.asarray(labels)[mask]
    return ad.scale(ad.tensor_sum(_bce(p, y)), float(w) / moment_count(n))


def _as_list(maps) -> list[Tensor]:
    if isinstance(maps, Tensor):
        if maps.values.ndim == 2:
            return [maps]
        return [maps[k] for k in range(maps.shape[0])]
    return list(maps)


def _average(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(terms))


def pseudo_targets(maps, th: Thresholds = Thresholds()) -> list[tuple[np.ndarray, float]]:
    """``(labels, w)`` for each map; pass to the losses below to freeze them."""
    return [pseudo_labels(m, th) for m in _as_list(maps)]


def sd_loss(maps, th: Thresholds = Thresholds(), targets=None) -> Tensor:
    """Self-discriminating loss: each map against labels from its own argmax."""
    maps = _as_list(maps)
    if not maps:
        raise ValueError("sd_loss: empty map list")
    targets = targets or pseudo_targets(maps, th)
    return _average([soft_ce_loss(m, y, w) for m, (y, w) in zip(maps, targets)])


def cb_loss(src_maps, cb_maps, th: Thresholds = Thresholds(), targets=None) -> Tensor:
    """Complementary-branch maps supervised by labels from the matching maps.

    The confidence weight of each term is the max of the *source* map.
    """
    src_maps, cb_maps = _as_list(src_maps), _as_list(cb_maps)
    if len(src_maps) != len(cb_maps):
        raise ValueError(f"cb_loss: {len(src_maps)} source maps vs {len(cb_maps)} branch maps")
    if not src_maps:
        raise ValueError("cb_loss: empty map list")
    targets = targets or pseudo_targets(src_maps, th)
    return _average([soft_ce_loss(cb, y, w) for cb, (y, w) in zip(cb_maps, targets)])


def cb_sd_loss(cb_maps, th: Thresholds = Thresholds(), targets=None) -> Tensor:
    return sd_loss(cb_maps, th, targets)


def total_loss(components: dict[str, Tensor | None], weights: LossWeights, y_m: int) -> Tensor:
    """Weighted objective.  Pseudo-label terms only count for matched pairs.

    ``components`` maps ``mil``, ``cb``, ``sd``, ``cb_sd`` to losses; absent
    or ``None`` entries are treated as disabled.
    """
    if not isinstance(weights, LossWeights):
        raise ConfigurationError("total_loss: weights must be a LossWeights")
    total = ad.scale(components["mil"], weights.alpha)
    if y_m == 1:
        for key, wt in (("cb", weights.beta), ("sd", weights.gamma), ("cb_sd", weights.gamma)):
            term = components.get(key)
            if term is not None:
                total = ad.add(total, ad.scale(term, wt))
    return total
