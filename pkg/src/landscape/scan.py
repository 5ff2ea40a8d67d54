"""1D/2D loss scans along perturbation directions, and curve classification."""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import eval_loss
from .directions import as_vector, cosine
from .models import recompute_bn_stats
from .params import axpy, combine

log = logging.getLogger(__name__)

BN_MODES = ("UpBN", "NoUpBN")
CLASSES = ("v-basin", "v-side", "w-basin", "w-peak", "vvv-basin", "other")
# A turning point must move the curve by this fraction of its (clipped) range.
PROMINENCE = 0.01


def random_guess_threshold(num_classes: int) -> float:
    if num_classes < 2:
        raise ValueError("need at least two classes")
    return math.log(num_classes)


def uniform_grid(lo: float, hi: float, points: int) -> np.ndarray:
    """Evenly spaced grid rounded to 12 decimals so that 0 lands exactly on 0.0."""
    if points < 2 or not hi > lo:
        raise ValueError("grid needs hi > lo and at least two points")
    g = np.round(np.linspace(lo, hi, points), 12)
    g[g == 0] = 0.0
    return g


@dataclass
class Curve1D:
    lambdas: np.ndarray
    losses: np.ndarray
    accuracies: np.ndarray
    bn_mode: str
    threshold: float
    stationary_count: int = 0
    label: str = "other"
    meta: dict = field(default_factory=dict)

    def loss_at(self, lam: float) -> float:
        i = int(np.argmin(np.abs(self.lambdas - lam)))
        return float(self.losses[i])


@dataclass
class Surface2D:
    lambdas1: np.ndarray
    lambdas2: np.ndarray
    losses: np.ndarray      # shape (len(lambdas2), len(lambdas1)): rows follow lambda2
    accuracies: np.ndarray
    bn_mode: str
    threshold: float
    meta: dict = field(default_factory=dict)

    @property
    def center(self) -> tuple:
        return int(np.argmin(np.abs(self.lambdas2))), int(np.argmin(np.abs(self.lambdas1)))


def _eval_point(model, point, bn, dataset, bn_mode, bn_data, n_bn_batches):
    if model.spec.use_bn and bn_mode == "UpBN":
        bn = recompute_bn_stats(model, point, bn_data, n_bn_batches)
    return eval_loss(model, point, bn, dataset)


def _check_bn_mode(bn_mode):
    if bn_mode not in BN_MODES:
        raise ValueError(f"bn_mode must be one of {BN_MODES}")


def scan_1d(model, theta, bn, eps, grid, dataset, bn_mode: str = "UpBN", bn_data=None,
            n_bn_batches: int = 20, workers: int = 1) -> Curve1D:
    """Loss and accuracy of ``theta + lambda * eps`` for each lambda in ``grid``.

    ``UpBN`` re-estimates BN running statistics at every point (from
    ``bn_data``, default ``dataset``); ``NoUpBN`` reuses ``bn``.
    """
    _check_bn_mode(bn_mode)
    eps = as_vector(eps)
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    if not np.any(grid == 0):
        raise ValueError("grid must contain lambda = 0")
    bn_data = bn_data if bn_data is not None else dataset

    def point(lam):
        return _eval_point(model, axpy(theta, float(lam), eps), bn, dataset, bn_mode,
                           bn_data, n_bn_batches)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(point, grid))
    else:
        results = [point(lam) for lam in grid]
    losses = np.array([r[0] for r in results])
    accs = np.array([r[1] for r in results])
    curve = Curve1D(grid, losses, accs, bn_mode, random_guess_threshold(model.spec.num_classes))
    curve.stationary_count = count_stationary(curve)
    curve.label = classify_curve(curve)
    return curve


def scan_2d(model, theta, bn, eps1, eps2, grid1, grid2, dataset, bn_mode: str = "UpBN",
            bn_data=None, n_bn_batches: int = 20) -> Surface2D:
    """Loss over ``theta + l1 * eps1 + l2 * eps2``; rows follow ``grid2``."""
    _check_bn_mode(bn_mode)
    e1, e2 = as_vector(eps1), as_vector(eps2)
    if e1.norm() > 0 and e2.norm() > 0:
        c = abs(cosine(e1, e2))
        if c >= 0.1:
            log.warning("scan_2d directions are far from orthogonal (|cos| = %.3f)", c)
    grid1 = np.asarray(grid1, dtype=np.float64)
    grid2 = np.asarray(grid2, dtype=np.float64)
    for g in (grid1, grid2):
        if np.any(np.diff(g) <= 0) or not np.any(g == 0):
            raise ValueError("grids must be strictly increasing and contain 0")
    bn_data = bn_data if bn_data is not None else dataset
    losses = np.empty((grid2.size, grid1.size))
    accs = np.empty_like(losses)
    for i, l2 in enumerate(grid2):
        for j, l1 in enumerate(grid1):
            pt = combine(theta, [(float(l1), e1), (float(l2), e2)])
            losses[i, j], accs[i, j] = _eval_point(model, pt, bn, dataset, bn_mode, bn_data,
                                                   n_bn_batches)
    return Surface2D(grid1, grid2, losses, accs, bn_mode,
                     random_guess_threshold(model.spec.num_classes))


def _values(curve):
    return np.asarray(curve.losses if hasattr(curve, "losses") else curve, dtype=np.float64)


def count_stationary(curve) -> int:
    """Interior points with ``(y_t - y_{t+1}) * (y_t - y_{t-1}) > 0``; endpoints excluded."""
    y = _values(curve)
    if y.size < 3:
        raise ValueError("need at least 3 points")
    with np.errstate(invalid="ignore"):
        prod = (y[1:-1] - y[2:]) * (y[1:-1] - y[:-2])
    return int(np.sum(prod > 0))


def turning_points(y: np.ndarray, delta: float):
    """Interior turning points whose swing on both sides is at least ``delta``.

    Returns a list of ``(index, "min" | "max")`` in grid order (a zigzag
    filter: a candidate extreme is confirmed once the curve retraces by
    ``delta``; the final unconfirmed candidate is dropped).
    """
    n = y.size
    pivots = []
    lo = hi = 0
    trend = 0
    cur = 0
    for i in range(1, n):
        if trend == 0:
            if y[i] > y[hi]:
                hi = i
            if y[i] < y[lo]:
                lo = i
            if y[hi] - y[lo] >= delta:
                if lo < hi:
                    if lo > 0 and y[0] - y[lo] >= delta:
                        pivots.append((lo, "min"))
                    trend, cur = 1, hi
                else:
                    if hi > 0 and y[hi] - y[0] >= delta:
                        pivots.append((hi, "max"))
                    trend, cur = -1, lo
        elif trend == 1:
            if y[i] > y[cur]:
                cur = i
            elif y[cur] - y[i] >= delta:
                pivots.append((cur, "max"))
                trend, cur = -1, i
        else:
            if y[i] < y[cur]:
                cur = i
            elif y[i] - y[cur] >= delta:
                pivots.append((cur, "min"))
                trend, cur = 1, i
    return pivots


def classify_curve(curve, lambdas=None, threshold=None) -> str:
    """Map a sampled curve onto the v-basin / v-side / w-basin / w-peak / vvv-basin taxonomy.

    Losses are clipped at the random-guess threshold ``ln C`` so structure
    above it is ignored; turning points must swing by ``PROMINENCE`` of the
    clipped range. "At lambda = 0" means within one grid step of it.
    """
    y = _values(curve)
    if lambdas is None:
        lambdas = curve.lambdas
    if threshold is None:
        threshold = curve.threshold
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if y.size < 5:
        raise ValueError("need at least 5 points")
    yc = np.minimum(np.where(np.isnan(y), np.inf, y), threshold)
    if yc.min() >= threshold:
        return "other"
    span = yc.max() - yc.min()
    if span <= 0:
        return "other"
    piv = turning_points(yc, PROMINENCE * span)
    kinds = [k for _, k in piv]
    step = np.min(np.diff(lambdas))

    def at_zero(i):
        return abs(lambdas[i]) <= step * (1 + 1e-9)

    mins = [i for i, k in piv if k == "min"]
    if not piv:
        return "v-side" if abs(yc[-1] - yc[0]) >= PROMINENCE * span else "other"
    if kinds == ["min"]:
        return "v-basin" if at_zero(mins[0]) else "v-side"
    if kinds == ["max"]:
        return "w-peak" if at_zero(piv[0][0]) else "other"
    if kinds == ["min", "max", "min"]:
        return "w-peak" if at_zero(piv[1][0]) else "w-basin"
    if len(mins) == 3 and kinds == ["min", "max", "min", "max", "min"]:
        return "vvv-basin"
    return "other"
