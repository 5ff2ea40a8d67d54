"""Second-order analysis of loss changes along directions."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import eval_loss
from .directions import angle, as_vector, gaussian_direction, normalize
from .params import axpy
from .spectral import DEFAULT_EVAL_SAMPLES, HvpOperator, hutchinson_trace


@dataclass
class SoaCoeffs:
    a: float          # eps^T H eps
    b: float          # eps^T g
    base_loss: float

    def predict(self, lam):
        """Second-order loss change ``lam * b + lam**2 * a / 2``."""
        lam = np.asarray(lam, dtype=np.float64)
        return lam * self.b + 0.5 * lam ** 2 * self.a


def soa_from_operator(op: HvpOperator, eps) -> SoaCoeffs:
    e = as_vector(eps)
    return SoaCoeffs(float(e.values @ op.matvec(e.values)), op.gradient().dot(e), op.loss)


def soa_coeffs(model, params, dataset, eps, n_samples: int = DEFAULT_EVAL_SAMPLES) -> SoaCoeffs:
    """Curvature ``a`` and slope ``b`` of the loss along ``eps`` at ``params``.

    The loss is the mean over the first ``n_samples`` examples, the same fixed
    set used for spectra.
    """
    op = HvpOperator(model, params, dataset, n_samples)
    return soa_from_operator(op, eps)


@dataclass
class DeltaLossSample:
    lam: float
    sigma: float
    values: np.ndarray
    predicted_mean: float
    a: np.ndarray
    b: np.ndarray
    trace_estimate: float = float("nan")
    trace_stderr: float = float("nan")
    true_values: np.ndarray | None = None

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def stderr(self) -> float:
        return float(self.values.std(ddof=1) / np.sqrt(self.values.size))

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.values > 0))


def gaussian_soa_samples(op: HvpOperator, sigma: float, n_samples: int, seed: int = 0):
    """Per-probe ``(a, b)`` for ``n_samples`` Gaussian directions with entries N(0, sigma^2)."""
    g = op.gradient().values
    a = np.empty(n_samples)
    b = np.empty(n_samples)
    for i in range(n_samples):
        e = gaussian_direction(op.params.manifest, sigma, seed=[seed, i]).vector.values
        a[i] = e @ op.matvec(e)
        b[i] = e @ g
    return a, b


def delta_loss_distribution(model, params, dataset, lam: float, sigma: float = 1.0,
                            n_samples: int = 100, seed: int = 0, n_trace_probes: int = 100,
                            true_loss: bool = False, op: HvpOperator | None = None,
                            samples=None) -> DeltaLossSample:
    """Loss change under Gaussian perturbations, under the second-order model.

    Each probe contributes ``lam * b + lam**2 * a / 2``. The attached
    prediction ``lam**2 * sigma**2 * tr(H) / 2`` uses a Hutchinson estimate of
    the trace. With ``true_loss`` the actual differences
    ``L(theta + lam * eps) - L(theta)`` are recorded alongside.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    op = op or HvpOperator(model, params, dataset)
    a, b = samples if samples is not None else gaussian_soa_samples(op, sigma, n_samples, seed)
    vals = lam * b + 0.5 * lam ** 2 * a
    tr, se = hutchinson_trace(op, n_trace_probes, seed)
    true_vals = None
    if true_loss:
        sub = dataset.head(op.n_samples)
        base = eval_loss(model, params, None, sub)[0]
        true_vals = np.array([
            eval_loss(model, axpy(params, lam, gaussian_direction(
                params.manifest, sigma, seed=[seed, i]).vector), None, sub)[0] - base
            for i in range(n_samples)])
    return DeltaLossSample(lam, sigma, vals, 0.5 * lam ** 2 * sigma ** 2 * tr, a, b, tr, se,
                           true_vals)


@dataclass
class OverlayAnchor:
    anchor: float
    a: float
    b: float
    base_loss: float
    xs: np.ndarray
    true_losses: np.ndarray
    quad_losses: np.ndarray

    @property
    def max_error(self) -> float:
        return float(np.max(np.abs(self.true_losses - self.quad_losses)))


def quadratic_overlay(model, theta_f, eps, dataset, anchors=None, half_width: float = 0.05,
                      points: int = 11, n_samples: int = DEFAULT_EVAL_SAMPLES):
    """Local quadratic fits along ``theta_f + x * eps`` around each anchor.

    At each anchor ``lam`` the coefficients are taken at ``theta_f + lam * eps``
    and the fit is ``L(lam) + a (x - lam)^2 / 2 + b (x - lam)`` for
    ``x`` in ``[lam - half_width, lam + half_width]``; true losses on the same
    fixed evaluation set are returned for comparison.
    """
    if anchors is None:
        anchors = np.round(np.linspace(-1.0, 0.0, 11), 12)
    e = as_vector(eps)
    sub = dataset.head(n_samples)
    out = []
    for lam in anchors:
        point = axpy(theta_f, float(lam), e)
        op = HvpOperator(model, point, sub, n_samples)
        c = soa_from_operator(op, e)
        op.free()
        xs = np.linspace(lam - half_width, lam + half_width, points)
        true = np.array([eval_loss(model, axpy(theta_f, float(x), e), None, sub)[0] for x in xs])
        quad = c.base_loss + 0.5 * c.a * (xs - lam) ** 2 + c.b * (xs - lam)
        out.append(OverlayAnchor(float(lam), c.a, c.b, c.base_loss, xs, true, quad))
    return out


def foa_descent_check(model, params, batch, eps, lam: float, bn=None):
    """First-order predicted change ``lam * eps^T g`` and the actual change."""
    e = as_vector(eps)
    loss = ad.forward_loss(model, params, batch, bn)
    g = ad.gradient(loss)
    moved = ad.forward_loss(model, axpy(params, lam, e), batch, bn).value
    return lam * e.dot(g), moved - loss.value


def mli_curve(model, theta0, theta_f, alphas, dataset, bn=None):
    """Losses of the standard interpolation ``(1 - alpha) theta0 + alpha theta_f``."""
    out = []
    for a in alphas:
        pt = theta0.like((1.0 - a) * theta0.values + a * theta_f.values)
        out.append(eval_loss(model, pt, bn, dataset)[0])
    return np.array(out)


@dataclass
class AngleStudy:
    gaussian_vs_grad: np.ndarray
    gaussian_inner: np.ndarray   # eps^T g for unit-variance Gaussian eps
    grad_norm: float
    dim: int
    meta: dict = field(default_factory=dict)

    @property
    def reference_std(self) -> float:
        """Spread of angles expected from concentration: (180/pi)/sqrt(d)."""
        return float(np.degrees(1.0) / np.sqrt(self.dim))


def angle_study(model, params, batch, n: int = 100, seed: int = 0) -> AngleStudy:
    """Angles between ``n`` Gaussian directions and the negative batch gradient."""
    g = ad.gradient(ad.forward_loss(model, params, batch))
    neg = -g
    angles, inner = [], []
    for i in range(n):
        e = gaussian_direction(params.manifest, 1.0, seed=[seed, i]).vector
        angles.append(angle(e, neg))
        inner.append(e.dot(g))
    return AngleStudy(np.array(angles), np.array(inner), g.norm(), len(params))


@dataclass
class DescentComparison:
    steps: np.ndarray
    grad_losses: np.ndarray
    gauss_losses: np.ndarray
    base_loss: float
    scale: float
    best_cosine: float

    @property
    def grad_drop(self) -> float:
        return float(max(0.0, self.base_loss - self.grad_losses.min()))

    @property
    def gauss_drop(self) -> float:
        return float(max(0.0, self.base_loss - self.gauss_losses.min()))


def descent_comparison(model, params, batch, dataset, n: int = 100, scale: float = 10.0,
                       s: float = 0.1, points: int = 21, seed: int = 0) -> DescentComparison:
    """Loss drop along ``-g`` versus the most gradient-aligned of ``n`` Gaussian directions.

    The Gaussian direction is rescaled to ``||g||`` and walked ``scale`` times
    further: losses are ``L(theta - t g)`` and ``L(theta + scale * t * eps)``
    for ``t`` in ``[0, s]``.
    """
    g = ad.gradient(ad.forward_loss(model, params, batch))
    neg = -g
    best, best_cos = None, -2.0
    for i in range(n):
        e = gaussian_direction(params.manifest, 1.0, seed=[seed, i]).vector
        c = e.dot(neg) / (e.norm() * neg.norm())
        if c > best_cos:
            best, best_cos = e, c
    best = normalize(best, neg, "global").vector
    steps = np.linspace(0.0, s, points)
    base = eval_loss(model, params, None, dataset)[0]
    gl = np.array([eval_loss(model, axpy(params, t, neg), None, dataset)[0] for t in steps])
    ql = np.array([eval_loss(model, axpy(params, scale * t, best), None, dataset)[0]
                   for t in steps])
    return DescentComparison(steps, gl, ql, base, scale, float(best_cos))
