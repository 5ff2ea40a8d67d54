"""Optimization-based mining of w-peak and vvv-basin directions."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .data import iter_batches
from .directions import Direction
from .errors import MiningError
from .models import build_model
from .params import ParamVector
from .seeding import MINE_LAMBDA, MINE_SHUFFLE, stream

log = logging.getLogger(__name__)

OBJECTIVE_SAMPLES = 1000
OBJECTIVE_POINTS = 11


@dataclass(frozen=True)
class MineConfig:
    epochs: int = 50
    lr: float = 1.0
    batch_size: int = 128
    gamma: float = 0.0
    alpha: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.alpha <= 0.5:
            raise ValueError("alpha must lie in [0, 0.5]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_dict(self):
        return asdict(self)


WPEAK_DEFAULTS = MineConfig(epochs=50, lr=1.0)
VVV_DEFAULTS = MineConfig(epochs=100, lr=0.05, gamma=0.1, alpha=0.0)


def _batch_grad(model, values, batch, bn):
    try:
        loss = ad.forward_loss(model, model_params(model, values), batch, bn)
    except ArithmeticError:
        return None, None
    return loss.value, ad.gradient(loss).values


def model_params(model, values) -> ParamVector:
    return ParamVector(values, model.manifest)


def _mean_loss(model, values, x, y, bn) -> float:
    with ad.no_grad():
        try:
            z = model.loss_tensor(ad.Tensor(values), x, y, bn)
        except ArithmeticError:
            return float("inf")
    return float(z.data)


def mine_wpeak(model, theta: ParamVector, dataset, config: MineConfig = WPEAK_DEFAULTS,
               bn=None):
    """Mine a direction whose scan descends on both sides of ``theta``.

    Starting from ``eps = 0``, each batch samples ``lam ~ U[-alpha, alpha]``
    with ``alpha = e / E`` ramped per epoch, evaluates the gradient at
    ``theta + lam * eps`` and steps ``eps <- eps - lr * lam * grad``.
    ``theta`` itself is never modified.

    Returns the mined ``Direction``; ``meta["objective"]`` holds, per epoch,
    the mean loss over an 11-point lambda grid on [-1, 1] (evaluated on the
    first 1000 samples), starting with the value for ``eps = 0``.
    """
    rng = stream(MINE_LAMBDA, [config.seed, 0])
    shuffle = stream(MINE_SHUFFLE, [config.seed, 0])
    th = theta.values
    eps = np.zeros_like(th)
    x_obj = dataset.inputs[:OBJECTIVE_SAMPLES]
    y_obj = dataset.labels[:OBJECTIVE_SAMPLES]
    lam_grid = np.linspace(-1.0, 1.0, OBJECTIVE_POINTS)

    def objective(e):
        return float(np.mean([_mean_loss(model, th + lam * e, x_obj, y_obj, bn)
                              for lam in lam_grid]))

    history = [objective(eps)]
    for epoch in range(1, config.epochs + 1):
        alpha = epoch / config.epochs
        for batch in iter_batches(dataset, config.batch_size, shuffle):
            lam = rng.uniform(-alpha, alpha)
            _, g = _batch_grad(model, th + lam * eps, batch, bn)
            if g is None or not np.all(np.isfinite(g)):
                raise MiningError(f"non-finite loss at epoch {epoch}",
                                  theta.like(eps))
            eps = eps - config.lr * lam * g
        history.append(objective(eps))
        log.debug("mine_wpeak epoch %d objective %.5f", epoch, history[-1])
    vec = theta.like(eps)
    return Direction(vec, "mined", "none",
                     meta={"algorithm": "wpeak", "config": config.to_dict(),
                           "objective": history})


def mine_vvv(model, theta: ParamVector, dataset, config: MineConfig = VVV_DEFAULTS, bn=None):
    """Train a second model ``phi`` that also keeps the theta-phi midpoint low.

    Per batch: ``lam ~ U[0.5 - alpha, 0.5 + alpha]``, ``phi_hat = (1 - lam) theta
    + lam phi`` and ``phi <- phi - lr * (grad L(phi) + gamma * lam * grad L(phi_hat))``.
    ``phi`` starts from a fresh initialization seeded by ``config.seed``; alpha
    stays fixed. Returns ``(phi, eps)`` with ``eps = phi - theta``.

    ``meta["objective"]`` tracks, per epoch, ``L(phi) + gamma * mean L(phi_hat)``
    over a fixed lambda grid on the first 1000 samples.
    """
    _, init, _ = build_model(model.spec, config.seed)
    rng = stream(MINE_LAMBDA, [config.seed, 1])
    shuffle = stream(MINE_SHUFFLE, [config.seed, 1])
    th = theta.values.copy()
    phi = init.values.copy()
    x_obj = dataset.inputs[:OBJECTIVE_SAMPLES]
    y_obj = dataset.labels[:OBJECTIVE_SAMPLES]
    lam_grid = np.linspace(0.5 - config.alpha, 0.5 + config.alpha,
                           OBJECTIVE_POINTS if config.alpha > 0 else 1)

    def objective(p):
        mid = np.mean([_mean_loss(model, (1 - lam) * th + lam * p, x_obj, y_obj, bn)
                       for lam in lam_grid])
        return float(_mean_loss(model, p, x_obj, y_obj, bn) + config.gamma * mid)

    history = [objective(phi)]
    for epoch in range(1, config.epochs + 1):
        for batch in iter_batches(dataset, config.batch_size, shuffle):
            lam = rng.uniform(0.5 - config.alpha, 0.5 + config.alpha)
            _, g_phi = _batch_grad(model, phi, batch, bn)
            step = g_phi
            if config.gamma > 0 and g_phi is not None:
                _, g_hat = _batch_grad(model, (1 - lam) * th + lam * phi, batch, bn)
                step = None if g_hat is None else g_phi + config.gamma * lam * g_hat
            if step is None or not np.all(np.isfinite(step)):
                raise MiningError(f"non-finite loss at epoch {epoch}",
                                  theta.like(phi - th))
            phi = phi - config.lr * step
        history.append(objective(phi))
    phi_vec = theta.like(phi)
    eps = Direction(phi_vec - theta, "mined", "none",
                    meta={"algorithm": "vvv", "config": config.to_dict(), "objective": history})
    return phi_vec, eps
