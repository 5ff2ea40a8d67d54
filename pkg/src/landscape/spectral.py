"""Matrix-free Hessian spectra: power iteration, Lanczos, Hutchinson trace, SLQ density.

All routines take any operator exposing ``dim`` and ``matvec(ndarray) -> ndarray``;
``HvpOperator`` wraps a model's loss on a fixed evaluation set.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .directions import Direction
from .errors import ConvergenceError
from .params import ParamVector
from .seeding import SPECTRAL, stream

DEFAULT_EVAL_SAMPLES = 2048


class MatrixOperator:
    """Dense symmetric matrix as an operator (oracles and tests)."""

    def __init__(self, a):
        self.a = np.asarray(a, dtype=np.float64)
        self.dim = self.a.shape[0]
        self.calls = 0

    def matvec(self, v):
        self.calls += 1
        return self.a @ v


class HvpOperator:
    """Hessian of the mean loss over a fixed evaluation set, applied matrix-free.

    The set is the first ``n_samples`` examples of ``dataset``; it is split
    into chunks whose gradient graphs are built once and reused by every
    product.
    """

    def __init__(self, model, params: ParamVector, dataset, n_samples: int = DEFAULT_EVAL_SAMPLES,
                 chunk: int = 2048):
        ad.require_second_order(model)
        self.model = model
        self.params = params
        self.dim = len(params)
        n = min(n_samples, len(dataset))
        self.n_samples = n
        self._losses = []
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            loss = ad.forward_loss(model, params, (dataset.inputs[start:stop],
                                                   dataset.labels[start:stop]))
            self._losses.append((loss, (stop - start) / n))
        self.calls = 0

    @property
    def loss(self) -> float:
        return sum(w * l.value for l, w in self._losses)

    def gradient(self) -> ParamVector:
        g = sum(w * ad.gradient(l).values for l, w in self._losses)
        return self.params.like(g)

    def matvec(self, v) -> np.ndarray:
        self.calls += 1
        vec = self.params.like(np.asarray(v, dtype=np.float64))
        return sum(w * ad.hvp(l, vec).values for l, w in self._losses)

    def hvp(self, v: ParamVector) -> ParamVector:
        return self.params.like(self.matvec(v.values))

    def free(self):
        for l, _ in self._losses:
            l.free()


def dense_matrix(op) -> np.ndarray:
    """Materialize an operator column by column (small ``dim`` only)."""
    eye = np.eye(op.dim)
    cols = np.stack([op.matvec(eye[i]) for i in range(op.dim)], axis=1)
    return cols


def _start_vector(n, rng):
    v = rng.normal(size=n)
    return v / np.linalg.norm(v)


def power_iteration(op, tol: float = 1e-6, max_iter: int = 1000, seed: int = 0):
    """Dominant-magnitude eigenpair by ``v <- Hv / ||Hv||``.

    Stops when ``||Hv - lambda v|| / |lambda| <= tol``.
    """
    n = op.dim
    if n < 1:
        raise ValueError("operator dimension must be >= 1")
    v = _start_vector(n, stream(SPECTRAL, seed))
    hv = op.matvec(v)
    res = np.inf
    for _ in range(max_iter):
        lam = float(v @ hv)
        res = np.linalg.norm(hv - lam * v) / max(abs(lam), np.finfo(float).tiny)
        if res <= tol:
            return lam, v
        nrm = np.linalg.norm(hv)
        if nrm == 0.0:
            return 0.0, v
        v = hv / nrm
        hv = op.matvec(v)
    raise ConvergenceError(f"power iteration did not converge in {max_iter} steps "
                           f"(residual {res:.3e})", res)


def _orthogonalize(w, basis):
    """Classical Gram-Schmidt, applied twice; returns (w, coefficients)."""
    h = basis.T @ w
    w = w - basis @ h
    h2 = basis.T @ w
    return w - basis @ h2, h + h2


@dataclass
class EigResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # (dim, k), columns orthonormal
    residuals: np.ndarray     # ||H v - lambda v|| recomputed explicitly
    matvecs: int
    restarts: int


def extremal_eigs(op, k: int = 10, which: str = "LA", tol: float = 1e-6, seed: int = 0,
                  ncv: int | None = None, max_restarts: int = 500) -> EigResult:
    """k algebraically largest (``LA``) or smallest (``SA``) eigenpairs.

    Thick-restart Lanczos with full reorthogonalization: the projected matrix
    is rebuilt from full projections, so restarts just keep the wanted Ritz
    vectors and continue from the residual direction. Results come ordered by
    extremity (LA descending, SA ascending).
    """
    if which not in ("LA", "SA"):
        raise ValueError(f"which must be 'LA' or 'SA', got {which!r}")
    n = op.dim
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < dim, got k={k}, dim={n}")
    m = min(n, ncv or max(2 * k + 20, 40))
    rng = stream(SPECTRAL, seed)
    V = np.zeros((n, m + 1))
    T = np.zeros((m, m))
    V[:, 0] = _start_vector(n, rng)
    j, beta, restarts, calls = 0, 0.0, 0, 0
    sign = -1.0 if which == "LA" else 1.0
    while True:
        while j < m:
            w = op.matvec(V[:, j])
            calls += 1
            w, h = _orthogonalize(w, V[:, :j + 1])
            T[:j + 1, j] = h
            T[j, :j + 1] = h
            beta = np.linalg.norm(w)
            if beta <= 1e-10 * max(1.0, np.abs(h).max()):
                beta = 0.0
                if j + 1 < n:
                    r, _ = _orthogonalize(rng.normal(size=n), V[:, :j + 1])
                    V[:, j + 1] = r / np.linalg.norm(r)
            else:
                V[:, j + 1] = w / beta
            j += 1
        theta, Y = np.linalg.eigh(T[:j, :j])
        order = np.argsort(sign * theta, kind="stable")
        want = order[:k]
        res_est = beta * np.abs(Y[j - 1, want])
        if np.all(res_est <= tol) or j >= n:
            break
        if restarts >= max_restarts:
            raise ConvergenceError(f"Lanczos did not converge after {restarts} restarts "
                                   f"(max residual {res_est.max():.3e})", float(res_est.max()))
        keep = order[:min(m - 1, k + (m - k) // 2)]
        ell = keep.size
        V[:, :ell] = V[:, :j] @ Y[:, keep]
        V[:, ell] = V[:, j]
        T[:] = 0.0
        T[np.arange(ell), np.arange(ell)] = theta[keep]
        j = ell
        restarts += 1
    vals = theta[want]
    vecs = V[:, :j] @ Y[:, want]
    vecs /= np.linalg.norm(vecs, axis=0)
    res = np.array([np.linalg.norm(op.matvec(vecs[:, i]) - vals[i] * vecs[:, i])
                    for i in range(k)])
    return EigResult(vals, vecs, res, calls + k, restarts)


def hutchinson_trace(op, n_probes: int = 100, seed: int = 0):
    """Trace estimate ``mean(z^T H z)`` over Rademacher probes, with its standard error."""
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = stream(SPECTRAL, seed)
    samples = np.empty(n_probes)
    for i in range(n_probes):
        z = rng.choice((-1.0, 1.0), size=op.dim)
        samples[i] = z @ op.matvec(z)
    se = samples.std(ddof=1) / np.sqrt(n_probes) if n_probes > 1 else float("nan")
    return float(samples.mean()), float(se)


def lanczos_tridiag(op, v0, steps: int):
    """Plain Lanczos with full reorthogonalization; stops early on breakdown.

    Returns the tridiagonal's diagonal and off-diagonal.
    """
    n = op.dim
    steps = min(steps, n)
    V = np.zeros((n, steps))
    alpha, beta = [], []
    v = v0 / np.linalg.norm(v0)
    for j in range(steps):
        V[:, j] = v
        w = op.matvec(v)
        a = float(v @ w)
        w, _ = _orthogonalize(w, V[:, :j + 1])
        alpha.append(a)
        b = np.linalg.norm(w)
        if j == steps - 1 or b <= 1e-10 * max(1.0, abs(a)):
            break
        beta.append(b)
        v = w / b
    return np.array(alpha), np.array(beta)


@dataclass
class Density:
    grid: np.ndarray
    values: np.ndarray
    nodes: list          # per-probe Ritz values
    weights: list        # per-probe quadrature weights
    sigma: float
    first_moment: float
    first_moment_stderr: float

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def modes(self) -> np.ndarray:
        v = self.values
        idx = np.nonzero((v[1:-1] > v[:-2]) & (v[1:-1] >= v[2:]))[0] + 1
        return self.grid[idx]

    def mass_within(self, lo: float, hi: float) -> float:
        sel = (self.grid >= lo) & (self.grid <= hi)
        if sel.sum() < 2:
            return 0.0
        return float(np.trapezoid(self.values[sel], self.grid[sel]))


def slq_density(op, n_probes: int = 10, lanczos_steps: int = 80, grid_points: int = 1024,
                kernel_sigma: float | None = None, seed: int = 0) -> Density:
    """Eigenvalue density by stochastic Lanczos quadrature.

    Each Rademacher probe gives Ritz values and weights (squared first
    components of the tridiagonal's eigenvectors); the probe-averaged
    quadrature is smoothed with a Gaussian kernel and renormalized on the grid.
    The default bandwidth is 1% of the Ritz-value span.
    """
    if lanczos_steps > op.dim:
        raise ValueError("lanczos_steps must not exceed the operator dimension")
    rng = stream(SPECTRAL, seed)
    nodes, weights, moments = [], [], []
    for _ in range(n_probes):
        z = rng.choice((-1.0, 1.0), size=op.dim)
        a, b = lanczos_tridiag(op, z, lanczos_steps)
        t = np.diag(a) + np.diag(b, 1) + np.diag(b, -1)
        th, y = np.linalg.eigh(t)
        w = y[0] ** 2
        nodes.append(th)
        weights.append(w)
        moments.append(float(w @ th))
    allnodes = np.concatenate(nodes)
    lo, hi = allnodes.min(), allnodes.max()
    sigma = kernel_sigma if kernel_sigma else 0.01 * (hi - lo)
    if sigma <= 0:
        sigma = 0.01 * max(1.0, abs(hi))
    grid = np.linspace(lo - 3 * sigma, hi + 3 * sigma, grid_points)
    vals = np.zeros(grid_points)
    for th, w in zip(nodes, weights):
        diff = (grid[:, None] - th[None, :]) / sigma
        vals += (np.exp(-0.5 * diff ** 2) @ w) / (sigma * np.sqrt(2 * np.pi))
    vals /= n_probes
    vals /= np.trapezoid(vals, grid)
    moments = np.array(moments)
    se = moments.std(ddof=1) / np.sqrt(n_probes) if n_probes > 1 else float("nan")
    return Density(grid, vals, nodes, weights, float(sigma), float(moments.mean()), float(se))


@dataclass
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: list
    residuals: np.ndarray
    which: str
    trace: float = float("nan")
    trace_stderr: float = float("nan")
    density: Density | None = None
    meta: dict = field(default_factory=dict)


def compute_spectrum(op: HvpOperator, k: int = 10, which: str = "LA", tol: float = 1e-6,
                     n_trace_probes: int = 100, slq_probes: int = 10, slq_steps: int = 80,
                     seed: int = 0) -> Spectrum:
    res = extremal_eigs(op, k, which, tol, seed)
    tag = "P.E." if which == "LA" else "N.E."
    vecs = [Direction(op.params.like(res.eigenvectors[:, i]), "eigenvector",
                      meta={"eigenvalue": float(res.eigenvalues[i]), "label": f"{tag}{i + 1}"})
            for i in range(k)]
    tr, se = hutchinson_trace(op, n_trace_probes, seed)
    dens = slq_density(op, slq_probes, min(slq_steps, op.dim), seed=seed) if slq_probes else None
    return Spectrum(res.eigenvalues, vecs, res.residuals, which, tr, se, dens,
                    {"matvecs": res.matvecs, "restarts": res.restarts,
                     "eval_samples": op.n_samples})
