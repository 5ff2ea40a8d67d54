"""Perturbation directions, normalization and angle statistics."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import formats
from .errors import DegenerateDirectionError, ManifestError
from .params import Manifest, ParamVector
from .seeding import DIRECTION, stream

log = logging.getLogger(__name__)

PROVENANCES = ("gaussian", "neg-grad", "ckpt-delta", "indep-delta", "eigenvector", "mined", "custom")
NORM_MODES = ("none", "global", "layer", "filter")


@dataclass(frozen=True)
class Direction:
    vector: ParamVector
    provenance: str = "custom"
    normalization: str = "none"
    norm_before: float = float("nan")
    norm_after: float = float("nan")
    degenerate: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(np.isfinite(self.vector.values)):
            raise ValueError("direction has non-finite entries")
        if np.isnan(self.norm_before):
            n = self.vector.norm()
            object.__setattr__(self, "norm_before", n)
            object.__setattr__(self, "norm_after", n)

    @property
    def manifest(self) -> Manifest:
        return self.vector.manifest

    def norm(self) -> float:
        return self.vector.norm()

    def scaled(self, c: float) -> "Direction":
        return replace(self, vector=self.vector * c, norm_after=abs(c) * self.vector.norm())


def as_vector(x) -> ParamVector:
    return x.vector if isinstance(x, Direction) else x


def gaussian_direction(manifest: Manifest, sigma: float = 1.0, seed: int = 0) -> Direction:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = stream(DIRECTION, seed)
    vec = ParamVector(rng.normal(0.0, sigma, size=manifest.size), manifest)
    return Direction(vec, "gaussian", meta={"sigma": sigma, "seed": seed})


def _filter_groups(manifest: Manifest):
    """Index groups that are rescaled together under filter normalization.

    Weight tensors are sliced by output channel (conv) or output row (fc); a
    bias joins the filters of the weight with the same layer prefix. Other
    1-D tensors (BN affine) form a single group each.
    """
    offsets = {e.name: (e, a, b) for e, a, b in manifest.offsets()}
    groups = []
    used = set()
    for e, a, b in manifest.offsets():
        if len(e.shape) < 2:
            continue
        layer = e.name.rsplit(".", 1)[0]
        rows = e.shape[0]
        per = e.size // rows
        bias = offsets.get(f"{layer}.bias")
        if bias is not None and bias[0].shape == (rows,):
            used.add(bias[0].name)
        for r in range(rows):
            idx = np.arange(a + r * per, a + (r + 1) * per)
            if bias is not None and bias[0].name in used:
                idx = np.append(idx, bias[1] + r)
            groups.append(idx)
        used.add(e.name)
    for e, a, b in manifest.offsets():
        if e.name not in used:
            groups.append(np.arange(a, b))
    return groups


def _layer_groups(manifest: Manifest):
    return [np.arange(a, b) for _, a, b in manifest.offsets()]


def normalize(eps, theta: ParamVector, mode: str = "global") -> Direction:
    """Rescale ``eps`` so its norm matches ``theta`` globally, per layer or per filter.

    A zero-norm ``eps`` (globally) raises; a zero-norm slice inside layer or
    filter mode is left at zero and flagged ``degenerate``.
    """
    if mode not in NORM_MODES:
        raise ValueError(f"unknown normalization mode {mode!r}")
    d = eps if isinstance(eps, Direction) else Direction(eps)
    vec = d.vector
    if vec.manifest != theta.manifest:
        raise ManifestError("direction and parameters have different manifests")
    before = vec.norm()
    if mode == "none":
        return replace(d, normalization="none", norm_before=before, norm_after=before)
    if before == 0.0:
        raise DegenerateDirectionError("cannot normalize a zero direction")
    e = vec.values
    t = theta.values
    if mode == "global":
        out = e * (np.linalg.norm(t) / before)
        degenerate = False
    else:
        groups = _layer_groups(vec.manifest) if mode == "layer" else _filter_groups(vec.manifest)
        out = np.zeros_like(e)
        degenerate = False
        for idx in groups:
            ne = np.linalg.norm(e[idx])
            if ne == 0.0:
                degenerate = True
                continue
            out[idx] = e[idx] * (np.linalg.norm(t[idx]) / ne)
        if degenerate:
            warnings.warn(f"{mode} normalization met zero-norm slices; left them at zero",
                          RuntimeWarning, stacklevel=2)
    nv = vec.like(out)
    return replace(d, vector=nv, normalization=mode, norm_before=before,
                   norm_after=nv.norm(), degenerate=d.degenerate or degenerate)


def neg_gradient_direction(model, params: ParamVector, batch, bn=None) -> Direction:
    g = ad.gradient(ad.forward_loss(model, params, batch, bn))
    return Direction(-g, "neg-grad", meta={"grad_norm": g.norm()})


def delta_direction(a, b) -> Direction:
    """``b.params - a.params``; independent when the checkpoints' seeds differ."""
    if a.spec_hash != b.spec_hash:
        raise ManifestError("checkpoints come from different model specs")
    vec = b.params - a.params
    prov = "ckpt-delta" if a.seed == b.seed else "indep-delta"
    degenerate = vec.norm() == 0.0
    if degenerate:
        log.warning("delta direction between identical parameters is zero")
    return Direction(vec, prov, degenerate=degenerate,
                     meta={"from_epoch": a.epoch, "to_epoch": b.epoch,
                           "from_seed": a.seed, "to_seed": b.seed})


def cosine(u, v) -> float:
    u, v = as_vector(u), as_vector(v)
    nu, nv = u.norm(), v.norm()
    if nu == 0.0 or nv == 0.0:
        raise DegenerateDirectionError("cosine of a zero vector is undefined")
    return float(np.clip(u.dot(v) / (nu * nv), -1.0, 1.0))


def angle(u, v) -> float:
    """Angle between two directions in degrees."""
    return float(np.degrees(np.arccos(cosine(u, v))))


def overlap_profile(eps, eigvecs) -> np.ndarray:
    """``|cos(eps, v_i)|`` for each eigenvector, in the order given."""
    e = as_vector(eps)
    ne = e.norm()
    if ne == 0.0:
        return np.zeros(len(eigvecs))
    return np.array([abs(e.dot(as_vector(v))) / (ne * as_vector(v).norm()) for v in eigvecs])


def eigen_order(neg_vecs, pos_vecs):
    """N.E.1..N.E.k followed by P.E.k..P.E.1, the order used for overlap bars.

    ``neg_vecs`` run from most negative upward, ``pos_vecs`` from largest down.
    """
    return list(neg_vecs) + list(reversed(list(pos_vecs)))


# ---------------------------------------------------------------- persistence

def direction_bytes(d: Direction, spec_hash: int = 0, seed: int = 0) -> bytes:
    meta = {"kind": "direction", "provenance": d.provenance, "normalization": d.normalization,
            "norm_before": d.norm_before, "norm_after": d.norm_after,
            "degenerate": d.degenerate, "meta": d.meta}
    return formats.encode(b"LMDR", spec_hash, 0, seed, meta, d.vector.manifest,
                          d.vector.values, {})


def save_direction(d: Direction, path, spec_hash: int = 0, seed: int = 0) -> None:
    formats.atomic_write(path, direction_bytes(d, spec_hash, seed))


def load_direction(path) -> Direction:
    rec = formats.decode(Path(path).read_bytes(), str(path), b"LMDR")
    m = rec["meta"]
    return Direction(ParamVector(rec["values"], rec["manifest"]), m["provenance"],
                     m["normalization"], m["norm_before"], m["norm_after"], m["degenerate"],
                     m.get("meta", {}))
