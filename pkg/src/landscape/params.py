"""Flat parameter vectors with a shape manifest."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ManifestError


@dataclass(frozen=True)
class Entry:
    name: str
    shape: tuple
    trainable: bool = True

    @property
    def size(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1


class Manifest(tuple):
    """Ordered tuple of ``Entry`` records describing a flat parameter layout."""

    def __new__(cls, entries):
        return super().__new__(cls, tuple(entries))

    @property
    def size(self) -> int:
        return sum(e.size for e in self)

    def offsets(self):
        """Yield ``(entry, start, stop)`` for each entry."""
        pos = 0
        for e in self:
            yield e, pos, pos + e.size
            pos += e.size

    def slice_of(self, name: str) -> slice:
        for e, a, b in self.offsets():
            if e.name == name:
                return slice(a, b)
        raise KeyError(name)

    def entry(self, name: str) -> Entry:
        for e in self:
            if e.name == name:
                return e
        raise KeyError(name)


class ParamVector:
    """Immutable flat float64 vector paired with its manifest."""

    __slots__ = ("values", "manifest")

    def __init__(self, values, manifest: Manifest):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1 or values.size != manifest.size:
            raise ManifestError(
                f"vector of length {values.size} does not match manifest size {manifest.size}")
        values.setflags(write=False)
        self.values = values
        self.manifest = manifest

    def __len__(self):
        return self.values.size

    def __repr__(self):
        return f"ParamVector(d={self.values.size}, entries={len(self.manifest)})"

    def _check(self, other: "ParamVector"):
        if not isinstance(other, ParamVector):
            raise TypeError(f"expected ParamVector, got {type(other).__name__}")
        if other.manifest != self.manifest:
            raise ManifestError("parameter manifests differ")

    def like(self, values) -> "ParamVector":
        return ParamVector(values, self.manifest)

    def __add__(self, other):
        self._check(other)
        return self.like(self.values + other.values)

    def __sub__(self, other):
        self._check(other)
        return self.like(self.values - other.values)

    def __neg__(self):
        return self.like(-self.values)

    def __mul__(self, c):
        return self.like(self.values * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self.like(self.values / float(c))

    def dot(self, other) -> float:
        self._check(other)
        return float(self.values @ other.values)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def unflatten(self) -> dict:
        return {e.name: self.values[a:b].reshape(e.shape) for e, a, b in self.manifest.offsets()}

    @classmethod
    def flatten(cls, arrays: dict, manifest: Manifest) -> "ParamVector":
        return cls(np.concatenate([np.asarray(arrays[e.name], dtype=np.float64).ravel()
                                   for e in manifest]), manifest)

    @classmethod
    def zeros(cls, manifest: Manifest) -> "ParamVector":
        return cls(np.zeros(manifest.size), manifest)

    def bit_equal(self, other: "ParamVector") -> bool:
        return self.manifest == other.manifest and self.values.tobytes() == other.values.tobytes()


def axpy(theta: ParamVector, lam: float, eps: ParamVector) -> ParamVector:
    """Return ``theta + lam * eps``."""
    theta._check(eps)
    if lam == 0:
        return theta
    return theta.like(theta.values + lam * eps.values)


def combine(theta: ParamVector, terms) -> ParamVector:
    """``theta + sum(lam_i * eps_i)`` accumulated left to right."""
    out = theta
    for lam, eps in terms:
        out = axpy(out, lam, eps)
    return out
