"""Model definitions: linear, two-layer MLP and a tiny convnet.

Models are stateless: parameters live in a ``ParamVector`` and batch-norm
running statistics in a ``BnStats``; a ``Model`` only knows how to map a
parameter tensor and a batch to logits.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import CapabilityError, ManifestError
from .params import Entry, Manifest, ParamVector, axpy, combine  # noqa: F401  (re-exported)
from .seeding import INIT, stream

BN_EPS = 1e-5
KINDS = ("linear", "mlp", "convnet")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_shape: tuple
    num_classes: int = 10
    hidden: int = 128
    channels: tuple = (8, 16, 16)
    use_skip: bool = False
    use_bn: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def validate(self) -> "ModelSpec":
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not self.input_shape or min(self.input_shape) < 1:
            raise ValueError(f"bad input shape {self.input_shape}")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.kind == "convnet":
            if len(self.input_shape) != 3:
                raise ValueError("convnet input shape must be (channels, height, width)")
            if not self.channels or min(self.channels) < 1:
                raise ValueError("channel widths must be >= 1")
        if self.kind != "convnet" and self.use_bn:
            raise ValueError("batch norm is only available for the convnet")
        return self

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{**d, "input_shape": tuple(d["input_shape"]),
                      "channels": tuple(d.get("channels", (8, 16, 16)))})

    def spec_hash(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


@dataclass
class BnStats:
    """Running mean/variance per batch-norm layer (empty when BN is off)."""

    layers: dict = field(default_factory=dict)

    def copy(self) -> "BnStats":
        return BnStats({k: (m.copy(), v.copy()) for k, (m, v) in self.layers.items()})

    def __bool__(self):
        return bool(self.layers)

    def bit_equal(self, other: "BnStats") -> bool:
        if self.layers.keys() != other.layers.keys():
            return False
        return all(self.layers[k][i].tobytes() == other.layers[k][i].tobytes()
                   for k in self.layers for i in (0, 1))


def _manifest(spec: ModelSpec) -> Manifest:
    c = spec.num_classes
    if spec.kind == "linear":
        return Manifest([Entry("fc.weight", (c, spec.input_dim)), Entry("fc.bias", (c,))])
    if spec.kind == "mlp":
        h = spec.hidden
        return Manifest([Entry("fc1.weight", (h, spec.input_dim)), Entry("fc1.bias", (h,)),
                         Entry("fc2.weight", (c, h)), Entry("fc2.bias", (c,))])
    entries = []
    cin = spec.input_shape[0]
    for i, cout in enumerate(spec.channels, 1):
        entries += [Entry(f"conv{i}.weight", (cout, cin, 3, 3)), Entry(f"conv{i}.bias", (cout,))]
        if spec.use_bn:
            entries += [Entry(f"bn{i}.weight", (cout,)), Entry(f"bn{i}.bias", (cout,))]
        cin = cout
    entries += [Entry("fc.weight", (c, cin)), Entry("fc.bias", (c,))]
    return Manifest(entries)


@lru_cache(maxsize=16)
def _im2col_map(cin: int, h: int, w: int) -> ad.GatherMap:
    """3x3, stride 1, zero padding 1: output (h*w, cin*9) columns."""
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    idx = np.empty((h * w, cin, 3, 3), dtype=np.int64)
    for ki in range(3):
        for kj in range(3):
            si, sj = ii + ki - 1, jj + kj - 1
            ok = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
            for c in range(cin):
                src = c * h * w + si * w + sj
                idx[:, c, ki, kj] = np.where(ok, src, -1)
    return ad.GatherMap(idx.reshape(h * w, cin * 9), cin * h * w)


class Model:
    """Forward computation for a ``ModelSpec``."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec.validate()
        self.manifest = _manifest(spec)
        self.bn_layers = [f"bn{i}" for i in range(1, len(spec.channels) + 1)] \
            if spec.kind == "convnet" and spec.use_bn else []

    @property
    def num_params(self) -> int:
        return self.manifest.size

    def _views(self, theta: ad.Tensor) -> dict:
        return {e.name: ad.take_slice(theta, a, b, e.shape) for e, a, b in self.manifest.offsets()}

    def logits(self, theta: ad.Tensor, x: np.ndarray, bn: BnStats | None = None,
               bn_mode: str = "batch", batch_stats: dict | None = None) -> ad.Tensor:
        """Logits for inputs ``x``.

        ``bn_mode`` is ``"batch"`` (normalize with the batch's own statistics,
        which are written to ``batch_stats`` if given) or ``"running"``.
        """
        if theta.shape != (self.manifest.size,):
            raise ManifestError(
                f"parameter vector has length {theta.shape}, model needs {self.manifest.size}")
        p = self._views(theta)
        n = x.shape[0]
        spec = self.spec
        if spec.kind == "linear":
            z = ad.add(ad.matmul(ad.Tensor(x.reshape(n, -1)), ad.transpose(p["fc.weight"])),
                       p["fc.bias"])
            return ad.check_finite(z, "fc")
        if spec.kind == "mlp":
            h = ad.add(ad.matmul(ad.Tensor(x.reshape(n, -1)), ad.transpose(p["fc1.weight"])),
                       p["fc1.bias"])
            h = ad.check_finite(ad.relu(h), "fc1")
            z = ad.add(ad.matmul(h, ad.transpose(p["fc2.weight"])), p["fc2.bias"])
            return ad.check_finite(z, "fc2")
        return self._conv_logits(p, x.reshape((n,) + spec.input_shape), bn, bn_mode, batch_stats)

    def _conv_logits(self, p, x, bn, bn_mode, batch_stats):
        spec = self.spec
        n, cin, hgt, wid = x.shape
        h = ad.Tensor(x)
        for i, cout in enumerate(spec.channels, 1):
            cols = ad.gather(ad.reshape(h, (n, cin * hgt * wid)), _im2col_map(cin, hgt, wid))
            cols = ad.reshape(cols, (n * hgt * wid, cin * 9))
            w = ad.reshape(p[f"conv{i}.weight"], (cout, cin * 9))
            y = ad.add(ad.matmul(cols, ad.transpose(w)), p[f"conv{i}.bias"])
            y = ad.transpose(ad.reshape(y, (n, hgt * wid, cout)), (0, 2, 1))
            y = ad.reshape(y, (n, cout, hgt, wid))
            if spec.use_bn:
                y = self._batch_norm(y, p, f"bn{i}", bn, bn_mode, batch_stats)
            if spec.use_skip and cin == cout:
                y = ad.add(y, h)
            h = ad.check_finite(ad.relu(y), f"conv{i}")
            cin = cout
        pooled = ad.mean(h, axis=(2, 3))
        z = ad.add(ad.matmul(pooled, ad.transpose(p["fc.weight"])), p["fc.bias"])
        return ad.check_finite(z, "fc")

    def _batch_norm(self, y, p, name, bn, bn_mode, batch_stats):
        c = y.shape[1]
        if bn_mode == "batch":
            mu = ad.mean(y, axis=(0, 2, 3), keepdims=True)
            centered = ad.sub(y, mu)
            var = ad.mean(ad.mul(centered, centered), axis=(0, 2, 3), keepdims=True)
            if batch_stats is not None:
                batch_stats[name] = (mu.data.ravel().copy(), var.data.ravel().copy())
            yhat = ad.mul(centered, ad.power(ad.add(var, BN_EPS), -0.5))
        elif bn_mode == "running":
            if bn is None or name not in bn.layers:
                raise CapabilityError(f"no running statistics for {name}")
            m, v = bn.layers[name]
            yhat = ad.mul(ad.sub(y, ad.Tensor(m.reshape(1, c, 1, 1))),
                          ad.Tensor(1.0 / np.sqrt(v.reshape(1, c, 1, 1) + BN_EPS)))
        else:
            raise ValueError(f"unknown bn_mode {bn_mode!r}")
        gamma = ad.reshape(p[f"{name}.weight"], (1, c, 1, 1))
        beta = ad.reshape(p[f"{name}.bias"], (1, c, 1, 1))
        return ad.add(ad.mul(yhat, gamma), beta)

    def loss_tensor(self, theta: ad.Tensor, x, y, bn=None, bn_mode=None, batch_stats=None):
        if bn_mode is None:
            bn_mode = "batch" if self.spec.use_bn else "running"
        z = self.logits(theta, x, bn, bn_mode, batch_stats)
        return ad.softmax_cross_entropy(z, np.asarray(y))

    def predict(self, params: ParamVector, x, bn=None, bn_mode=None) -> np.ndarray:
        if bn_mode is None:
            bn_mode = "running" if self.spec.use_bn else "batch"
        with ad.no_grad():
            return self.logits(ad.Tensor(params.values), x, bn, bn_mode).data


def count_params(spec: ModelSpec) -> int:
    return _manifest(spec.validate()).size


def build_model(spec: ModelSpec, seed: int = 0):
    """Construct ``(model, params, bn)`` with fan-in scaled normal init.

    Hidden layers use the ReLU gain (std sqrt(2/fan_in)), the output layer
    std sqrt(1/fan_in); biases start at zero, BN affine at (1, 0).
    """
    model = Model(spec)
    rng = stream(INIT, seed)
    arrays = {}
    for e in model.manifest:
        layer, kind = e.name.rsplit(".", 1)
        if layer.startswith("bn"):
            arrays[e.name] = np.ones(e.shape) if kind == "weight" else np.zeros(e.shape)
        elif kind == "bias":
            arrays[e.name] = np.zeros(e.shape)
        else:
            fan_in = int(np.prod(e.shape[1:]))
            gain = 1.0 if layer in ("fc", "fc2") else 2.0
            arrays[e.name] = rng.normal(0.0, np.sqrt(gain / fan_in), size=e.shape)
    params = ParamVector.flatten(arrays, model.manifest)
    bn = BnStats({name: (np.zeros(c), np.ones(c))
                  for name, c in zip(model.bn_layers, spec.channels)})
    return model, params, bn


def recompute_bn_stats(model: Model, params: ParamVector, dataset, n_batches: int = 20,
                       batch_size: int = 128) -> BnStats:
    """Re-estimate running statistics from forward passes over fixed batches.

    Uses the first ``n_batches`` batches in dataset order; the result is the
    average of per-batch means and (biased) variances.
    """
    if not model.spec.use_bn:
        raise CapabilityError("model has no batch-norm layers")
    if n_batches < 1:
        raise ValueError("n_batches must be >= 1")
    sums = {name: [0.0, 0.0] for name in model.bn_layers}
    seen = 0
    theta = ad.Tensor(params.values)
    with ad.no_grad():
        for start in range(0, len(dataset), batch_size):
            if seen == n_batches:
                break
            stats = {}
            model.logits(theta, dataset.inputs[start:start + batch_size], None, "batch", stats)
            for name, (m, v) in stats.items():
                sums[name][0] = sums[name][0] + m
                sums[name][1] = sums[name][1] + v
            seen += 1
    return BnStats({name: (np.asarray(s[0] / seen, dtype=np.float64),
                           np.asarray(s[1] / seen, dtype=np.float64))
                    for name, s in sums.items()})
