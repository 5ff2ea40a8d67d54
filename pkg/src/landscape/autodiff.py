"""Tape-based reverse-mode autodiff over numpy arrays.

Every vector-Jacobian product is itself written with differentiable ops, so a
gradient computed with ``create_graph=True`` can be differentiated again. That
is what makes Hessian-vector products exact: ``hvp(v) = grad(grad(L) . v)``.

ReLU uses a constant 0/1 mask in its backward pass, so its second derivative is
zero everywhere (subgradient 0 at exactly 0).
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

from .errors import CapabilityError, ManifestError, NumericOverflowError, TapeStateError
from .seeding import FD_CHECK, stream

_ids = itertools.count()
_state = threading.local()


def _tape_stack():
    if not hasattr(_state, "tapes"):
        _state.tapes = []
        _state.recording = True
    return _state.tapes


def _recording() -> bool:
    _tape_stack()
    return _state.recording


@contextmanager
def no_grad():
    _tape_stack()
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def _grad_mode(enabled: bool):
    _tape_stack()
    prev = _state.recording
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = prev


class Tape:
    """Ordered record of the operations that built a loss.

    Nodes are appended in creation order, so every node's inputs precede it.
    Backward passes run with ``create_graph=True`` append to the same tape.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.freed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()

    def record(self, node: "Tensor"):
        if self.freed:
            raise TapeStateError("cannot record onto a freed tape")
        self.nodes.append(node)

    def free(self):
        self.nodes = []
        self.freed = True

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("data", "parents", "vjp", "requires_grad", "id", "op", "tape")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.id = next(_ids)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, vjp, op) -> Tensor:
    """Create an op output; only records when some input needs a gradient."""
    if _recording() and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True, parents=parents, vjp=vjp, op=op)
        tapes = _tape_stack()
        if tapes:
            out.tape = tapes[-1]
            tapes[-1].record(out)
        else:
            for p in parents:
                if p.tape is not None:
                    out.tape = p.tape
                    p.tape.record(out)
                    break
        return out
    return Tensor(data)


# ---------------------------------------------------------------- broadcasting

def _reduce_axes(shape, target):
    """Axes to sum over to reduce a broadcast ``shape`` back to ``target``."""
    lead = len(shape) - len(target)
    axes = list(range(lead))
    for i, t in enumerate(target):
        if t == 1 and shape[lead + i] != 1:
            axes.append(lead + i)
    return tuple(axes)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes = _reduce_axes(x.shape, shape)
    data = x.data.sum(axis=axes, keepdims=True) if axes else x.data
    data = data.reshape(shape)
    src = x.shape
    return _make(data, (x,), lambda g: (broadcast_to(g, src),), "sum_to")


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    data = np.broadcast_to(x.data, shape)
    return _make(data, (x,), lambda g: (sum_to(g, src),), "broadcast_to")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)), "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data * b.data, (a, b),
                 lambda g: (sum_to(mul(g, b), sa), sum_to(mul(g, a), sb)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(ga, a), b))
        return sum_to(ga, sa), sum_to(gb, sb)

    return _make(a.data / b.data, (a, b), vjp, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_holder = []

    def vjp(g):
        return (mul(g, out_holder[0]),)

    out = _make(np.exp(a.data), (a,), vjp, "exp")
    out_holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (mul(g, mul(power(a, p - 1), p)),), "power")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _make(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


# ---------------------------------------------------------------- shape / reduce

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (reshape(g, src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (transpose(g, inv),), "transpose")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        kept = (1,) * len(src)
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        ax = tuple(i % len(src) for i in ax)
        kept = tuple(1 if i in ax else s for i, s in enumerate(src))

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        ax = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in ax]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ManifestError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)), "matmul")


def dot(a, b) -> Tensor:
    return tsum(mul(a, b))


def take_slice(a, start: int, stop: int, shape) -> Tensor:
    """View of ``a[start:stop]`` of a flat vector, reshaped to ``shape``."""
    a = as_tensor(a)
    size = a.shape[0]
    data = a.data[start:stop].reshape(shape)
    return _make(data, (a,), lambda g: (embed_slice(g, start, size),), "slice")


def embed_slice(g, start: int, size: int) -> Tensor:
    """Adjoint of ``take_slice``: place ``g`` flattened into zeros of length ``size``."""
    g = as_tensor(g)
    shape = g.shape
    n = g.data.size
    out = np.zeros(size)
    out[start:start + n] = g.data.ravel()
    return _make(out, (g,), lambda h: (take_slice(h, start, start + n, shape),), "embed")


class GatherMap:
    """Sparse 0/1 selection over the last axis: ``out[..., k] = x[..., idx[k]]``.

    Negative indices select a constant zero (used for convolution padding).
    """

    def __init__(self, idx: np.ndarray, src_size: int):
        self.out_shape = idx.shape
        flat = idx.ravel()
        keep = flat >= 0
        rows = np.nonzero(keep)[0]
        self.src_size = src_size
        self.matrix = sp.csr_matrix(
            (np.ones(rows.size), (rows, flat[keep])), shape=(flat.size, src_size))
        self.matrix_t = self.matrix.T.tocsr()


def gather(x, gmap: GatherMap) -> Tensor:
    x = as_tensor(x)
    lead = x.shape[:-1]
    flat = x.data.reshape(-1, gmap.src_size)
    data = (gmap.matrix @ flat.T).T.reshape(lead + gmap.out_shape)
    return _make(data, (x,), lambda g: (scatter(g, gmap, lead),), "gather")


def scatter(g, gmap: GatherMap, lead) -> Tensor:
    g = as_tensor(g)
    flat = g.data.reshape(-1, gmap.matrix.shape[0])
    data = (gmap.matrix_t @ flat.T).T.reshape(tuple(lead) + (gmap.src_size,))
    return _make(data, (g,), lambda h: (gather(h, gmap),), "scatter")


# ---------------------------------------------------------------- losses

def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy in nats; the row max is a constant shift for stability."""
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    z = sub(logits, shift)
    lse = log(tsum(exp(z), axis=1))
    picked = tsum(mul(z, Tensor(onehot)), axis=1)
    return mean(sub(lse, picked))


def check_finite(x: Tensor, layer: str) -> Tensor:
    if not np.all(np.isfinite(x.data)):
        raise NumericOverflowError(layer)
    return x


# ---------------------------------------------------------------- differentiation

def grad(output: Tensor, inputs, grad_output=None, create_graph=False):
    """Reverse-mode gradient of ``output`` with respect to each of ``inputs``.

    The pass walks ``output``'s tape in reverse creation order. With
    ``create_graph`` the backward ops are recorded too, so the result can be
    differentiated again.
    """
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    tape = output.tape
    if tape is None:
        if not output.requires_grad:
            raise TapeStateError("output does not depend on any differentiable input")
        raise TapeStateError("output was not recorded on a tape")
    if tape.freed:
        raise TapeStateError("tape has been freed")
    seed = Tensor(np.ones_like(output.data)) if grad_output is None else as_tensor(grad_output)
    grads = {output.id: seed}
    wanted = {x.id for x in inputs}
    kept = {}
    with _grad_mode(create_graph):
        if create_graph:
            _tape_stack().append(tape)
        try:
            pos = len(tape.nodes) - 1
            while pos >= 0 and tape.nodes[pos] is not output:
                pos -= 1
            if pos < 0:
                raise TapeStateError("output is not on its tape")
            nodes = tape.nodes[: pos + 1]
            for node in reversed(nodes):
                g = grads.pop(node.id, None)
                if g is None:
                    continue
                if node.id in wanted:
                    kept[node.id] = g
                if node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(parent.id)
                    grads[parent.id] = pg if prev is None else add(prev, pg)
        finally:
            if create_graph:
                _tape_stack().pop()
    grads.update(kept)
    out = []
    for x in inputs:
        g = grads.get(x.id)
        out.append(Tensor(np.zeros_like(x.data)) if g is None else g)
    return out[0] if single else out


def parameter(values: np.ndarray) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def require_second_order(model) -> None:
    if getattr(model.spec, "use_bn", False):
        raise CapabilityError("Hessian-vector products are not supported for batch-norm models")


# ---------------------------------------------------------------- model-level API

class ScalarLoss:
    """Mean cross-entropy of a batch plus the tape that produced it."""

    def __init__(self, model, params, tensor: Tensor, theta: Tensor, tape: Tape):
        self.model = model
        self.params = params
        self.tensor = tensor
        self.theta = theta
        self.tape = tape
        self._grad_graph = None

    @property
    def value(self) -> float:
        return float(self.tensor.data)

    def free(self):
        self.tape.free()
        self._grad_graph = None

    def _check(self):
        if self.tape.freed:
            raise TapeStateError("loss tape has been freed")


def _unpack_batch(batch):
    if hasattr(batch, "inputs"):
        return batch.inputs, batch.labels
    x, y = batch
    return x, y


def forward_loss(model, params, batch, bn=None, bn_mode=None) -> ScalarLoss:
    """Mean cross-entropy of ``model`` at ``params`` over ``batch``, tape retained."""
    if params.manifest != model.manifest:
        raise ManifestError("parameter manifest does not match the model")
    x, y = _unpack_batch(batch)
    if len(y) == 0:
        raise ValueError("empty batch")
    theta = parameter(params.values)
    with Tape() as tape:
        out = model.loss_tensor(theta, x, y, bn, bn_mode)
    if not np.isfinite(out.data):
        raise NumericOverflowError("loss")
    return ScalarLoss(model, params, out, theta, tape)


def gradient(loss: ScalarLoss):
    loss._check()
    g = grad(loss.tensor, loss.theta)
    return loss.params.like(g.data)


def hvp(loss: ScalarLoss, v):
    """Exact Hessian-vector product by differentiating ``g . v`` a second time."""
    loss._check()
    require_second_order(loss.model)
    if v.manifest != loss.params.manifest:
        raise ManifestError("vector manifest does not match the parameters")
    if loss._grad_graph is None:
        loss._grad_graph = grad(loss.tensor, loss.theta, create_graph=True)
    mark = len(loss.tape.nodes)
    try:
        gv = dot(loss._grad_graph, Tensor(v.values))
        hv = grad(gv, loss.theta)
    finally:
        del loss.tape.nodes[mark:]
    return loss.params.like(hv.data)


def check_grad_fd(model, params, batch, n_coords: int = 64, h: float = 1e-4,
                  seed: int = 0, bn=None) -> float:
    """Max relative error of the analytic gradient against central differences.

    Coordinates whose gradient magnitude is below 1e-6 of the largest entry
    are compared on that absolute floor instead.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    if n_coords < 1:
        raise ValueError("n_coords must be >= 1")
    g = gradient(forward_loss(model, params, batch, bn)).values
    rng = stream(FD_CHECK, seed)
    coords = rng.choice(len(params), size=min(n_coords, len(params)), replace=False)
    floor = 1e-6 * max(np.abs(g).max(), 1e-12)
    worst = 0.0
    for i in coords:
        e = np.zeros(len(params))
        e[i] = h
        up = forward_loss(model, params.like(params.values + e), batch, bn).value
        dn = forward_loss(model, params.like(params.values - e), batch, bn).value
        fd = (up - dn) / (2 * h)
        worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor))
    return worst
