"""Dense float64 arrays with a define-by-run reverse-mode gradient tape.

Every differentiable op records a node on the active :class:`Tape`.  Calling
:func:`backward` on a scalar walks the tape in reverse recording order,
accumulates gradients into leaf tensors (parameters included) and frees the
tape.  Tensors produced before a tape was freed behave as constants afterwards.
"""
from __future__ import annotations

import contextlib
import struct
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInput, ShapeError, SingularMatrix

__all__ = [
    "Tensor", "Parameter", "Tape", "backward", "no_grad", "current_tape",
    "add", "sub", "mul", "neg", "matmul", "concat", "getitem", "gather",
    "reshape", "transpose", "sum", "mean", "square", "sigmoid", "relu",
    "reduce_max", "l2_normalize", "pointwise_linear", "softmax_cross_entropy",
    "linear_solve", "sgd_step", "adam_step", "zero_grad", "glorot_uniform",
    "save_checkpoint", "load_checkpoint", "gradcheck", "rel_error",
]


@dataclass
class _Node:
    parents: tuple
    backward: Callable[[np.ndarray], Sequence]


class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager to make it the active tape for the current
    thread; otherwise each thread has a default tape.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def record(self, parents, backward_fn) -> int:
        self.nodes.append(_Node(tuple(parents), backward_fn))
        return len(self.nodes) - 1

    def clear(self):
        self.nodes = []
        self.generation += 1

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
        _local.grad_enabled = True
    return _local.stack


def current_tape() -> Tape:
    return _stack()[-1]


def _grad_enabled() -> bool:
    _stack()
    return _local.grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (evaluation passes)."""
    _stack()
    prev = _local.grad_enabled
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_gen", "_node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._tape = None
        self._gen = -1
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def node_id(self):
        """Index of the producing node on a live tape, else None."""
        if self._node is not None and self._tape.generation == self._gen:
            return self._node
        return None

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


class Parameter(Tensor):
    """Trainable tensor with its own gradient accumulator and Adam moments."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        tape = current_tape()
        out.requires_grad = True
        out._tape = tape
        out._gen = tape.generation
        out._node = tape.record(parents, backward_fn)
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise InvalidInput("backward() needs a scalar tensor")
    seed = np.ones_like(loss.data)
    start = loss.node_id()
    if start is None:
        if not loss.requires_grad:
            raise InvalidInput("loss is not on a live tape")
        _accumulate(loss, seed)
        return
    tape = loss._tape
    grads = {start: seed}
    for idx in range(start, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent.node_id() if parent._tape is tape else None
            if pid is not None:
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
            else:
                _accumulate(parent, pg)
    tape.clear()


def _accumulate(t: Tensor, g):
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shapes(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shapes(a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    y = 1.0 / a.data
    return _make(y, (a,), lambda g: (-g * y * y,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split form avoids overflow in exp for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul of {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw)


def concat(tensors: Sequence, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of nothing")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, key) -> Tensor:
    """Basic or integer-array indexing; the backward scatters with add.at."""
    a = as_tensor(a)
    if isinstance(key, Tensor):
        raise ShapeError("index with an integer array, not a Tensor")
    try:
        out = a.data[key]
    except IndexError as exc:
        raise ShapeError(str(exc)) from exc
    shape = a.shape

    def bw(g):
        z = np.zeros(shape)
        np.add.at(z, key, g)
        return (z,)

    return _make(out, (a,), bw)


def gather(a, idx) -> Tensor:
    """Rows of ``a`` (axis 0) picked by an integer array of any shape."""
    return getitem(a, np.asarray(idx, dtype=np.intp))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    s = a.shape
    return _make(out, (a,), lambda g: (g.reshape(s),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad axes {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    s = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, s).copy(),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reduce_max(a, axis) -> Tensor:
    """Max over one axis; the gradient goes to the first maximal entry."""
    a = as_tensor(a)
    ad = a.data
    arg = np.expand_dims(np.argmax(ad, axis=axis), axis)
    out = np.take_along_axis(ad, arg, axis=axis).squeeze(axis)

    def bw(g):
        z = np.zeros_like(ad)
        np.put_along_axis(z, arg, np.expand_dims(g, axis), axis=axis)
        return (z,)

    return _make(out, (a,), bw)


def l2_normalize(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    norm = np.sqrt((a.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise InvalidInput("l2_normalize of a zero vector")
    y = a.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (a,), bw)


def pointwise_linear(x, weight, bias=None) -> Tensor:
    """Per-point affine map over the last axis (a 1x1 convolution).

    ``weight`` has shape (in, out); ``bias`` shape (out,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"pointwise_linear {x.shape} with weight {weight.shape}")
    n_in, n_out = weight.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    w = weight.data
    out = x2 @ w
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (n_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({n_out},)")
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, n_out)
        grads = [(g2 @ w.T).reshape(lead + (n_in,)), x2.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return _make(out.reshape(lead + (n_out,)), tuple(parents), bw)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (B, C) logits against integer labels (B,)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(f"logits {logits.shape} vs labels {labels.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(labels.shape[0])
    loss = -logp[rows, labels].mean()
    p = np.exp(logp)

    def bw(g):
        d = p.copy()
        d[rows, labels] -= 1.0
        return (g * d / labels.shape[0],)

    return _make(np.array(loss), (logits,), bw)


def linear_solve(m, y) -> Tensor:
    """Solve ``M x = y`` (batched over leading axes) by LU with partial pivoting.

    Backward: ``dy = M^-T dx`` and ``dM = -dy x^T``.
    """
    m, y = as_tensor(m), as_tensor(y)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2] or m.shape[:-1] != y.shape:
        raise ShapeError(f"linear_solve of {m.shape} with {y.shape}")
    md = m.data
    if not (np.all(np.isfinite(md)) and np.all(np.isfinite(y.data))):
        raise InvalidInput("non-finite system")
    try:
        x = np.linalg.solve(md, y.data[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc

    def bw(g):
        gy = np.linalg.solve(np.swapaxes(md, -1, -2), g[..., None])[..., 0]
        return -gy[..., :, None] * x[..., None, :], gy

    return _make(x, (m, y), bw)


# ---------------------------------------------------------------- training

def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.grad = None


def sgd_step(params: Iterable[Parameter], lr: float):
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def adam_step(params: Iterable[Parameter], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    for p in params:
        if p.grad is None:
            continue
        p.step += 1
        p.m = beta1 * p.m + (1 - beta1) * p.grad
        p.v = beta2 * p.v + (1 - beta2) * p.grad ** 2
        m_hat = p.m / (1 - beta1 ** p.step)
        v_hat = p.v / (1 - beta2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


# ---------------------------------------------------------------- checkpoints

MAGIC = b"KNT1"


def save_checkpoint(path, params: dict[str, np.ndarray]):
    """Flat little-endian dump: magic, then (name, rank, dims, float64 data)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, arr in params.items():
            arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise InvalidInput(f"{path}: not a checkpoint (bad magic)")
    out, pos = {}, 4
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(buf):
                raise InvalidInput(f"{path}: truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise InvalidInput(f"{path}: truncated checkpoint") from exc
    return out


# ---------------------------------------------------------------- gradcheck

def rel_error(analytic, numeric, scale_by="entry") -> float:
    """Largest relative error between two gradient vectors.

    With ``scale_by="entry"`` each entry is compared relative to its own
    magnitude, floored at 1e-6 of the largest entry so exact zeros do not
    divide by zero.  ``"global"`` divides every difference by the largest
    entry instead, which tolerates rounding noise on near-zero components.
    """
    a, n = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    if scale_by == "global":
        return float(np.abs(a - n).max(initial=0.0) / scale)
    if scale_by != "entry":
        raise InvalidInput(f"unknown scale_by {scale_by!r}")
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-6 * scale)
    return float((np.abs(a - n) / denom).max(initial=0.0))


def gradcheck(fn, inputs: Sequence[np.ndarray] = (), h=1e-5, seed=0, params: Sequence[Parameter] = (),
              scale_by="entry") -> float:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` maps Tensors built from ``inputs`` to a Tensor; the checked scalar
    is ``sum(fn * R)`` for a fixed random ``R``.  ``params`` are perturbed in
    place as well.  Errors are relative to the largest gradient entry over
    everything checked (see :func:`rel_error` for ``scale_by``).
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    saved = [p.grad for p in params]
    zero_grad(params)
    with Tape():
        ts = [Tensor(x, requires_grad=True) for x in inputs]
        out = as_tensor(fn(*ts))
        proj = np.random.default_rng([seed, 7919]).standard_normal(out.shape)
        backward(sum(mul(out, proj)))
    analytic = [t.grad if t.grad is not None else np.zeros(t.shape) for t in ts]
    analytic += [p.grad if p.grad is not None else np.zeros(p.shape) for p in params]
    for p, g in zip(params, saved):
        p.grad = g

    def scalar():
        with no_grad():
            return float((as_tensor(fn(*[Tensor(x) for x in inputs])).data * proj).sum())

    numeric = []
    for arr in inputs + [p.data for p in params]:
        num = np.zeros_like(arr)
        flat, nflat = arr.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = scalar()
            flat[i] = old - h
            fm = scalar()
            flat[i] = old
            nflat[i] = (fp - fm) / (2 * h)
        numeric.append(num)
    if not numeric:
        return 0.0
    return rel_error(np.concatenate([a.reshape(-1) for a in analytic]),
                     np.concatenate([n.reshape(-1) for n in numeric]), scale_by)


def jacobian_check(fn, inputs: Sequence[np.ndarray], h=1e-5) -> float:
    """Entrywise comparison of the full Jacobian of ``fn`` (tape, one backward
    per output entry) against central differences of the output vector.

    Stricter than :func:`gradcheck`: each entry's rounding noise scales with
    its own output rather than with a projected sum.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    with no_grad():
        out0 = as_tensor(fn(*[Tensor(x) for x in inputs])).data
    n_out = out0.size
    analytic = [np.zeros((n_out, x.size)) for x in inputs]
    for k in range(n_out):
        with Tape():
            ts = [Tensor(x, requires_grad=True) for x in inputs]
            out = as_tensor(fn(*ts))
            onehot = np.zeros(n_out)
            onehot[k] = 1.0
            backward(sum(mul(reshape(out, (-1,)), onehot)))
        for a, t in zip(analytic, ts):
            if t.grad is not None:
                a[k] = t.grad.reshape(-1)
    numeric = []
    for x in inputs:
        J = np.zeros((n_out, x.size))
        flat = x.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            with no_grad():
                flat[i] = old + h
                fp = as_tensor(fn(*[Tensor(v) for v in inputs])).data.reshape(-1)
                flat[i] = old - h
                fm = as_tensor(fn(*[Tensor(v) for v in inputs])).data.reshape(-1)
            flat[i] = old
            J[:, i] = (fp - fm) / (2 * h)
        numeric.append(J)
    return rel_error(np.concatenate([a.reshape(-1) for a in analytic]),
                     np.concatenate([n.reshape(-1) for n in numeric]))
