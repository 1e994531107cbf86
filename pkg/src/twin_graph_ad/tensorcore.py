"""Dense tensors with reverse-mode differentiation.

Every op returns a new :class:`Tensor`; when any input requires a gradient the
result records its parents and a closure mapping the output gradient to the
input gradients. :func:`backward` walks that record once in reverse
topological order and accumulates into the ``grad`` of leaf tensors.
"""
from __future__ import annotations

import contextlib
import json
from pathlib import Path

import numpy as np

from . import kernels

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed", "name")

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = "leaf"
        self._consumed = False
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        extra = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{extra})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def __pow__(self, exponent):
        return power(self, exponent)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

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

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or np.float64)
    return Tensor(arr)


def _pair(a, b):
    """Coerce a binary op's operands; a non-Tensor side takes the Tensor side's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def parameter(data, name=None):
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


def _make(data, parents, backward, op):
    if type(data) is np.ndarray and data.dtype.kind == "f":
        # internal results skip the coercion in Tensor.__init__
        out = Tensor.__new__(Tensor)
        out.data, out.requires_grad, out.grad, out._parents = data, False, None, ()
        out._backward, out._op, out._consumed, out.name = None, "leaf", False, None
    else:
        out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _apply(ufunc, a, b, opname):
    try:
        return ufunc(a.data, b.data)
    except ValueError:
        raise ValueError(f"{opname}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise -------------------------------------------------------------
def add(a, b):
    a, b = _pair(a, b)
    out = _apply(np.add, a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), back, "add")


def sub(a, b):
    a, b = _pair(a, b)
    out = _apply(np.subtract, a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), back, "sub")


def mul(a, b):
    a, b = _pair(a, b)
    out = _apply(np.multiply, a, b, "mul")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), back, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out = _apply(np.divide, a, b, "div")

    def back(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _make(out, (a, b), back, "div")


def scale(a, c):
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    if p == 2.0:
        return mul(a, a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def reciprocal(a):
    a = as_tensor(a)
    out = 1.0 / a.data
    return _make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, a.data * slope)
    return _make(out, (a,), lambda g: (np.where(pos, g, g * slope),), "leaky_relu")


def masked_fill(a, mask, value):
    """Replace entries where ``mask`` is true with ``value``; no gradient flows there."""
    a = as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(a.shape, mask.shape)
    except ValueError:
        raise ValueError(f"masked_fill: mask shape {mask.shape} vs tensor {a.shape}") from None
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _make(out, (a,), lambda g: (_unbroadcast(np.where(mask, 0.0, g), a.shape),), "masked_fill")


def dropout(a, p, training, rng):
    """Inverted dropout; identity (same object) when not training or p == 0."""
    if not training or p <= 0.0:
        return a
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    a = as_tensor(a)
    keep = (rng.random(a.shape, dtype=np.float32) >= p).astype(a.dtype)
    keep *= a.dtype.type(1.0 / (1.0 - p))
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- linear algebra ----------------------------------------------------------
def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        # one gemm instead of a loop over stacked slices
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(lead + (b.shape[-1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), back, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from None

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), back, "matmul")


# -- reductions and normalisation ---------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), back, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis, keepdims), 1.0 / max(count, 1))


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back, "softmax")


def layer_norm(a, axis=-1, eps=1e-5):
    """Standardise along ``axis`` (no affine part)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    centred = a.data - mu
    var = (centred * centred).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centred * inv

    def back(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _make(xhat, (a,), back, "layer_norm")


# -- shape manipulation ------------------------------------------------------
def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(a, ax1, ax2):
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), back, "concat")


def getitem(a, index):
    a = as_tensor(a)
    out = a.data[index]
    fancy = isinstance(index, (list, np.ndarray)) or (
        isinstance(index, tuple) and any(isinstance(i, (list, np.ndarray)) for i in index)
    )

    def back(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(np.array(out, copy=True) if np.ndim(out) else np.asarray(out), (a,), back, "getitem")


def take(a, indices, axis=0):
    """Gather along ``axis``; output shape is a.shape[:axis] + indices.shape + a.shape[axis+1:].

    The backward pass is a scatter-add handled by the compiled kernel.
    """
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = np.ascontiguousarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise IndexError(f"take: index out of range for axis {ax} of size {a.shape[ax]}")
    out = np.take(a.data, idx, axis=ax)
    flat = idx.reshape(-1)

    def back(g):
        # move the gathered axes to the front, flatten to rows, scatter
        nidx = idx.ndim
        g_front = np.moveaxis(g, tuple(range(ax, ax + nidx)), tuple(range(nidx)))
        rest = g_front.shape[nidx:]
        g2 = np.ascontiguousarray(g_front.reshape(flat.size, -1))
        acc_shape = (a.shape[ax],) + a.shape[:ax] + a.shape[ax + 1:]
        acc = np.zeros((a.shape[ax], g2.shape[1]), dtype=g.dtype)
        kernels.scatter_add_rows(acc, flat, g2)
        acc = acc.reshape((a.shape[ax],) + rest)
        assert acc.shape == acc_shape
        return (np.moveaxis(acc, 0, ax),)

    return _make(out, (a,), back, "take")


# -- differentiation -----------------------------------------------------------
def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    The recorded graph is released afterwards; a second call on the same loss
    raises ``RuntimeError``.
    """
    if loss._consumed:
        raise RuntimeError("backward() already ran on this graph; run the forward pass again")
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    order = _toposort(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


def grad_check(f, params, eps=1e-4, tol=1e-3, max_entries=None, rng=None):
    """Compare analytic gradients of scalar ``f()`` against central differences.

    The error for an entry is ``|analytic - numeric| / max(1, |analytic|)``.
    Returns a dict with counts, the worst error and the failing entries.
    ``max_entries`` subsamples entries per parameter (with ``rng``).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    failures, errors = [], []
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            rng = rng or np.random.default_rng(0)
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[pi].reshape(-1)
        for j in entries:
            orig = flat[j]
            with no_grad():
                flat[j] = orig + eps
                up = f().item()
                flat[j] = orig - eps
                down = f().item()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            err = abs(a_flat[j] - numeric) / max(1.0, abs(a_flat[j]))
            errors.append(err)
            if not err <= tol:
                failures.append({"param": p.name or pi, "index": int(j), "analytic": float(a_flat[j]),
                                 "numeric": float(numeric), "error": float(err)})
    n = len(errors)
    return {
        "checked": n,
        "failed": len(failures),
        "pass_fraction": 1.0 if n == 0 else 1.0 - len(failures) / n,
        "max_error": max(errors) if errors else 0.0,
        "failures": failures,
        "ok": not failures,
    }


# -- checkpoint container ------------------------------------------------------
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
FORMAT = "twin-graph-ad/tensors-v1"


def save_tensors(directory, arrays, metadata=None):
    """Write ``arrays`` (name -> ndarray) as a JSON manifest plus one little-endian blob."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / BLOB, "wb") as fh:
        for name in sorted(arrays):
            arr = np.asarray(arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "tensors": entries, "metadata": metadata or {}}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_tensors(directory, expected_shapes=None):
    """Inverse of :func:`save_tensors`. Returns (arrays, metadata).

    ``expected_shapes`` (name -> shape) is checked against the manifest; any
    missing, extra or mis-shaped tensor raises ``ValueError``.
    """
    directory = Path(directory)
    manifest_path = directory / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing tensor manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unknown tensor container format {manifest.get('format')!r}")
    blob = (directory / BLOB).read_bytes()
    arrays = {}
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(blob):
            raise ValueError(f"tensor {entry['name']} runs past end of blob")
        arr = np.frombuffer(blob[start:stop], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    if expected_shapes is not None:
        want = {k: tuple(v) for k, v in expected_shapes.items()}
        have = {k: tuple(v.shape) for k, v in arrays.items()}
        if want != have:
            missing = sorted(set(want) - set(have))
            extra = sorted(set(have) - set(want))
            bad = sorted(k for k in set(want) & set(have) if want[k] != have[k])
            raise ValueError(f"checkpoint shape manifest mismatch: missing={missing} extra={extra} "
                             f"mismatched={[(k, have[k], want[k]) for k in bad]}")
    return arrays, manifest.get("metadata", {})
