"""Small dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Every primitive records its inputs and a
closure that maps the output gradient to input gradients; :func:`backward`
walks that graph once in reverse topological order. Only what the network
needs is here.
"""

from __future__ import annotations

import contextlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import BadTarget, FormatError, NonScalarLoss, NumericError, ShapeError

MASK_FILL = -1e9
_grad_enabled = True
_branches = None


@contextlib.contextmanager
def record_branches():
    """Collect the branch taken by every relu / max in the block.

    Yields a list that fills with one boolean or index array per kink-bearing
    op; two evaluations lie on the same smooth piece iff their lists match.
    """
    global _branches
    prev, _branches = _branches, []
    try:
        yield _branches
    finally:
        _branches = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad, name)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward_fn, op):
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add {a.shape} + {b.shape}: {exc}") from None

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw, "add")


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul {a.shape} * {b.shape}: {exc}") from None

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), bw, "mul")


def scale(a, c):
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b):
    """Batched matrix product over the last two axes (numpy broadcasting)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}")
    if b.data.ndim == 2:
        # fold leading axes into one GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def bw(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), bw, "matmul")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul {a.shape} @ {b.shape}: {exc}") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), bw, "matmul")


def relu(x):
    mask = x.data > 0
    if _branches is not None:
        _branches.append(mask)
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def layer_norm(x, gain, bias, eps=1e-5):
    """Normalize over the last axis, then apply a learnable gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} for {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx = g * gain.data
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bw, "layer_norm")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


def log_softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def embedding_rows(table, index):
    """Row lookup: integer indices pick rows; a weight tensor mixes them."""
    if isinstance(index, Tensor):
        return matmul(index, table)
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError("embedding index must be integers or a weight Tensor")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _result(out, (table,), bw, "embedding_rows")


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(out, tuple(tensors), bw, "concat")


def reshape(x, shape):
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape {x.shape} -> {shape}: {exc}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose axes {axes} for {x.shape}")
    inverse = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def mask_fill(x, mask, value=MASK_FILL):
    """Replace entries where ``mask`` is True (broadcast) by ``value``."""
    mask = np.asarray(mask, dtype=bool)
    try:
        out = np.where(mask, value, x.data)
    except ValueError as exc:
        raise ShapeError(f"mask {mask.shape} for {x.shape}: {exc}") from None

    def bw(g):
        return (_unbroadcast(np.where(mask, 0.0, g), x.shape),)

    return _result(out, (x,), bw, "mask_fill")


def max_axis(x, axis):
    """Max over one axis; the gradient goes to the first maximal entry."""
    arg = x.data.argmax(axis=axis)
    if _branches is not None:
        _branches.append(arg)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(out, (x,), bw, "max_axis")


def sum_all(x):
    return _result(np.array(x.data.sum()), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def cross_entropy(logits, target):
    """Summed negative log-likelihood of integer ``target`` under softmax(logits).

    ``logits`` has shape (..., k) and ``target`` the leading shape (...).
    """
    target = np.asarray(target)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ShapeError(f"targets {target.shape} for logits {logits.shape}")
    if target.size and (not np.issubdtype(target.dtype, np.integer)
                        or target.min() < 0 or target.max() >= k):
        raise BadTarget(f"targets must be integers in 0..{k - 1}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=-1, keepdims=True)
    picked = np.take_along_axis(z, target[..., None], axis=-1)
    loss = float((np.log(denom) - picked).sum())

    def bw(g):
        grad = e / denom
        np.put_along_axis(grad, target[..., None],
                          np.take_along_axis(grad, target[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * g,)

    return _result(np.array(loss), (logits,), bw, "cross_entropy")


# ---------------------------------------------------------------- backward

def _topo_order(root):
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate d loss / d leaf into ``.grad`` of every leaf requiring grad."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimizer

def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update, in place on the ``params`` arrays.

    ``state`` holds ``t`` plus first/second moment arrays keyed like
    ``params``; it is created on first use. Returns ``(params, state)``.
    """
    if not state:
        state.update(t=0, m={k: np.zeros_like(v) for k, v in params.items()},
                     v={k: np.zeros_like(v) for k, v in params.items()})
    state["t"] += 1
    t = state["t"]
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ShapeError(f"grad for {k}: {g.shape} vs param {p.shape}")
        m, v = state["m"][k], state["v"][k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params  # name -> Tensor
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = {}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def step(self):
        arrays = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        adam_step(arrays, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"P2CK"


def save_checkpoint(path, arrays, meta=None):
    """``P2CK`` + u32 header length + JSON header + little-endian f64 payload."""
    names = sorted(arrays)
    entries, offset, blobs = {}, 0, []
    for name in names:
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries[name] = {"shape": list(a.shape), "offset": offset}
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns ``(arrays, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a P2CK checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    base = 8 + hlen
    arrays = {}
    for name, info in header["tensors"].items():
        shape = tuple(info["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        start = base + info["offset"]
        if start + 8 * count > len(raw):
            raise FormatError(f"{path}: truncated tensor {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                     offset=start).reshape(shape).astype(np.float64)
    return arrays, header.get("meta", {})
