"""
Differentiable operator set.

Each op registers a numpy forward and a VJP built from other ops in this
module, so gradients can themselves be differentiated. Binary arithmetic
broadcasts numpy-style; gradients are summed back with ``sum_to``.
"""

import logging
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import ShapeError
from core.tensor import Node, const, forward_op, register_op

logger = logging.getLogger(__name__)

Operand = Union[Node, float, int, np.ndarray]

# Keeps atan2's derivative finite where both gradient components vanish.
ATAN2_EPS = 1e-30


def _node(x: Operand) -> Node:
    return x if isinstance(x, Node) else const(x)


def _need(p: Node) -> bool:
    return p.requires_grad


def _axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ── Shape checks ────────────────────────────────────────────────────────

def _check_broadcast(name: str):
    def check(a, b, **_):
        try:
            np.broadcast_shapes(a, b)
        except ValueError:
            raise ShapeError(name, a, b) from None
    return check


def _check_reshape(x, shape):
    if int(np.prod(x)) != int(np.prod(shape)):
        raise ShapeError("reshape", x, tuple(shape))


def _check_matmul(a, b):
    if len(a) != 2 or len(b) != 2 or a[1] != b[0]:
        raise ShapeError("matmul", a, b)


def _check_conv(x, w, padding):
    if len(x) != 4 or len(w) != 4 or x[1] != w[1]:
        raise ShapeError("conv2d", x, w)
    if x[2] + 2 * padding < w[2] or x[3] + 2 * padding < w[3]:
        raise ShapeError("conv2d", x, w, detail="kernel larger than padded input")


# ── Broadcasting helpers ────────────────────────────────────────────────

def _sum_to_forward(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _unbroadcast(g: Node, shape) -> Node:
    return g if g.shape == tuple(shape) else sum_to(g, shape)


# ── Arithmetic ──────────────────────────────────────────────────────────

def _add_vjp(node, g):
    a, b = node.parents
    return (_unbroadcast(g, a.shape) if _need(a) else None,
            _unbroadcast(g, b.shape) if _need(b) else None)


def _sub_vjp(node, g):
    a, b = node.parents
    return (_unbroadcast(g, a.shape) if _need(a) else None,
            _unbroadcast(neg(g), b.shape) if _need(b) else None)


def _mul_vjp(node, g):
    a, b = node.parents
    return (_unbroadcast(mul(g, b), a.shape) if _need(a) else None,
            _unbroadcast(mul(g, a), b.shape) if _need(b) else None)


def _div_vjp(node, g):
    a, b = node.parents
    return (_unbroadcast(div(g, b), a.shape) if _need(a) else None,
            _unbroadcast(neg(div(mul(g, node), b)), b.shape) if _need(b) else None)


register_op("add", np.add, _add_vjp, _check_broadcast("add"))
register_op("sub", np.subtract, _sub_vjp, _check_broadcast("sub"))
register_op("mul", np.multiply, _mul_vjp, _check_broadcast("mul"))
register_op("div", np.divide, _div_vjp, _check_broadcast("div"))
register_op("neg", np.negative, lambda node, g: (neg(g),))


def add(a: Operand, b: Operand) -> Node:
    return forward_op("add", [_node(a), _node(b)])


def sub(a: Operand, b: Operand) -> Node:
    return forward_op("sub", [_node(a), _node(b)])


def mul(a: Operand, b: Operand) -> Node:
    return forward_op("mul", [_node(a), _node(b)])


def div(a: Operand, b: Operand) -> Node:
    return forward_op("div", [_node(a), _node(b)])


def neg(a: Operand) -> Node:
    return forward_op("neg", [_node(a)])


def square(a: Operand) -> Node:
    a = _node(a)
    return mul(a, a)


# ── Elementwise ─────────────────────────────────────────────────────────

def _sigmoid_forward(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


register_op("exp", np.exp, lambda node, g: (mul(g, node),))
register_op("log", np.log, lambda node, g: (div(g, node.parents[0]),))
register_op("sqrt", np.sqrt, lambda node, g: (div(g, mul(node, 2.0)),))
register_op("abs", np.abs, lambda node, g: (mul(g, const(np.sign(node.parents[0].value))),))
register_op(
    "relu",
    lambda x: np.maximum(x, 0.0),
    lambda node, g: (mul(g, const(node.parents[0].value > 0)),),
)
register_op("sigmoid", _sigmoid_forward, lambda node, g: (mul(g, mul(node, sub(1.0, node))),))
register_op(
    "clip",
    lambda x, lo, hi: np.clip(x, lo, hi),
    lambda node, g: (mul(g, const((node.parents[0].value >= node.attrs["lo"])
                                  & (node.parents[0].value <= node.attrs["hi"]))),),
)
register_op("mod", lambda x, period: np.mod(x, period), lambda node, g: (g,))


def _atan2_vjp(node, g):
    y, x = node.parents
    den = add(add(square(x), square(y)), ATAN2_EPS)
    return (div(mul(g, x), den) if _need(y) else None,
            div(mul(g, neg(y)), den) if _need(x) else None)


register_op("atan2", np.arctan2, _atan2_vjp, _check_broadcast("atan2"))


def exp(x: Operand) -> Node:
    return forward_op("exp", [_node(x)])


def log(x: Operand) -> Node:
    return forward_op("log", [_node(x)])


def sqrt(x: Operand) -> Node:
    return forward_op("sqrt", [_node(x)])


def absolute(x: Operand) -> Node:
    return forward_op("abs", [_node(x)])


def relu(x: Operand) -> Node:
    """max(x, 0); the derivative at exactly 0 is 0."""
    return forward_op("relu", [_node(x)])


def sigmoid(x: Operand) -> Node:
    return forward_op("sigmoid", [_node(x)])


def clip(x: Operand, lo: float, hi: float) -> Node:
    return forward_op("clip", [_node(x)], {"lo": float(lo), "hi": float(hi)})


def mod(x: Operand, period: float) -> Node:
    """Wrap into [0, period); treated as identity by the gradient."""
    return forward_op("mod", [_node(x)], {"period": float(period)})


def atan2(y: Operand, x: Operand) -> Node:
    return forward_op("atan2", [_node(y), _node(x)])


# ── Reductions and shape ────────────────────────────────────────────────

def _sum_vjp(node, g):
    x = node.parents[0]
    axes = node.attrs["axis"]
    kept = tuple(1 if i in axes else d for i, d in enumerate(x.shape))
    return (broadcast_to(reshape(g, kept), x.shape),)


def _max_vjp(node, g):
    x = node.parents[0].value
    idx = np.argmax(x, axis=-1)
    mask = np.zeros_like(x)
    np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
    return (mul(broadcast_to(reshape(g, g.shape + (1,)), x.shape), const(mask)),)


register_op(
    "sum",
    lambda x, axis, keepdims: np.sum(x, axis=axis, keepdims=keepdims),
    _sum_vjp,
)
register_op("sum_to", _sum_to_forward, lambda node, g: (broadcast_to(g, node.parents[0].shape),))
register_op(
    "broadcast_to",
    lambda x, shape: np.array(np.broadcast_to(x, shape)),
    lambda node, g: (sum_to(g, node.parents[0].shape),),
)
register_op(
    "reshape",
    lambda x, shape: np.reshape(x, shape),
    lambda node, g: (reshape(g, node.parents[0].shape),),
    _check_reshape,
)
register_op(
    "transpose",
    lambda x, axes: np.transpose(x, axes),
    lambda node, g: (transpose(g, tuple(np.argsort(node.attrs["axes"]))),),
)
register_op("max", lambda x: np.max(x, axis=-1), _max_vjp)


def reduce_sum(x: Operand, axis=None, keepdims: bool = False) -> Node:
    x = _node(x)
    return forward_op("sum", [x], {"axis": _axes(axis, x.ndim), "keepdims": keepdims})


def reduce_mean(x: Operand, axis=None, keepdims: bool = False) -> Node:
    x = _node(x)
    axes = _axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(reduce_sum(x, axes, keepdims), 1.0 / count)


def reduce_max(x: Operand) -> Node:
    """Maximum over the last axis; the gradient goes to the first maximal entry."""
    return forward_op("max", [_node(x)])


def broadcast_to(x: Operand, shape) -> Node:
    x = _node(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        np.broadcast_shapes(x.shape, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    return forward_op("broadcast_to", [x], {"shape": shape})


def sum_to(x: Operand, shape) -> Node:
    x = _node(x)
    return forward_op("sum_to", [x], {"shape": tuple(shape)})


def reshape(x: Operand, shape) -> Node:
    x = _node(x)
    shape = tuple(int(s) for s in shape)
    if x.shape == shape:
        return x
    return forward_op("reshape", [x], {"shape": shape})


def transpose(x: Operand, axes: Sequence[int]) -> Node:
    return forward_op("transpose", [_node(x)], {"axes": tuple(int(a) for a in axes)})


def max_pool2d(x: Node, size: int = 2) -> Node:
    """Non-overlapping max pooling of an (N, C, H, W) node."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError("max_pool2d", x.shape, detail=f"spatial extent not divisible by {size}")
    r = reshape(x, (n, c, h // size, size, w // size, size))
    r = transpose(r, (0, 1, 2, 4, 3, 5))
    return reduce_max(reshape(r, (n, c, h // size, w // size, size * size)))


# ── Indexing and joining ────────────────────────────────────────────────

def _scatter_forward(g, key, shape):
    out = np.zeros(shape)
    out[key] = g
    return out


def _concat_vjp(node, g):
    axis = node.attrs["axis"]
    grads = []
    start = 0
    for p in node.parents:
        stop = start + p.shape[axis]
        key = (slice(None),) * axis + (slice(start, stop),)
        grads.append(getitem(g, key) if _need(p) else None)
        start = stop
    return grads


def _check_concat(*shapes, axis):
    first = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(first) or any(a != b for i, (a, b) in enumerate(zip(s, first)) if i != axis):
            raise ShapeError("concat", first, s)


register_op(
    "getitem",
    lambda x, key: np.array(x[key]),
    lambda node, g: (scatter(g, node.attrs["key"], node.parents[0].shape),),
)
register_op(
    "scatter",
    _scatter_forward,
    lambda node, g: (getitem(g, node.attrs["key"]),),
)
register_op(
    "concat",
    lambda *xs, axis: np.concatenate(xs, axis=axis),
    _concat_vjp,
    _check_concat,
)


def _normalize_key(key: Any) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer)) and k is not Ellipsis:
            raise ShapeError("getitem", (), detail=f"only basic indexing is supported, got {type(k).__name__}")
    return key


def getitem(x: Operand, key) -> Node:
    return forward_op("getitem", [_node(x)], {"key": _normalize_key(key)})


def scatter(g: Operand, key, shape) -> Node:
    """Place ``g`` at ``key`` inside a zero array of ``shape``."""
    return forward_op("scatter", [_node(g)], {"key": _normalize_key(key), "shape": tuple(shape)})


def concat(xs: Sequence[Operand], axis: int = 0) -> Node:
    nodes = [_node(x) for x in xs]
    axis = axis % nodes[0].ndim
    return forward_op("concat", nodes, {"axis": axis})


# ── Linear layers ───────────────────────────────────────────────────────

def _matmul_vjp(node, g):
    a, b = node.parents
    return (matmul(g, transpose(b, (1, 0))) if _need(a) else None,
            matmul(transpose(a, (1, 0)), g) if _need(b) else None)


register_op("matmul", np.matmul, _matmul_vjp, _check_matmul)


def matmul(a: Operand, b: Operand) -> Node:
    return forward_op("matmul", [_node(a), _node(b)])


def _windows(x: np.ndarray, padding: int, kh: int, kw: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (kh, kw), axis=(2, 3))


def _conv_forward(x, w, padding):
    return np.einsum("nchwij,ocij->nohw", _windows(x, padding, *w.shape[2:]), w, optimize=True)


def _conv_grad_weight_forward(x, g, padding, kernel):
    return np.einsum("nchwij,nohw->ocij", _windows(x, padding, *kernel), g, optimize=True)


def _conv_grad_input_forward(g, w, padding, size):
    n, _, ho, wo = g.shape
    _, c, kh, kw = w.shape
    h, wd = size
    dx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += np.einsum("nohw,oc->nchw", g, w[:, :, i, j], optimize=True)
    return dx[:, :, padding:padding + h, padding:padding + wd]


def _conv_vjp(node, g):
    x, w = node.parents
    p = node.attrs["padding"]
    return (conv2d_grad_input(g, w, p, x.shape[2:]) if _need(x) else None,
            conv2d_grad_weight(x, g, p, w.shape[2:]) if _need(w) else None)


def _conv_grad_input_vjp(node, dx):
    g, w = node.parents
    p = node.attrs["padding"]
    return (conv2d(dx, w, p) if _need(g) else None,
            conv2d_grad_weight(dx, g, p, w.shape[2:]) if _need(w) else None)


def _conv_grad_weight_vjp(node, dw):
    x, g = node.parents
    p = node.attrs["padding"]
    return (conv2d_grad_input(g, dw, p, x.shape[2:]) if _need(x) else None,
            conv2d(x, dw, p) if _need(g) else None)


register_op("conv2d", _conv_forward, _conv_vjp, _check_conv)
register_op("conv2d_grad_input", _conv_grad_input_forward, _conv_grad_input_vjp)
register_op("conv2d_grad_weight", _conv_grad_weight_forward, _conv_grad_weight_vjp)


def conv2d(x: Operand, w: Operand, padding: int = 0) -> Node:
    """Stride-1 cross-correlation of (N, C, H, W) with (O, C, kh, kw)."""
    return forward_op("conv2d", [_node(x), _node(w)], {"padding": int(padding)})


def conv2d_grad_input(g: Operand, w: Operand, padding: int, size) -> Node:
    return forward_op("conv2d_grad_input", [_node(g), _node(w)],
                      {"padding": int(padding), "size": tuple(size)})


def conv2d_grad_weight(x: Operand, g: Operand, padding: int, kernel) -> Node:
    return forward_op("conv2d_grad_weight", [_node(x), _node(g)],
                      {"padding": int(padding), "kernel": tuple(kernel)})


# ── Softmax family ──────────────────────────────────────────────────────

def _softmax_forward(x, axis):
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _softmax_vjp(node, g):
    axis = node.attrs["axis"]
    return (mul(node, sub(g, reduce_sum(mul(g, node), axis, keepdims=True))),)


def _softmax_ce_forward(logits, targets):
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(targets * log_probs).sum(axis=1)


def _softmax_ce_vjp(node, g):
    logits, targets = node.parents
    n = logits.shape[0]
    return (mul(reshape(g, (n, 1)), sub(softmax(logits, axis=1), targets)), None)


def _check_ce(logits, targets):
    if len(logits) != 2 or tuple(logits) != tuple(targets):
        raise ShapeError("softmax_cross_entropy", logits, targets)


register_op("softmax", _softmax_forward, _softmax_vjp)
register_op("softmax_cross_entropy", _softmax_ce_forward, _softmax_ce_vjp, _check_ce)


def softmax(x: Operand, axis: int = -1) -> Node:
    x = _node(x)
    return forward_op("softmax", [x], {"axis": axis % x.ndim})


def softmax_cross_entropy(logits: Node, targets: Operand) -> Node:
    """Per-sample CE of (N, K) logits against (N, K) target distributions.

    Targets are labels: no gradient flows into them.
    """
    return forward_op("softmax_cross_entropy", [_node(logits), _node(targets)])


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out
