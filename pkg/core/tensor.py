"""
Graph nodes, the operator registry and the gradient tape.

Every array in a differentiable computation lives in a :class:`Node`: an
immutable float64 value plus the op kind and parents that produced it.
Operators are registered once (see ``core/ops.py``) as an :class:`OpKind`
with a numpy forward and a vector-Jacobian product written in terms of other
registered ops, which is what lets ``core/autodiff.py`` differentiate through
a gradient.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import GraphError, NumericalError, ShapeError

logger = logging.getLogger(__name__)

# Dense values are plain float64 arrays, write-protected once they enter a graph.
Tensor = np.ndarray

_state = threading.local()


def as_tensor(data: Any, check_finite: bool = True) -> Tensor:
    """Copy ``data`` into a read-only float64 array, rejecting NaN/Inf."""
    arr = np.array(data, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise NumericalError(f"tensor of shape {arr.shape} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


# ── Grad mode ───────────────────────────────────────────────────────────

def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class set_grad_enabled:
    """Context manager switching graph construction on or off."""

    def __init__(self, mode: bool):
        self.mode = mode
        self._prev = True

    def __enter__(self):
        self._prev = is_grad_enabled()
        _state.grad_enabled = self.mode
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.grad_enabled = self._prev
        return False


class no_grad(set_grad_enabled):
    """Evaluate ops eagerly: results are constants and nothing is recorded."""

    def __init__(self):
        super().__init__(False)


# ── Operator registry ───────────────────────────────────────────────────

@dataclass(frozen=True)
class OpKind:
    """A registered operator.

    ``forward(*arrays, **attrs)`` returns the output array.
    ``vjp(node, grad)`` returns one gradient Node (or None) per parent.
    ``check(*shapes, **attrs)`` raises ShapeError for incompatible inputs.
    """
    name: str
    forward: Optional[Callable[..., np.ndarray]]
    vjp: Optional[Callable[["Node", "Node"], Sequence[Optional["Node"]]]]
    check: Optional[Callable[..., None]] = None


_REGISTRY: Dict[str, OpKind] = {}


def register_op(
    name: str,
    forward: Optional[Callable[..., np.ndarray]],
    vjp: Optional[Callable],
    check: Optional[Callable[..., None]] = None,
) -> OpKind:
    if name in _REGISTRY:
        raise GraphError(f"op kind '{name}' registered twice")
    kind = OpKind(name, forward, vjp, check)
    _REGISTRY[name] = kind
    return kind


def get_op(name: str) -> OpKind:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise GraphError(f"unknown op kind '{name}'") from None


register_op("leaf", None, None)
register_op("const", None, None)


# ── Nodes ───────────────────────────────────────────────────────────────

class Node:
    """One value in the differentiable graph.

    Nodes hash by identity, so they can key gradient maps. Arithmetic
    operators build new nodes through ``core.ops``.
    """

    __slots__ = ("value", "op", "parents", "attrs", "requires_grad", "name", "tape", "index", "grad")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(
        self,
        value: np.ndarray,
        op: str,
        parents: Tuple["Node", ...] = (),
        attrs: Optional[Mapping[str, Any]] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = value
        self.op = op
        self.parents = parents
        self.attrs = dict(attrs or {})
        self.requires_grad = requires_grad
        self.name = name
        self.tape: Optional["GradientTape"] = None
        self.index = -1
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Node{label}(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # Operator sugar; imports are deferred because core.ops imports this module.
    def __add__(self, other):
        from core import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from core import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from core import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from core import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from core import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from core import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from core import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from core import ops
        return ops.div(other, self)

    def __neg__(self):
        from core import ops
        return ops.neg(self)

    def __getitem__(self, key):
        from core import ops
        return ops.getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Node":
        from core import ops
        return ops.reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Node":
        from core import ops
        return ops.reduce_mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Node":
        from core import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


# ── Tape ────────────────────────────────────────────────────────────────

def _tape_stack() -> List["GradientTape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["GradientTape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Ordered record of the nodes created while the tape is active.

    Tapes are thread-local and nest; nodes go to the innermost one.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.active = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        self.active = True
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        self.active = False
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node: Node) -> bool:
        return node.tape is self

    def record(self, node: Node) -> None:
        node.tape = self
        node.index = len(self.nodes)
        self.nodes.append(node)

    def leaves(self, requires_grad: bool = True) -> List[Node]:
        return [n for n in self.nodes if n.op == "leaf" and (n.requires_grad or not requires_grad)]

    def replay(self) -> List[np.ndarray]:
        """Recompute every recorded forward value in order."""
        values: Dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            kind = get_op(node.op)
            if kind.forward is None:
                value = node.value
            else:
                args = [values.get(id(p), p.value) for p in node.parents]
                value = np.asarray(kind.forward(*args, **node.attrs), dtype=np.float64)
            values[id(node)] = value
            out.append(value)
        return out


def _record(node: Node) -> Node:
    tape = active_tape()
    if tape is not None:
        tape.record(node)
    return node


# ── Constructors ────────────────────────────────────────────────────────

def leaf(data: Any, requires_grad: bool = True, name: Optional[str] = None) -> Node:
    """Create an input node; values must be finite with positive extents."""
    value = as_tensor(data)
    if any(d <= 0 for d in value.shape):
        raise ShapeError("leaf", value.shape, detail="extents must be positive")
    node = Node(value, "leaf", (), None, requires_grad and is_grad_enabled(), name)
    if is_grad_enabled():
        _record(node)
    return node


def const(data: Any, name: Optional[str] = None) -> Node:
    """Wrap a non-differentiated value (masks, thresholds, labels)."""
    if isinstance(data, Node):
        return data
    value = np.array(data, dtype=np.float64)
    value.setflags(write=False)
    node = Node(value, "const", (), None, False, name)
    if is_grad_enabled():
        _record(node)
    return node


def forward_op(kind: str, inputs: Sequence[Node], attrs: Optional[Mapping[str, Any]] = None) -> Node:
    """Apply a registered op to ``inputs`` and record the result on the active tape."""
    op = get_op(kind)
    if op.forward is None:
        raise GraphError(f"op kind '{kind}' has no forward")
    attrs = dict(attrs or {})
    for inp in inputs:
        if not isinstance(inp, Node):
            raise GraphError(f"{kind}: inputs must be Nodes, got {type(inp).__name__}")
    if op.check is not None:
        op.check(*(inp.shape for inp in inputs), **attrs)
    value = np.asarray(op.forward(*(inp.value for inp in inputs), **attrs), dtype=np.float64)
    value.setflags(write=False)
    if not is_grad_enabled():
        return Node(value, kind, (), attrs, False)
    requires = any(inp.requires_grad for inp in inputs)
    return _record(Node(value, kind, tuple(inputs), attrs, requires))


# ── Data-dependent constants ────────────────────────────────────────────

class FrozenConstants:
    """Records data-dependent constants and replays them in call order.

    Quantile thresholds are constants of the differentiated function but are
    recomputed from data on every call; a finite-difference oracle has to hold
    them fixed to compare like with like.
    """

    def __init__(self):
        self.values: List[np.ndarray] = []
        self._cursor: Optional[int] = None

    def __enter__(self) -> "FrozenConstants":
        stack = getattr(_state, "frozen", None)
        if stack is None:
            stack = []
            _state.frozen = stack
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.frozen.pop()
        return False

    def freeze(self) -> None:
        self._cursor = 0

    rewind = freeze

    def resolve(self, compute: Callable[[], np.ndarray]) -> np.ndarray:
        if self._cursor is None:
            value = compute()
            self.values.append(value)
            return value
        if self._cursor >= len(self.values):
            raise GraphError("frozen constants exhausted: call sequence differs from the recording")
        value = self.values[self._cursor]
        self._cursor += 1
        return value


def data_constant(compute: Callable[[], np.ndarray]) -> np.ndarray:
    stack = getattr(_state, "frozen", None)
    if not stack:
        return compute()
    return stack[-1].resolve(compute)
