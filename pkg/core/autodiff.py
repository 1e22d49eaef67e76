"""Reverse-mode differentiation over recorded graphs, first and second order."""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from core import ops
from core.errors import GraphError
from core.tensor import Node, const, get_op, set_grad_enabled

logger = logging.getLogger(__name__)


class GradientMap(dict):
    """Maps each requested node to the gradient of the loss w.r.t. it."""

    def by_name(self) -> Dict[str, np.ndarray]:
        return {node.name: grad for node, grad in self.items() if node.name}


def _topological(root: Node) -> List[Node]:
    """Nodes requiring grad that ``root`` depends on, parents before children."""
    order: List[Node] = []
    seen = set()
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _check_scalar(loss: Node, where: str) -> None:
    if not isinstance(loss, Node):
        raise GraphError(f"{where}: loss must be a Node, got {type(loss).__name__}")
    if loss.size != 1:
        raise GraphError(f"{where}: loss must be scalar, got shape {loss.shape}")


def _propagate(loss: Node, targets: Sequence[Node], create_graph: bool) -> Dict[int, Node]:
    wanted = {id(t) for t in targets}
    found: Dict[int, Node] = {}
    if not loss.requires_grad:
        return found
    with set_grad_enabled(create_graph):
        grads: Dict[int, Node] = {id(loss): const(np.ones(loss.shape))}
        for node in reversed(_topological(loss)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if id(node) in wanted:
                found[id(node)] = g
            kind = get_op(node.op)
            if kind.vjp is None:
                continue
            for parent, pg in zip(node.parents, kind.vjp(node, g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else ops.add(prev, pg)
    return found


def backward(loss: Node, wrt: Optional[Sequence[Node]] = None) -> GradientMap:
    """Gradients of a scalar ``loss`` as arrays.

    With ``wrt`` omitted, every requires-grad leaf on the loss tape (or
    reachable from the loss when it has no tape) is reported; unreachable
    leaves get exact zeros. Leaf ``grad`` accumulators are populated.
    """
    _check_scalar(loss, "backward")
    if wrt is None:
        reachable = [n for n in _topological(loss) if n.op == "leaf"]
        if loss.tape is not None:
            seen = {id(n) for n in reachable}
            reachable += [n for n in loss.tape.leaves() if id(n) not in seen]
        wrt = reachable
    found = _propagate(loss, wrt, create_graph=False)
    result = GradientMap()
    for target in wrt:
        g = found.get(id(target))
        grad = np.array(g.value) if g is not None else np.zeros(target.shape)
        result[target] = grad
        if target.op == "leaf":
            target.grad = grad
    return result


def grad_as_node(loss: Node, wrt: Node) -> Node:
    """The gradient of ``loss`` w.r.t. ``wrt`` as a differentiable node."""
    _check_scalar(loss, "grad_as_node")
    if wrt.tape is None or wrt.tape is not loss.tape:
        raise GraphError("grad_as_node: wrt is not recorded on the tape of the loss")
    g = _propagate(loss, [wrt], create_graph=True).get(id(wrt))
    if g is None:
        return const(np.zeros(wrt.shape))
    return g if g.shape == wrt.shape else ops.reshape(g, wrt.shape)
