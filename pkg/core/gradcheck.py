"""Central finite-difference oracles for first- and second-order gradients."""

from typing import Callable, List, Sequence

import numpy as np

from core import ops
from core.autodiff import backward, grad_as_node
from core.tensor import FrozenConstants, GradientTape, Node, leaf


def numerical_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        f_plus = fn(x.copy())
        x[idx] = orig - eps
        f_minus = fn(x.copy())
        x[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error; 0 when both sides are exactly zero."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(np.asarray(analytic) - np.asarray(numeric)) / scale)


def _evaluate(build: Callable[..., Node], arrays: Sequence[np.ndarray]) -> float:
    with GradientTape():
        return build(*[leaf(a) for a in arrays]).item()


def check_gradients(build: Callable[..., Node], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> List[float]:
    """Relative error between backward and finite differences, per input.

    ``build`` maps leaf nodes to a scalar node and may itself call
    ``grad_as_node``. Data-dependent constants are held at the values of the
    analytic pass.
    """
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    with FrozenConstants() as frozen:
        with GradientTape():
            leaves = [leaf(x) for x in inputs]
            grads = backward(build(*leaves), wrt=leaves)
        frozen.freeze()
        errors = []
        for i, x in enumerate(inputs):
            def fn(xi, i=i):
                frozen.rewind()
                return _evaluate(build, [xi if j == i else inputs[j] for j in range(len(inputs))])
            errors.append(relative_error(grads[leaves[i]], numerical_gradient(fn, x, eps)))
    return errors


def check_hessian_vector(build: Callable[[Node], Node], x: np.ndarray, v: np.ndarray, eps: float = 1e-4) -> float:
    """Compare d/dx <grad f(x), v> with a central difference of first-order gradients."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    with FrozenConstants() as frozen:
        with GradientTape():
            xl = leaf(x)
            g = grad_as_node(build(xl), xl)
            hv = backward(ops.reduce_sum(ops.mul(g, v)), wrt=[xl])[xl]
        frozen.freeze()

        def first_order(point):
            frozen.rewind()
            with GradientTape():
                pl = leaf(point)
                return backward(build(pl), wrt=[pl])[pl]

        numeric = (first_order(x + eps * v) - first_order(x - eps * v)) / (2.0 * eps)
    return relative_error(hv, numeric)
