"""Reverse-mode automatic differentiation over dense 2-D float64 matrices.

Every value in a computation graph is a :class:`Node` holding a C-ordered
``(rows, cols)`` float64 ndarray. Forward functions build the graph; calling
:func:`backward` on a 1x1 loss node runs the tape in reverse topological
order. Parameter leaves accumulate into the persistent gradient buffers of
their :class:`ParamStore`, so two backward passes sum their gradients until
``zero_grads`` is called.

Nodes downstream of parameters are tracked; subgraphs built purely from
constants (input windows, targets) carry no tape and cost nothing at
backward time.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Iterator

import numpy as np

from molecast.errors import NumericalError
from molecast.rng import Xoshiro256


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-ordered 2-D float64 array, validating the shape."""
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got ndim={out.ndim}")
    return out


class Node:
    """One vertex of the computation graph."""

    __slots__ = ("value", "parents", "backward_fn", "grad", "tracked")

    def __init__(self, value, parents=(), backward_fn=None, tracked=None, grad=None):
        self.value = as_matrix(value)
        self.parents: tuple[Node, ...] = tuple(parents)
        self.backward_fn = backward_fn
        self.grad = grad
        if tracked is None:
            tracked = any(p.tracked for p in self.parents)
        self.tracked = tracked

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.shape != (1, 1):
            raise ValueError(f"item() needs a 1x1 node, got {self.value.shape}")
        return float(self.value[0, 0])


def const(a) -> Node:
    """Leaf that does not require a gradient."""
    return Node(a, tracked=False)


def _accumulate(node: Node, g: np.ndarray) -> None:
    if not node.tracked:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.value)
    node.grad += g


def backward(root: Node) -> None:
    """Run reverse-mode accumulation from a 1x1 loss node."""
    if root.value.shape != (1, 1):
        raise ValueError(f"backward() needs a scalar 1x1 root, got {root.value.shape}")
    if not root.tracked:
        return
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.tracked:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    _accumulate(root, np.ones((1, 1)))
    for node in reversed(order):
        if node.backward_fn is not None and node.grad is not None:
            node.backward_fn(node.grad)


class ParamStore:
    """Named trainable matrices with persistent gradient accumulators.

    Names are unique and iteration is always in sorted-name order, which
    keeps optimizer updates, serialization, and gradient checks
    deterministic.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> None:
        if name in self._values:
            raise ValueError(f"duplicate parameter name {name!r}")
        v = as_matrix(value)
        self._values[name] = v
        self._grads[name] = np.zeros_like(v)

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return sorted(self._values)

    def value(self, name: str) -> np.ndarray:
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def leaf(self, name: str) -> Node:
        """Graph leaf whose backward target is this store's grad buffer."""
        return Node(self._values[name], tracked=True, grad=self._grads[name])

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self.names():
            yield name, self._values[name]

    def zero_grads(self) -> None:
        for g in self._grads.values():
            g[...] = 0.0

    def num_entries(self) -> int:
        """Total scalar parameter count."""
        return sum(v.size for v in self._values.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self._values.items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, v in snap.items():
            self._values[name][...] = v


# ---------------------------------------------------------------------------
# primitives


def _binary_shapes(x: Node, y: Node, op: str) -> None:
    if x.value.shape != y.value.shape:
        raise ValueError(f"{op}: shape mismatch {x.value.shape} vs {y.value.shape}")


def add(x: Node, y: Node) -> Node:
    _binary_shapes(x, y, "add")
    out = Node(x.value + y.value, (x, y))

    def bwd(g):
        _accumulate(x, g)
        _accumulate(y, g)

    out.backward_fn = bwd
    return out


def sub(x: Node, y: Node) -> Node:
    _binary_shapes(x, y, "sub")
    out = Node(x.value - y.value, (x, y))

    def bwd(g):
        _accumulate(x, g)
        _accumulate(y, -g)

    out.backward_fn = bwd
    return out


def mul(x: Node, y: Node) -> Node:
    _binary_shapes(x, y, "mul")
    out = Node(x.value * y.value, (x, y))

    def bwd(g):
        _accumulate(x, g * y.value)
        _accumulate(y, g * x.value)

    out.backward_fn = bwd
    return out


def scale(x: Node, c: float) -> Node:
    out = Node(x.value * c, (x,))
    out.backward_fn = lambda g: _accumulate(x, g * c)
    return out


def shift(x: Node, c: float) -> Node:
    """Add a scalar constant elementwise."""
    out = Node(x.value + c, (x,))
    out.backward_fn = lambda g: _accumulate(x, g)
    return out


def matmul(x: Node, y: Node) -> Node:
    if x.cols != y.rows:
        raise ValueError(f"matmul: inner dims differ, {x.value.shape} @ {y.value.shape}")
    out = Node(x.value @ y.value, (x, y))

    def bwd(g):
        _accumulate(x, g @ y.value.T)
        _accumulate(y, x.value.T @ g)

    out.backward_fn = bwd
    return out


def relu(x: Node) -> Node:
    out = Node(np.maximum(x.value, 0.0), (x,))
    out.backward_fn = lambda g: _accumulate(x, g * (x.value > 0.0))
    return out


def sqrt(x: Node) -> Node:
    v = np.sqrt(x.value)
    out = Node(v, (x,))
    out.backward_fn = lambda g: _accumulate(x, g * 0.5 / v)
    return out


def recip(x: Node) -> Node:
    v = 1.0 / x.value
    out = Node(v, (x,))
    out.backward_fn = lambda g: _accumulate(x, -g * v * v)
    return out


def recip_floor(x: Node, floor: float = 1e-8) -> Node:
    """Reciprocal with a sign-preserving magnitude floor on the denominator.

    Where ``|x| < floor`` the denominator is replaced by ``+-floor`` (zero
    counts as positive) and the local derivative is zero, since the output
    no longer responds to x there.
    """
    sign = np.where(x.value < 0.0, -1.0, 1.0)
    denom = np.where(np.abs(x.value) < floor, sign * floor, x.value)
    v = 1.0 / denom
    live = np.abs(x.value) >= floor
    out = Node(v, (x,))
    out.backward_fn = lambda g: _accumulate(x, np.where(live, -g * v * v, 0.0))
    return out


def softmax_rows(x: Node) -> Node:
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    v = e / e.sum(axis=1, keepdims=True)
    out = Node(v, (x,))

    def bwd(g):
        # dL/dx = y * (g - sum_j g_j y_j) rowwise
        dot = (g * v).sum(axis=1, keepdims=True)
        _accumulate(x, v * (g - dot))

    out.backward_fn = bwd
    return out


def mean_rows(x: Node) -> Node:
    n = x.cols
    out = Node(x.value.mean(axis=1, keepdims=True), (x,))
    out.backward_fn = lambda g: _accumulate(x, np.repeat(g, n, axis=1) / n)
    return out


def var_rows(x: Node) -> Node:
    """Population (biased) variance of each row."""
    n = x.cols
    centered = x.value - x.value.mean(axis=1, keepdims=True)
    out = Node((centered * centered).mean(axis=1, keepdims=True), (x,))
    out.backward_fn = lambda g: _accumulate(x, (2.0 / n) * centered * g)
    return out


def sum_rows(x: Node) -> Node:
    out = Node(x.value.sum(axis=1, keepdims=True), (x,))
    out.backward_fn = lambda g: _accumulate(x, np.repeat(g, x.cols, axis=1))
    return out


def broadcast_col(x: Node, cols: int) -> Node:
    """Repeat a (R, 1) column vector across ``cols`` columns."""
    if x.cols != 1:
        raise ValueError(f"broadcast_col needs a column vector, got {x.value.shape}")
    out = Node(np.repeat(x.value, cols, axis=1), (x,))
    out.backward_fn = lambda g: _accumulate(x, g.sum(axis=1, keepdims=True))
    return out


def tile_rows(x: Node, reps: int) -> Node:
    """Stack ``reps`` vertical copies of x."""
    r, c = x.value.shape
    out = Node(np.tile(x.value, (reps, 1)), (x,))
    out.backward_fn = lambda g: _accumulate(x, g.reshape(reps, r, c).sum(axis=0))
    return out


def slice_cols(x: Node, start: int, stop: int) -> Node:
    if not (0 <= start < stop <= x.cols):
        raise ValueError(f"slice_cols [{start}:{stop}] out of range for {x.value.shape}")
    out = Node(x.value[:, start:stop].copy(), (x,))

    def bwd(g):
        full = np.zeros_like(x.value)
        full[:, start:stop] = g
        _accumulate(x, full)

    out.backward_fn = bwd
    return out


def concat_rows(parts: Iterable[Node]) -> Node:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ValueError("concat_rows: column counts differ")
    out = Node(np.concatenate([p.value for p in parts], axis=0), parts)
    offsets = np.cumsum([0] + [p.rows for p in parts])

    def bwd(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(p, g[a:b])

    out.backward_fn = bwd
    return out


def reshape(x: Node, rows: int, cols: int) -> Node:
    """Row-major reshape; a pure relabeling of the same entries."""
    if rows * cols != x.value.size:
        raise ValueError(f"cannot reshape {x.value.shape} to ({rows}, {cols})")
    shape = x.value.shape
    out = Node(x.value.reshape(rows, cols), (x,))
    out.backward_fn = lambda g: _accumulate(x, g.reshape(shape))
    return out


def total_sum(x: Node) -> Node:
    out = Node([[x.value.sum()]], (x,))
    out.backward_fn = lambda g: _accumulate(x, np.full_like(x.value, g[0, 0]))
    return out


def mean_sq(x: Node) -> Node:
    """Mean of squared entries, over every element. The MSE loss is
    ``mean_sq(sub(pred, target))``."""
    n = x.value.size
    out = Node([[(x.value * x.value).sum() / n]], (x,))
    out.backward_fn = lambda g: _accumulate(x, (2.0 / n) * x.value * g[0, 0])
    return out


# ---------------------------------------------------------------------------
# initialization


def uniform_init(fan_in: int, rows: int, cols: int, rng: Xoshiro256) -> np.ndarray:
    """Matrix with i.i.d. entries uniform on [-1/sqrt(fan_in), +1/sqrt(fan_in)].

    Consumes exactly ``rows * cols`` draws in row-major order.
    """
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    bound = 1.0 / math.sqrt(fan_in)
    flat = np.empty(rows * cols)
    for i in range(rows * cols):
        flat[i] = rng.uniform(-bound, bound)
    return flat.reshape(rows, cols)


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    loss_fn: Callable[[ParamStore], Node],
    params: ParamStore,
    eps: float = 1e-5,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    ``loss_fn`` must be deterministic: it is re-evaluated at perturbed
    parameter values, (f(p+eps) - f(p-eps)) / (2 eps) entry by entry.
    Returns the maximum over all parameter entries of
    ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    params.zero_grads()
    root = loss_fn(params)
    if not np.isfinite(root.item()):
        raise NumericalError("loss is non-finite at the evaluation point")
    backward(root)
    analytic = {name: params.grad(name).copy() for name in params.names()}

    worst = 0.0
    for name in params.names():
        value = params.value(name)
        g_ad = analytic[name]
        for idx in np.ndindex(*value.shape):
            saved = value[idx]
            value[idx] = saved + eps
            f_plus = loss_fn(params).item()
            value[idx] = saved - eps
            f_minus = loss_fn(params).item()
            value[idx] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericalError(f"loss is non-finite while perturbing {name!r}{idx}")
            g_fd = (f_plus - f_minus) / (2.0 * eps)
            denom = max(1e-8, abs(g_ad[idx]) + abs(g_fd))
            worst = max(worst, abs(g_ad[idx] - g_fd) / denom)
    return worst
