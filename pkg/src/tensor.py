"""Dense float64 tensors with reverse-mode gradients.

Every op records, for each parent, a vector-Jacobian product closure. Backward
walks the graph in reverse topological order and only evaluates the closures
that lead to an unmasked parameter, so a masked parameter group costs no
gradient work and gradients of the other groups are produced by exactly the
same sequence of float operations as in an unmasked run.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.errors import DimensionError, InputError, NumericError, StateError

logger = logging.getLogger(__name__)

Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    __slots__ = ("data", "group", "op", "_vjps", "_released")

    def __init__(self, data, op: str = "", group: Optional[str] = None):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.group = group
        self.op = op
        self._vjps: Tuple[Tuple["Tensor", Vjp], ...] = ()
        self._released = False

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def is_parameter(self) -> bool:
        return self.group is not None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, group={self.group!r})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


@dataclass
class ParamGroup:
    """Unit of gradient masking: one gating map, one expert, or a shared layer."""

    id: str
    tensors: List[Tensor]
    trainable: bool = True

    def __post_init__(self):
        for t in self.tensors:
            t.group = self.id

    @classmethod
    def from_arrays(cls, group_id: str, arrays: Iterable[np.ndarray]) -> "ParamGroup":
        return cls(group_id, [Tensor(a, op="param") for a in arrays])

    def arrays(self) -> List[np.ndarray]:
        return [t.data for t in self.tensors]

    def copy(self) -> "ParamGroup":
        return ParamGroup.from_arrays(self.id, (a.copy() for a in self.arrays()))


@dataclass
class LossValue:
    scalar: float
    batch_size: int
    tensor: Tensor = field(repr=False)


class Gradients:
    """Gradients of one backward pass, keyed by parameter group id."""

    def __init__(self, values: Dict[int, Tuple[Tensor, np.ndarray]], masked: FrozenSet[str]):
        self._values = values
        self.masked = masked
        self.groups = frozenset(t.group for t, _ in values.values())

    def __contains__(self, group_id: str) -> bool:
        return group_id in self.groups

    def of(self, group: ParamGroup) -> List[np.ndarray]:
        """Gradient per tensor of `group`; zeros when masked or not reached."""
        if group.id in self.masked:
            return [np.zeros_like(t.data) for t in group.tensors]
        out = []
        for t in group.tensors:
            entry = self._values.get(id(t))
            out.append(entry[1] if entry is not None else np.zeros_like(t.data))
        return out


def _result(data: np.ndarray, op: str, vjps: Sequence[Tuple[Tensor, Vjp]]) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor(data, op=op)
    out._vjps = tuple(vjps)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return _result(
        a.data + b.data,
        "add",
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return _result(
        a.data * b.data,
        "mul",
        [
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ],
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(
        a.data @ b.data,
        "matmul",
        [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)],
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, "tanh", [(x, lambda g: g * (1.0 - y * y))])


def relu(x: Tensor) -> Tensor:
    positive = x.data > 0.0
    return _result(np.where(positive, x.data, 0.0), "relu", [(x, lambda g: g * positive)])


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "tanh":
        return tanh(x)
    if kind == "relu":
        return relu(x)
    raise InputError(f"unknown activation {kind!r}")


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{op}: input contains NaN or infinity")


def softmax(scores: Tensor) -> Tensor:
    """Row-wise softmax of a B×S tensor, stabilised by max subtraction."""
    _check_finite(scores, "softmax")
    if scores.data.ndim != 2:
        raise DimensionError(f"softmax expects a 2-d tensor, got {scores.shape}")
    shifted = scores.data - scores.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    y = exp / exp.sum(axis=1, keepdims=True)

    def vjp(g: np.ndarray) -> np.ndarray:
        return y * (g - (g * y).sum(axis=1, keepdims=True))

    return _result(y, "softmax", [(scores, vjp)])


def masked_renormalize(probs: Tensor, allowed: np.ndarray) -> Tensor:
    """Zero disallowed columns and rescale each row to sum to one."""
    mask = np.asarray(allowed, dtype=np.float64)
    if mask.shape != probs.shape:
        mask = np.broadcast_to(mask, probs.shape)
    z = probs.data * mask
    s = z.sum(axis=1, keepdims=True)
    if np.any(s <= 0.0):
        raise NumericError("masked_renormalize: a row has no allowed mass")
    y = z / s

    def vjp(g: np.ndarray) -> np.ndarray:
        return mask * (g - (g * y).sum(axis=1, keepdims=True)) / s

    return _result(y, "masked_renormalize", [(probs, vjp)])


def column(x: Tensor, j: int) -> Tensor:
    n, m = x.shape

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros((n, m))
        full[:, j] = g[:, 0]
        return full

    return _result(x.data[:, j:j + 1], "column", [(x, vjp)])


def take_rows(x: Tensor, rows: np.ndarray) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)

    def vjp(g: np.ndarray) -> np.ndarray:
        full = np.zeros_like(x.data)
        np.add.at(full, rows, g)
        return full

    return _result(x.data[rows], "take_rows", [(x, vjp)])


def scatter_rows(x: Tensor, rows: np.ndarray, n: int) -> Tensor:
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n,) + x.shape[1:])
    out[rows] = x.data
    return _result(out, "scatter_rows", [(x, lambda g: g[rows])])


def mean_groups(x: Tensor, group_size: int) -> Tensor:
    """Average consecutive blocks of `group_size` rows (token pooling)."""
    n, d = x.shape
    if n % group_size:
        raise DimensionError(f"mean_groups: {n} rows do not split into groups of {group_size}")
    y = x.data.reshape(n // group_size, group_size, d).mean(axis=1)

    def vjp(g: np.ndarray) -> np.ndarray:
        return np.repeat(g / group_size, group_size, axis=0)

    return _result(y, "mean_groups", [(x, vjp)])


def forward_linear(inputs: Tensor, weights: ParamGroup) -> Tensor:
    """inputs·W + b for a group holding [W (D_in×D_out), b (D_out)]."""
    w, b = weights.tensors
    if inputs.data.ndim != 2 or inputs.shape[1] != w.shape[0]:
        raise DimensionError(
            f"linear {weights.id}: input {inputs.shape} does not match weight {w.shape}"
        )
    return add(matmul(inputs, w), b)


def cross_entropy(logits: Tensor, labels: Sequence[int]) -> LossValue:
    """Mean negative log-likelihood of integer labels under row softmax."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if n == 0:
        raise InputError("cross_entropy: empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise InputError(f"cross_entropy: labels must lie in [0, {c})")
    _check_finite(logits, "cross_entropy")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = log_norm - shifted[rows, labels]
    probs = np.exp(shifted - log_norm[:, None])

    def vjp(g: np.ndarray) -> np.ndarray:
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return grad * (g / n)

    out = _result(np.array(nll.mean()), "cross_entropy", [(logits, vjp)])
    return LossValue(scalar=float(out.data), batch_size=n, tensor=out)


def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in reversed(node._vjps):
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: LossValue, mask: Iterable[str] = frozenset()) -> Gradients:
    """Propagate d(loss) to every parameter whose group is not in `mask`."""
    root = loss.tensor
    if root._released:
        raise StateError("backward: graph already released by a previous backward")
    if not root._vjps:
        raise StateError("backward: no forward graph recorded for this loss")
    masked = frozenset(mask)
    order = _topological_order(root)

    needed = set()
    for node in order:
        if node.is_parameter:
            if node.group not in masked:
                needed.add(id(node))
        elif any(id(parent) in needed for parent, _ in node._vjps):
            needed.add(id(node))

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or id(node) not in needed:
            continue
        for parent, vjp in node._vjps:
            if id(parent) not in needed:
                continue
            contribution = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = contribution

    values = {}
    for node in order:
        if node.is_parameter and id(node) in grads:
            values[id(node)] = (node, grads[id(node)])
        node._vjps = ()
    root._released = True
    return Gradients(values, masked)


def sgd_step(groups: Iterable[ParamGroup], grads: Gradients, lr: float) -> None:
    """p ← p − lr·g for every trainable, unmasked group, in place."""
    if not lr > 0.0:
        raise InputError(f"sgd_step: learning rate must be positive, got {lr}")
    updates = []
    for group in groups:
        if not group.trainable or group.id in grads.masked or group.id not in grads:
            continue
        gs = grads.of(group)
        for g in gs:
            if not np.all(np.isfinite(g)):
                raise NumericError(f"sgd_step: non-finite gradient in group {group.id}")
        updates.append((group, gs))
    for group, gs in updates:
        for t, g in zip(group.tensors, gs):
            t.data -= lr * g
