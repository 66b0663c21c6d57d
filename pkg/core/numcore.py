"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a tape is active and
an operand requires gradients, records a node holding its adjoint. ``Tape.backward``
walks the nodes in reverse creation order, which is a reverse topological order.
Leading batch axes are allowed everywhere; adjoints sum over broadcast axes.
"""

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from core.errors import AllMaskedRow, IdOutOfRange, NonScalarOutput, ShapeMismatch

logger = logging.getLogger(__name__)

DTYPE = np.float64
ArrayLike = Union[np.ndarray, Sequence, float, int]


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE) if not isinstance(data, np.ndarray) or data.dtype != DTYPE \
            else data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarOutput(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        """Same values, cut off from the tape."""
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class TapeNode:
    """One primitive application: inputs, output and the adjoint map."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_local = threading.local()


def _stack() -> List[Optional["Tape"]]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def current_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Context in which primitives record nothing."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tape:
    """Ordered record of primitive applications, confined to one thread."""

    def __init__(self):
        self.nodes: List[TapeNode] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)

    def backward(self, output: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
        """Accumulate d(output)/d(leaf) into every reachable leaf's ``grad``.

        Tensors in ``params`` get a zero gradient first, so parameters the output
        does not depend on end with exact zeros.
        """
        if output.size != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
        if params is not None:
            for p in params:
                p.zero_grad()

        adjoints: Dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
        leaves: Dict[int, Tensor] = {}
        if output.is_leaf and output.requires_grad:
            leaves[id(output)] = output

        for node in reversed(self.nodes):
            g = adjoints.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, contribution in zip(node.inputs, node.backward(g)):
                if contribution is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                if key in adjoints:
                    adjoints[key] = adjoints[key] + contribution
                else:
                    adjoints[key] = contribution
                if tensor.is_leaf:
                    leaves[key] = tensor

        for key, tensor in leaves.items():
            g = adjoints.get(key)
            if g is None:
                continue
            tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


def _apply(op: str, inputs: Sequence[Tensor], value: np.ndarray,
           backward: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    tape = current_tape()
    tracked = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=tracked)
    if tracked:
        out.is_leaf = False
        tape.record(TapeNode(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (undoing numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# Linear primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: cannot multiply {a.shape} by {b.shape}")
    value = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _apply("matmul", (a, b), value, backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply("add", (a, b), a.data + b.data, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply("sub", (a, b), a.data - b.data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _apply("mul", (a, b), a.data * b.data, backward)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _apply("scale", (a,), a.data * c, lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis."""
    tensors = [as_tensor(t) for t in tensors]
    if axis not in (-1, tensors[0].ndim - 1):
        raise ShapeMismatch("concat only joins along the last axis")
    lead = {t.shape[:-1] for t in tensors}
    if len(lead) != 1:
        raise ShapeMismatch(f"concat: leading shapes differ: {sorted(lead)}")
    widths = [t.shape[-1] for t in tensors]
    bounds = np.cumsum(widths)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=-1))

    return _apply("concat", tensors, np.concatenate([t.data for t in tensors], axis=-1), backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch(f"transpose needs at least 2 axes, got {a.shape}")
    return _apply("transpose", (a,), np.swapaxes(a.data, -1, -2),
                  lambda g: (np.swapaxes(g, -1, -2),))


def tensor_sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    value = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _apply("sum", (a,), np.asarray(value, dtype=DTYPE), backward)


# Elementwise nonlinearities

def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; -inf entries get exactly zero weight."""
    a = as_tensor(a)
    x = a.data
    live = x > -np.inf
    if not np.all(live.any(axis=-1)):
        raise AllMaskedRow("softmax row contains only -inf")
    peak = np.max(np.where(live, x, -np.inf), axis=-1, keepdims=True)
    e = np.where(live, np.exp(np.where(live, x - peak, 0.0)), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _apply("row_softmax", (a,), y, backward)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _apply("relu", (a,), np.where(on, a.data, 0.0), lambda g: (g * on,))


def gelu(a: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return _apply("gelu", (a,), x * cdf, lambda g: (g * (cdf + x * pdf),))


def tensor_abs(a: Tensor) -> Tensor:
    """Absolute value; the subgradient at 0 is 0."""
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _apply("abs", (a,), np.abs(a.data), lambda g: (g * sign,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _apply("square", (a,), a.data * a.data, lambda g: (2.0 * a.data * g,))


# Indexing and fused model primitives

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table``; the result has shape ``ids.shape + (width,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise IdOutOfRange(f"ids must lie in [0, {rows}), got range [{ids.min()}, {ids.max()}]")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _apply("embedding", (table,), table.data[ids], backward)


def select_position(a: Tensor, index: int) -> Tensor:
    """Row ``index`` of the second-to-last axis: (..., n, d) -> (..., d)."""
    a = as_tensor(a)
    if a.ndim < 2 or not -a.shape[-2] <= index < a.shape[-2]:
        raise ShapeMismatch(f"cannot select position {index} from {a.shape}")

    def backward(g):
        grad = np.zeros_like(a.data)
        grad[..., index, :] = g
        return (grad,)

    return _apply("select_position", (a,), a.data[..., index, :].copy(), backward)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a = as_tensor(a)
    if gamma.shape != (a.shape[-1],) or beta.shape != (a.shape[-1],):
        raise ShapeMismatch(f"layer_norm: gamma/beta must have shape ({a.shape[-1]},)")
    x = a.data
    width = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std

    def backward(g):
        dxhat = g * gamma.data
        dx = inv_std / width * (
            width * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        dgamma = (g * xhat).reshape(-1, width).sum(axis=0)
        dbeta = g.reshape(-1, width).sum(axis=0)
        return dx, dgamma, dbeta

    return _apply("layer_norm", (a, gamma, beta), xhat * gamma.data + beta.data, backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-softmax of ``logits``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IdOutOfRange(f"labels must lie in [0, {n_classes})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(labels.shape[0])
    batch = max(labels.shape[0], 1)
    value = -log_probs[rows, labels].sum() / batch

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, labels] -= 1.0
        return (grad * (g / batch),)

    return _apply("cross_entropy", (logits,), np.asarray(value), backward)


def pairwise_sq_dist(a: Tensor) -> Tensor:
    """All-pairs squared distances between rows: (..., n, m) -> (..., n, n)."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeMismatch(f"pairwise_sq_dist needs at least 2 axes, got {a.shape}")
    p = a.data
    diff = p[..., :, None, :] - p[..., None, :, :]
    value = (diff * diff).sum(axis=-1)

    def backward(g):
        s = g + np.swapaxes(g, -1, -2)
        return (2.0 * (s.sum(axis=-1, keepdims=True) * p - np.matmul(s, p)),)

    return _apply("pairwise_sq_dist", (a,), value, backward)


# Parameters and initialization

def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def normal_init(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class ParameterStore:
    """Named, ordered collection of trainable tensors."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        tensor = Tensor(np.ascontiguousarray(data, dtype=DTYPE), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self) -> List[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    def subset(self, prefixes: Iterable[str]) -> Dict[str, Tensor]:
        prefixes = tuple(prefixes)
        return {n: p for n, p in self._params.items() if n.startswith(prefixes)}

    def count(self, prefix: str = "") -> int:
        return int(sum(p.size for n, p in self._params.items() if n.startswith(prefix)))

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray], strict: bool = True) -> List[str]:
        """Copy values in place; returns the names that were loaded."""
        loaded = []
        for name, value in arrays.items():
            if name not in self._params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            target = self._params[name]
            if target.shape != tuple(value.shape):
                raise ShapeMismatch(f"parameter {name}: expected {target.shape}, got {tuple(value.shape)}")
            np.copyto(target.data, value)
            loaded.append(name)
        if strict:
            missing = sorted(set(self._params) - set(loaded))
            if missing:
                raise KeyError(f"missing parameters: {missing}")
        return loaded


# Finite-difference verification

# Multiple of the central-difference round-off below which gradients are compared absolutely
NOISE_MARGIN = 1e5


def noise_floor(loss_value: float, eps: float) -> float:
    """Denominator floor for a loss of this magnitude differenced with step ``eps``."""
    roundoff = abs(loss_value) * np.finfo(np.float64).eps / eps
    return max(1e-8, NOISE_MARGIN * roundoff)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all coordinates."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar(f: Callable[[], Tensor]) -> float:
    with no_grad():
        out = f()
    if out.size != 1:
        raise NonScalarOutput(f"function returned shape {out.shape}")
    return out.item()


def _central_difference(f: Callable[[], Tensor], x: Tensor, index: Tuple[int, ...], eps: float) -> float:
    original = x.data[index]
    x.data[index] = original + eps
    f_plus = _scalar(f)
    x.data[index] = original - eps
    f_minus = _scalar(f)
    x.data[index] = original
    return (f_plus - f_minus) / (2.0 * eps)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    x.requires_grad = True
    with Tape() as tape:
        y = f(x)
        if y.size != 1:
            raise NonScalarOutput(f"grad_check needs a scalar function, got shape {y.shape}")
        tape.backward(y, params=[x])
    analytic = x.grad.copy()
    numeric = np.zeros_like(analytic)
    for index in np.ndindex(*x.shape):
        numeric[index] = _central_difference(lambda: f(x), x, index, eps)
    return relative_error(analytic, numeric, noise_floor(y.item(), eps))


@dataclass
class GradCheckReport:
    """Per-parameter maximum relative errors of a full-model check."""
    errors: Dict[str, float] = field(default_factory=dict)
    coordinates: int = 0
    floor: float = 1e-8

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def worst_parameter(self) -> Optional[str]:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def grad_check_parameters(
    loss_fn: Callable[[], Tensor],
    params: Union[ParameterStore, Dict[str, Tensor]],
    eps: float = 1e-6,
    coords_per_param: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckReport:
    """Check every named parameter, sampling up to ``coords_per_param`` coordinates each."""
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    rng = rng or np.random.default_rng(0)
    named = dict(params.items())
    with Tape() as tape:
        loss = loss_fn()
        if loss.size != 1:
            raise NonScalarOutput(f"loss has shape {loss.shape}")
        tape.backward(loss, params=named.values())

    report = GradCheckReport(floor=noise_floor(loss.item(), eps))
    for name, tensor in named.items():
        analytic_full = tensor.grad.copy()
        indices = list(np.ndindex(*tensor.shape))
        if coords_per_param is not None and len(indices) > coords_per_param:
            chosen = rng.choice(len(indices), size=coords_per_param, replace=False)
            indices = [indices[i] for i in sorted(chosen)]
        analytic = np.array([analytic_full[i] for i in indices])
        numeric = np.array([_central_difference(loss_fn, tensor, i, eps) for i in indices])
        report.errors[name] = relative_error(analytic, numeric, report.floor)
        report.coordinates += len(indices)
    logger.info(f"Gradient check over {report.coordinates} coordinates: "
                f"max relative error {report.max_error:.3e} ({report.worst_parameter}), "
                f"floor {report.floor:.1e}")
    return report
