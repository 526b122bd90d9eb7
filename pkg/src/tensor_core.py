"""
Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays. Training runs in 32-bit floats; gradient
checks switch to 64-bit through the `precision("float64")` context.

Conventions every loss in the project depends on:
    - `mse(a, b)` is the MEAN of squared differences (divided by the element
      count), so d/da mse(a, 0) = 2a / n.
    - Binary ops follow numpy broadcasting; gradients are summed back over
      the broadcast axes.
    - Ops are recorded only while a `GradTape` is active and at least one
      input requires a gradient. Recorded tensors are never mutated in place.
"""
import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import erf

from src.errors import ContractError, DomainError, NumericError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _local() -> threading.local:
    if not hasattr(_state, "dtype"):
        _state.dtype = np.float32
        _state.tapes = []
        _state.grad_enabled = True
        _state.mac_counters = []
    return _state


def get_dtype() -> type:
    """Returns the float dtype new tensors are created with."""
    return _local().dtype


@contextmanager
def precision(name: str) -> Iterator[None]:
    """
    Temporarily switches the default dtype ("float32" or "float64").

    Args:
        name: Dtype name.
    """
    if name not in _DTYPES:
        raise DomainError(f"Unknown precision '{name}', expected one of {sorted(_DTYPES)}")
    state = _local()
    previous = state.dtype
    state.dtype = _DTYPES[name]
    try:
        yield
    finally:
        state.dtype = previous


@contextmanager
def no_grad() -> Iterator[None]:
    """Suspends recording on the active tape."""
    state = _local()
    previous = state.grad_enabled
    state.grad_enabled = False
    try:
        yield
    finally:
        state.grad_enabled = previous


class MacCounter:
    """Tally of multiply-accumulates performed by matmul while active."""

    def __init__(self):
        self.macs = 0
        self.calls = 0


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Counts the multiply-accumulates of every matmul executed inside the block."""
    counter = MacCounter()
    counters = _local().mac_counters
    counters.append(counter)
    try:
        yield counter
    finally:
        counters.remove(counter)


class Tensor:
    """Immutable n-dimensional value, optionally tracked for gradients."""

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or get_dtype())
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional["GradTape"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """Trainable leaf tensor with its gradient and adaptive-moment state."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def assign(self, value: np.ndarray):
        """Replaces the value (used by checkpoint loading); moments are reset."""
        value = np.asarray(value, dtype=self.data.dtype)
        if value.shape != self.data.shape:
            raise ShapeError(f"Parameter '{self.name}': expected shape {self.data.shape}, got {value.shape}")
        self.data = value.copy()
        self.zero_grad()
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step_count = 0

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape}, dtype={self.dtype})"


class TapeRecord(NamedTuple):
    kind: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class GradTape:
    """
    Ordered log of recorded ops. Single-owner: never share one between threads.

    Usage:
        with GradTape() as tape:
            loss = mse(model(x), y)
        tape.backward(loss)
    """

    def __init__(self):
        self.records: List[TapeRecord] = []

    def __enter__(self) -> "GradTape":
        _local().tapes.append(self)
        return self

    def __exit__(self, *exc_info):
        tapes = _local().tapes
        if tapes and tapes[-1] is self:
            tapes.pop()
        elif self in tapes:
            tapes.remove(self)

    def __len__(self):
        return len(self.records)

    def record(self, kind: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        output.requires_grad = True
        output._tape = self
        self.records.append(TapeRecord(kind, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """
        Replays the tape in reverse and accumulates gradients into leaves.

        Args:
            loss: Scalar tensor recorded on this tape.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("backward: loss was not recorded on this tape (no parameter reaches it)")

        grads = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = grads.pop(id(record.output), None)
            if grad is None:
                continue
            for tensor, input_grad in zip(record.inputs, record.backward(grad)):
                if input_grad is None or not tensor.requires_grad:
                    continue
                if tensor._tape is None:
                    input_grad = np.asarray(input_grad, dtype=tensor.data.dtype).reshape(tensor.shape)
                    tensor.grad = input_grad.copy() if tensor.grad is None else tensor.grad + input_grad
                else:
                    key = id(tensor)
                    grads[key] = input_grad if key not in grads else grads[key] + input_grad
        self.reset()

    def reset(self) -> None:
        for record in self.records:
            record.output._tape = None
        self.records = []


def backward(loss: Tensor) -> None:
    """Backpropagates `loss` through the tape it was recorded on, then resets that tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("backward: loss is not reachable from any recorded parameter")
    loss._tape.backward(loss)


def _active_tape() -> Optional[GradTape]:
    state = _local()
    if not state.grad_enabled or not state.tapes:
        return None
    return state.tapes[-1]


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _result(kind: str, data: np.ndarray, inputs: Tuple[Tensor, ...], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{kind}: produced non-finite values")
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result("sub", a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result("div", a.data / b.data, (a, b), backward_fn)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / math.sqrt(2.0)))

    def backward_fn(g):
        pdf = np.exp(-0.5 * x.data * x.data) / math.sqrt(2.0 * math.pi)
        return (g * (cdf + x.data * pdf),)

    return _result("gelu", (x.data * cdf).astype(x.dtype), (x,), backward_fn)


# ---------------------------------------------------------------------------
# Linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with broadcasting over leading (batch) axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ ({a.shape[-1]} vs {b.shape[-2]}) for shapes {a.shape} @ {b.shape}"
        )
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    counters = _local().mac_counters
    if counters:
        macs = int(np.prod(batch, dtype=np.int64)) * a.shape[-2] * a.shape[-1] * b.shape[-1]
        for counter in counters:
            counter.macs += macs
            counter.calls += 1

    def backward_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", np.matmul(a.data, b.data), (a, b), backward_fn)


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of the {x.ndim} axes of {x.shape}")
    inverse = np.argsort([a % x.ndim for a in axes])

    def backward_fn(g):
        return (np.transpose(g, inverse),)

    return _result("transpose", np.transpose(x.data, axes), (x,), backward_fn)


def swap_last(x: Tensor) -> Tensor:
    """Swaps the two trailing axes."""
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None

    def backward_fn(g):
        return (g.reshape(x.shape),)

    return _result("reshape", data, (x,), backward_fn)


def getitem(x: Tensor, index) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data[index]
    except IndexError as error:
        raise ShapeError(f"getitem: {error} for shape {x.shape}") from None

    def backward_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _result("getitem", np.array(data), (x,), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    if not tensors:
        raise ContractError("concat: needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors:
        if t.ndim != ndim or t.shape[:axis] + t.shape[axis + 1:] != tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]:
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ outside axis {axis}"
            )
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward_fn)


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Broadcasts `x` to `shape` (explicit leading-axis broadcast)."""
    x = _as_tensor(x)
    try:
        data = np.broadcast_to(x.data, tuple(shape)).copy()
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {tuple(shape)}") from None

    def backward_fn(g):
        return (_unbroadcast(g, x.shape),)

    return _result("expand", data, (x,), backward_fn)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result("sum", np.array(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward_fn)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def embedding(table: Tensor, indices) -> Tensor:
    """Row lookup: out[..., :] = table[indices[...], :]."""
    table = _as_tensor(table)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise ShapeError(f"embedding: indices outside [0, {table.shape[0]}) for table {table.shape}")

    def backward_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return _result("embedding", table.data[indices], (table,), backward_fn)


def straight_through(z: Tensor, values: np.ndarray) -> Tensor:
    """Forward returns `values`; backward copies the incoming gradient to `z`."""
    z = _as_tensor(z)
    values = np.asarray(values, dtype=z.dtype)
    if values.shape != z.shape:
        raise ShapeError(f"straight_through: values {values.shape} differ from input {z.shape}")

    def backward_fn(g):
        return (g,)

    return _result("straight_through", values.copy(), (z,), backward_fn)


# ---------------------------------------------------------------------------
# Normalization, softmax, losses
# ---------------------------------------------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalizes over the last axis, then applies the learnable scale and shift."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: scale/shift {gamma.shape}/{beta.shape} do not match last axis of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    x_hat = centered * inv_std

    def backward_fn(g):
        g_hat = g * gamma.data
        gx = inv_std * (g_hat - g_hat.mean(axis=-1, keepdims=True)
                        - x_hat * (g_hat * x_hat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * x_hat).sum(axis=lead), g.sum(axis=lead)

    return _result("layer_norm", (x_hat * gamma.data + beta.data).astype(x.dtype), (x, gamma, beta), backward_fn)


def softmax(x: Tensor, axis: int = -1, temperature: Union[float, np.ndarray] = 1.0) -> Tensor:
    """
    softmax(x / temperature) along `axis`.

    `temperature` may be a scalar or an array broadcastable against `x`
    (e.g. one divisor per key column).
    """
    x = _as_tensor(x)
    delta = np.asarray(temperature, dtype=x.dtype)
    if np.any(~(delta > 0)):
        raise DomainError(f"softmax: temperature must be > 0, got min {float(np.min(delta))}")
    logits = x.data / delta
    logits = logits - logits.max(axis=axis, keepdims=True)
    weights = np.exp(logits)
    out = weights / weights.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        gz = out * (g - (g * out).sum(axis=axis, keepdims=True))
        return (gz / delta,)

    return _result("softmax", out, (x,), backward_fn)


def mse(a, b) -> Tensor:
    """Mean squared error: sum((a - b)^2) / element count."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def backward_fn(g):
        ga = g * 2.0 * diff / n
        return ga, -ga

    return _result("mse", np.array((diff * diff).sum() / n, dtype=a.dtype), (a, b), backward_fn)


# ---------------------------------------------------------------------------
# 2-D upsampling over (..., H, W, C) layouts
# ---------------------------------------------------------------------------

def _interpolation_matrix(size: int, factor: int, mode: str, dtype) -> np.ndarray:
    out = size * factor
    matrix = np.zeros((out, size), dtype=np.float64)
    for i in range(out):
        if mode == "nearest":
            matrix[i, i // factor] = 1.0
            continue
        src = min(max((i + 0.5) / factor - 0.5, 0.0), size - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix.astype(dtype)


def _upsample(kind: str, x: Tensor, factor: int) -> Tensor:
    x = _as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"{kind}: expected (..., H, W, C) input, got {x.shape}")
    if factor < 1:
        raise DomainError(f"{kind}: factor must be >= 1, got {factor}")
    mode = "nearest" if kind == "upsample_nearest" else "bilinear"
    rows = _interpolation_matrix(x.shape[-3], factor, mode, x.dtype)
    cols = _interpolation_matrix(x.shape[-2], factor, mode, x.dtype)

    def backward_fn(g):
        return (np.einsum("ia,jb,...ijc->...abc", rows, cols, g, optimize=True),)

    data = np.einsum("ia,jb,...abc->...ijc", rows, cols, x.data, optimize=True)
    return _result(kind, data.astype(x.dtype), (x,), backward_fn)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    return _upsample("upsample_nearest", x, factor)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Half-pixel bilinear upsampling with edge clamping."""
    return _upsample("upsample_bilinear", x, factor)


# ---------------------------------------------------------------------------
# Optimization and gradient checking
# ---------------------------------------------------------------------------

def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """
    One bias-corrected adaptive-moment update; gradients are zeroed afterwards.

    Args:
        params: Parameters with populated gradients.
        lr: Learning rate (> 0).
        beta1: First-moment decay.
        beta2: Second-moment decay.
        eps: Denominator stabilizer.
    """
    if not lr > 0:
        raise DomainError(f"adam_step: learning rate must be > 0, got {lr}")
    for param in params:
        param.step_count += 1
        grad = param.grad
        param.m = beta1 * param.m + (1.0 - beta1) * grad
        param.v = beta2 * param.v + (1.0 - beta2) * grad * grad
        m_hat = param.m / (1.0 - beta1 ** param.step_count)
        v_hat = param.v / (1.0 - beta2 ** param.step_count)
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.data.dtype)
        param.zero_grad()


class Adam:
    """Holds the hyper-parameters for repeated `adam_step` calls."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if not lr > 0:
            raise DomainError(f"Adam: learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self):
        adam_step(self.params, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """
    Compares reverse-mode gradients of `f` against central differences.

    Runs in 64-bit. Parameters reached by `f` accumulate gradients as a side
    effect; build the function's modules inside `precision("float64")`.

    Args:
        f: Scalar-valued tensor function.
        x: Input point.
        h: Finite-difference step.

    Returns:
        max over coordinates of |analytic - fd| / max(1, |fd|).
    """
    point = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision("float64"):
        leaf = Tensor(point.copy(), requires_grad=True)
        with GradTape() as tape:
            loss = f(leaf)
        if loss.data.size != 1:
            raise ContractError(f"grad_check: f must be scalar-valued, got shape {loss.shape}")
        if loss.requires_grad:
            tape.backward(loss)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(point)

        worst = 0.0
        for index in np.ndindex(point.shape):
            plus, minus = point.copy(), point.copy()
            plus[index] += h
            minus[index] -= h
            numeric = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2.0 * h)
            error = abs(analytic[index] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, error)
    return worst
