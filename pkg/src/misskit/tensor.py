"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation checks shapes explicitly; the only implicit
broadcast is between a tensor and a scalar (a Python number or a 0-d
tensor).  Operations are recorded on the innermost active :class:`Tape` of
the calling thread.  Outside a tape nothing is recorded, which is how
inference and frozen feature extraction run.

Random initialisation uses numpy's PCG64 bit generator
(``numpy.random.default_rng(seed)``), so parameter draws are reproducible
for a given seed and construction order.

>>> a = Parameter([[1.0, 2.0], [3.0, 4.0]], name="a")
>>> with Tape() as tape:
...     loss = (a @ Tensor([[1.0], [1.0]])).sum()
>>> tape.backward(loss)
>>> a.grad.tolist()
[[1.0, 1.0], [1.0, 1.0]]
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError

KL_EPS = 1e-12
LN_EPS = 1e-5
_GELU_K = math.sqrt(2.0 / math.pi)

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor owned by a model.

    Frozen parameters (``trainable=False``) behave as constants: no gradient
    is computed for them and optimizers skip them.
    """

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(data, requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


@dataclass
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered log of differentiable operations for one forward pass.

    Use as a context manager; operations executed inside the ``with`` block on
    this thread are appended in order, and :meth:`backward` replays them in
    exact reverse order.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape context exited out of order")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def _record(self, op, inputs, output, vjp) -> None:
        output._tape = self
        self.records.append(_Record(op, inputs, output, vjp))

    def clear(self) -> None:
        for rec in self.records:
            rec.output._tape = None
        self.records.clear()

    def backward(self, loss: Tensor, params: Iterable[Parameter] | None = None) -> list[str]:
        """Write d(loss)/d(leaf) into ``.grad`` of every differentiable leaf.

        When ``params`` is given, each listed trainable parameter ends with a
        gradient (zeros if the loss does not depend on it); frozen ones keep
        ``grad`` untouched.  Returns the op names in visit order.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(rec.output) for rec in self.records}
        leaves: dict[int, Tensor] = {}
        visited = []
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            visited.append(rec.op)
            for inp, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            leaf.grad = grads[key].reshape(leaf.shape).copy()
        if params is not None:
            for p in params:
                if p.trainable and id(p) not in leaves:
                    p.grad = np.zeros_like(p.data)
        return visited


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Back-propagate ``loss`` through the tape that produced it."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        for p in params or ():
            if p.trainable:
                p.grad = np.zeros_like(p.data)
        return
    loss._tape.backward(loss, params)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, inputs: tuple, vjp, op: str) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(op, inputs, out, vjp)
    return out


def _pair(a, b, op: str) -> tuple[Tensor, Tensor]:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not match")
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tabs(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(a) -> Tensor:
    """Tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_K * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _make(out, (a,), vjp, "gelu")


def minimum(a, b) -> Tensor:
    a, b = _pair(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "minimum")


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b, "maximum")
    pick_a = a.data >= b.data
    return _make(np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
                 "maximum")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clamp")


# ------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    out = np.array(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), vjp, "getitem")


def tsum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        return _make(np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.data.sum(axis=axis)
    return _make(out, (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.mean()), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),), "mean")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            raise DimensionError(
                f"concat along axis {axis}: shapes {ref} and {t.shape} disagree off-axis")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(out, tuple(tensors), vjp, "concat")


def concat_rows(tensors: Sequence) -> Tensor:
    """Token-wise concatenation."""
    return concat(tensors, axis=0)


def concat_channels(a, b) -> Tensor:
    """Channel-wise concatenation; channels of ``a`` precede those of ``b``."""
    return concat([a, b], axis=-1)


def split_channels(x) -> tuple[Tensor, Tensor]:
    """Split the last dimension into two equal halves."""
    x = _as_tensor(x)
    width = x.shape[-1] if x.ndim else 0
    if x.ndim == 0 or width % 2:
        raise DimensionError(
            f"the invertible prompter requires an even channel width, got {width}")
    c = width // 2
    return x[..., :c], x[..., c:]


def add_row(x, b) -> Tensor:
    """Add a vector ``b`` of length k to every row of ``x[..., k]``."""
    x, b = _as_tensor(x), _as_tensor(b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_row: cannot add bias {b.shape} to rows of {x.shape}")
    k = b.shape[0]
    return _make(x.data + b.data, (x, b),
                 lambda g: (g, g.reshape(-1, k).sum(axis=0)), "add_row")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add_row(y, bias)


# -------------------------------------------------------- normalisations


def softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), vjp, "softmax_rows")


def log_softmax_rows(x) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax_rows")


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    k = x.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise DimensionError(f"layer_norm: affine shapes {gain.shape}/{bias.shape} vs width {k}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, (g * xhat).reshape(-1, k).sum(axis=0), g.reshape(-1, k).sum(axis=0))

    return _make(out, (x, gain, bias), vjp, "layer_norm")


# ------------------------------------------------------------------ losses


def mse(a, b) -> Tensor:
    """Mean squared error over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} do not match")
    diff = a.data - b.data
    n = diff.size

    def vjp(g):
        ga = (2.0 * float(g) / n) * diff
        return (ga, -ga)

    return _make(np.asarray((diff * diff).mean()), (a, b), vjp, "mse")


def kl_div(p, q, eps: float = KL_EPS) -> Tensor:
    """Sum over rows of KL(p_row || q_row) = sum p * (log p - log q).

    Both arguments must be row-stochastic; logs are floored at ``eps``.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise DimensionError(f"kl_div: shapes {p.shape} and {q.shape} do not match")
    pf = np.maximum(p.data, eps)
    qf = np.maximum(q.data, eps)
    lp, lq = np.log(pf), np.log(qf)
    out = np.asarray((p.data * (lp - lq)).sum())

    def vjp(g):
        g = float(g)
        gp = g * (lp - lq + np.where(p.data > eps, 1.0, 0.0))
        gq = -g * np.where(q.data > eps, p.data / qf, 0.0)
        return (gp, gq)

    return _make(out, (p, q), vjp, "kl_div")


def cross_entropy_rows(logits, target) -> Tensor:
    """-sum target * log_softmax(logits) over all rows."""
    logits, target = _as_tensor(logits), _as_tensor(target)
    if logits.shape != target.shape:
        raise DimensionError(f"cross_entropy: shapes {logits.shape} and {target.shape} differ")
    return neg(tsum(mul(target, log_softmax_rows(logits))))


def stop_gradient(x) -> Tensor:
    return _as_tensor(x).detach()


# ------------------------------------------------------------ modules


def init_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Module:
    """Container that discovers Parameters in its attributes, recursively."""

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for p in self._walk(self, seen):
            yield p.name, p

    @staticmethod
    def _walk(obj, seen) -> Iterator[Parameter]:
        if isinstance(obj, Parameter):
            if id(obj) not in seen:
                seen.add(id(obj))
                yield obj
        elif isinstance(obj, Module):
            for value in vars(obj).values():
                yield from Module._walk(value, seen)
        elif isinstance(obj, (list, tuple)):
            for value in obj:
                yield from Module._walk(value, seen)
        elif isinstance(obj, dict):
            for value in obj.values():
                yield from Module._walk(value, seen)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.trainable = flag

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, value in state.items():
            if name not in own:
                continue
            p = own[name]
            if p.shape != tuple(value.shape):
                raise DimensionError(f"{name}: checkpoint shape {value.shape} vs {p.shape}")
            p.data = np.array(value, dtype=np.float64)


class AdamW:
    """Adam with decoupled weight decay.

    ``groups`` is a list of ``(parameters, lr)`` pairs.  Frozen parameters
    are skipped at every step, even if they somehow carry a gradient.
    Weight decay applies to matrices only (ndim >= 2).
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        self.groups = [(list(params), float(lr)) for params, lr in groups]
        self.base_lrs = [lr for _, lr in self.groups]
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def scale_lr(self, factor: float) -> None:
        self.groups = [(params, base * factor) for (params, _), base in zip(self.groups, self.base_lrs)]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for params, lr in self.groups:
            for p in params:
                if not p.trainable or p.grad is None:
                    continue
                key = id(p)
                m = self._m.get(key)
                if m is None:
                    m = self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                v = self._v[key]
                m *= self.b1
                m += (1.0 - self.b1) * p.grad
                v *= self.b2
                v += (1.0 - self.b2) * p.grad * p.grad
                if self.weight_decay and p.ndim >= 2:
                    p.data *= 1.0 - lr * self.weight_decay
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ----------------------------------------------------------- checking


def numerical_gradient(f: Callable[[], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` w.r.t. ``x.data``.

    ``f`` must recompute its value from scratch (no tape needed).
    """
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    num = float(np.linalg.norm(np.asarray(a) - np.asarray(b)))
    den = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return num / den
