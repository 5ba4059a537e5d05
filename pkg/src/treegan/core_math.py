"""Dense tensors with tape-based reverse-mode differentiation, plus Adam.

Operations are recorded per array op (not per scalar). Every backward rule is
itself written with recorded ops, so gradients can be differentiated again;
the gradient penalty relies on this.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Adam",
    "ShapeError",
    "ContractError",
    "set_default_dtype",
    "get_default_dtype",
    "default_dtype",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "as_tensor",
    "linear_forward",
    "leaky_relu",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "norm",
    "log_softmax",
    "repeat_rows",
    "grad",
    "backward",
    "grad_check",
    "xavier_uniform",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


_DTYPE = np.dtype(np.float64)
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype


def get_default_dtype() -> np.dtype:
    return _DTYPE


@contextlib.contextmanager
def default_dtype(dtype):
    old = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = enabled
    try:
        yield
    finally:
        _GRAD_ENABLED = old


def no_grad():
    """Context manager that disables recording."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
                dtype = data.dtype
            else:
                dtype = _DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._ctx = None

    @property
    def shape(self) -> tuple:
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
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # arithmetic
    def __add__(self, other):
        return Add.apply(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return Add.apply(as_tensor(other, self.dtype), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return Div.apply(self, other)

    def __rtruediv__(self, other):
        return Div.apply(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, p):
        return Pow.apply(self, p=float(p))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int) -> "Tensor":
        return MaxAxis.apply(self, axis=axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return Transpose.apply(self, axes=axes)

    def swap_last(self) -> "Tensor":
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(tuple(axes))

    def broadcast_to(self, shape) -> "Tensor":
        return BroadcastTo.apply(self, shape=tuple(shape))

    def sum_to(self, shape) -> "Tensor":
        return SumTo.apply(self, shape=tuple(shape))


class Parameter(Tensor):
    """A trainable leaf tensor with a stable name and an accumulated gradient."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Function:
    """One recorded array operation.

    ``forward`` works on raw arrays. ``backward`` receives the output gradient
    as a Tensor and must return one Tensor (or None) per input, computed with
    recorded ops so that second derivatives exist.
    """

    __slots__ = ("inputs", "needs", "kw")

    @classmethod
    def apply(cls, *inputs, **kw) -> Tensor:
        if len(inputs) > 1:
            ref = next((t for t in inputs if isinstance(t, Tensor)), None)
            dtype = ref.dtype if ref is not None else None
            inputs = tuple(as_tensor(t, dtype) for t in inputs)
        fn = cls()
        fn.kw = kw
        out = Tensor(fn.forward(*(t.data for t in inputs)))
        if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
            fn.inputs = inputs
            fn.needs = tuple(t.requires_grad for t in inputs)
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, g: Tensor):
        raise NotImplementedError


def _const(arr, like: Tensor) -> Tensor:
    return Tensor(np.asarray(arr, dtype=like.dtype))


class Add(Function):
    def forward(self, a, b):
        return a + b

    def backward(self, g):
        a, b = self.inputs
        return (g.sum_to(a.shape) if self.needs[0] else None,
                g.sum_to(b.shape) if self.needs[1] else None)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Mul(Function):
    def forward(self, a, b):
        return a * b

    def backward(self, g):
        a, b = self.inputs
        return ((g * b).sum_to(a.shape) if self.needs[0] else None,
                (g * a).sum_to(b.shape) if self.needs[1] else None)


class Div(Function):
    # Zero denominators yield zero; this is the subgradient used for norms at the origin.
    def forward(self, a, b):
        out = np.zeros(np.broadcast_shapes(a.shape, b.shape), dtype=np.result_type(a, b))
        np.divide(a, b, out=out, where=np.broadcast_to(b != 0, out.shape))
        return out

    def backward(self, g):
        a, b = self.inputs
        ga = gb = None
        if self.needs[0]:
            ga = (g / b).sum_to(a.shape)
        if self.needs[1]:
            gb = (-(g * a) / (b * b)).sum_to(b.shape)
        return ga, gb


class Pow(Function):
    def forward(self, a):
        return a ** self.kw["p"]

    def backward(self, g):
        (a,) = self.inputs
        p = self.kw["p"]
        if p == 1.0:
            return (g,)
        return (g * (a ** (p - 1.0)) * p,)


class Exp(Function):
    def forward(self, a):
        return np.exp(a)

    def backward(self, g):
        return (g * exp(self.inputs[0]),)


class Log(Function):
    def forward(self, a):
        return np.log(a)

    def backward(self, g):
        return (g / self.inputs[0],)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        if b.ndim == 2 and a.ndim > 2 and a.flags.c_contiguous:
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:])
        return a @ b

    def backward(self, g):
        a, b = self.inputs
        ga = gb = None
        if self.needs[0]:
            ga = matmul(g, b.swap_last()).sum_to(a.shape)
        if self.needs[1]:
            if b.ndim == 2 and a.ndim > 2:
                # one large product instead of a batched product followed by a sum
                k, n = b.shape
                gb = matmul(a.reshape(-1, k).swap_last(), g.reshape(-1, n))
            else:
                gb = matmul(a.swap_last(), g).sum_to(b.shape)
        return ga, gb


class Sum(Function):
    def forward(self, a):
        return np.sum(a, axis=self.kw["axis"], keepdims=self.kw["keepdims"])

    def backward(self, g):
        (a,) = self.inputs
        axis = self.kw["axis"]
        if not self.kw["keepdims"] and axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = sorted(ax % a.ndim for ax in axes)
            shape = list(g.shape)
            for ax in axes:
                shape.insert(ax, 1)
            g = g.reshape(tuple(shape))
        elif axis is None and not self.kw["keepdims"]:
            g = g.reshape((1,) * a.ndim)
        return (g.broadcast_to(a.shape),)


class BroadcastTo(Function):
    def forward(self, a):
        return np.broadcast_to(a, self.kw["shape"])

    def backward(self, g):
        return (g.sum_to(self.inputs[0].shape),)


class SumTo(Function):
    def forward(self, a):
        return _sum_to(a, self.kw["shape"])

    def backward(self, g):
        return (g.broadcast_to(self.inputs[0].shape),)


def _sum_to(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


class Reshape(Function):
    def forward(self, a):
        return a.reshape(self.kw["shape"])

    def backward(self, g):
        return (g.reshape(self.inputs[0].shape),)


class Transpose(Function):
    def forward(self, a):
        return np.transpose(a, self.kw["axes"])

    def backward(self, g):
        return (g.transpose(tuple(np.argsort(self.kw["axes"]))),)


class LeakyReLU(Function):
    def forward(self, a):
        # valid because 0 < slope < 1
        return np.maximum(a, a * np.asarray(self.kw["slope"], dtype=a.dtype))

    def backward(self, g):
        (a,) = self.inputs
        # derivative at exactly 0 is 1
        slope = np.asarray(self.kw["slope"], dtype=a.dtype)
        return (g * _const(np.where(a.data >= 0, 1.0, slope), a),)


class MaxAxis(Function):
    def forward(self, a):
        return np.max(a, axis=self.kw["axis"])

    def backward(self, g):
        (a,) = self.inputs
        axis = self.kw["axis"] % a.ndim
        # ties go to the lowest index (np.argmax returns the first maximum)
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        mask = np.zeros(a.shape, dtype=a.dtype)
        np.put_along_axis(mask, idx, 1.0, axis=axis)
        shape = list(g.shape)
        shape.insert(axis, 1)
        return (g.reshape(tuple(shape)).broadcast_to(a.shape) * _const(mask, a),)


class LogSoftmax(Function):
    def forward(self, a):
        shifted = a - a.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def backward(self, g):
        (a,) = self.inputs
        soft = exp(log_softmax(a))
        return (g - soft * g.sum(axis=-1, keepdims=True),)


class Norm(Function):
    def forward(self, a):
        return np.sqrt(np.sum(a * a, axis=self.kw["axis"]))

    def backward(self, g):
        (a,) = self.inputs
        axes = self.kw["axis"]
        axes = (axes,) if isinstance(axes, int) else tuple(axes)
        axes = sorted(ax % a.ndim for ax in axes)
        shape = list(g.shape)
        for ax in axes:
            shape.insert(ax, 1)
        shape = tuple(shape)
        nrm = norm(a, axis=self.kw["axis"]).reshape(shape)
        return (g.reshape(shape) * (a / nrm),)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def exp(x: Tensor) -> Tensor:
    return Exp.apply(x)


def log(x: Tensor) -> Tensor:
    return Log.apply(x)


def sqrt(x: Tensor) -> Tensor:
    return Pow.apply(x, p=0.5)


def norm(x: Tensor, axis) -> Tensor:
    """Euclidean norm over ``axis`` (int or tuple); gradient at the origin is 0."""
    return Norm.apply(x, axis=axis)


def log_softmax(x: Tensor) -> Tensor:
    return LogSoftmax.apply(x)


def leaky_relu(x: Tensor, negative_slope: float = 0.2) -> Tensor:
    """Elementwise ``max(x, slope*x)`` for slope in (0, 1)."""
    if not 0.0 < negative_slope < 1.0:
        raise ContractError(f"negative_slope must lie in (0, 1), got {negative_slope}")
    return LeakyReLU.apply(as_tensor(x), slope=float(negative_slope))


def linear_forward(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` with the bias broadcast over rows."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"linear: input shape {x.shape} does not match weight shape {W.shape}")
    y = matmul(x, W)
    if b is not None:
        if b.shape != (W.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {W.shape}")
        y = y + b
    return y


def repeat_rows(x: Tensor, repeats: int, axis: int = -2) -> Tensor:
    """Repeat every slice along ``axis`` ``repeats`` times, keeping copies contiguous."""
    if repeats == 1:
        return x
    axis = axis % x.ndim
    shape = x.shape
    expanded = x.reshape(shape[: axis + 1] + (1,) + shape[axis + 1:])
    tiled = expanded.broadcast_to(shape[: axis + 1] + (repeats,) + shape[axis + 1:])
    return tiled.reshape(shape[:axis] + (shape[axis] * repeats,) + shape[axis + 1:])


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for inp in node._ctx.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output: Tensor | None = None,
         create_graph: bool = False) -> list[Tensor | None]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    Only the part of the tape that leads to ``inputs`` is traversed. With
    ``create_graph`` the returned gradients are themselves recorded and can be
    differentiated again. Inputs not reached by ``output`` get None.
    """
    if grad_output is None:
        if output.size != 1:
            raise ContractError(f"gradient of a non-scalar output of shape {output.shape} needs grad_output")
        grad_output = Tensor(np.ones(output.shape, dtype=output.dtype))
    topo = _toposort(output)
    wanted = {id(t) for t in inputs}
    relevant: set[int] = set()
    for node in topo:
        if id(node) in wanted or (
            node._ctx is not None and any(id(i) in relevant for i in node._ctx.inputs)
        ):
            relevant.add(id(node))
    grads: dict[int, Tensor] = {id(output): grad_output}
    with _grad_mode(create_graph):
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node._ctx is None or id(node) not in relevant:
                continue
            ctx = node._ctx
            saved = ctx.needs
            ctx.needs = tuple(n and id(i) in relevant for n, i in zip(saved, ctx.inputs))
            try:
                in_grads = ctx.backward(g)
            finally:
                ctx.needs = saved
            for inp, ig in zip(ctx.inputs, in_grads):
                if ig is None or id(inp) not in relevant:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
    return [grads.get(id(t)) for t in inputs]


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> None:
    """Accumulate d(loss)/d(param) into ``param.grad`` for every reachable Parameter."""
    if loss.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is None:
        params = [t for t in _toposort(loss) if isinstance(t, Parameter)]
    params = list(params)
    for p, g in zip(params, grad(loss, params)):
        if g is not None:
            p.grad = p.grad + g.data


class Adam:
    """Adam with bias correction. Gradients are read, never cleared."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.0, 0.99), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            m = self.m[p.name] = b1 * self.m[p.name] + (1.0 - b1) * g
            v = self.v[p.name] = b2 * self.v[p.name] + (1.0 - b2) * (g * g)
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(dtype or _DTYPE)


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-5,
               max_coords: int = 10_000, rng: np.random.Generator | None = None,
               floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``wrt``. Above
    ``max_coords`` coordinates per tensor, a random subsample is checked.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    wrt = list(wrt)
    for t in wrt:
        if t.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit tensors")
    loss = fn()
    analytic = grad(loss, wrt)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, a in zip(wrt, analytic):
        a = np.zeros_like(t.data) if a is None else a.data
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        a_flat = a.reshape(-1)
        for c in coords:
            orig = flat[c]
            # recording stays on: losses such as the gradient penalty differentiate internally
            flat[c] = orig + eps
            fp = fn().item()
            flat[c] = orig - eps
            fm = fn().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * eps)
            err = abs(a_flat[c] - num) / max(abs(a_flat[c]), abs(num), floor)
            worst = max(worst, err)
    return worst
