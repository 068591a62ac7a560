"""Dense float64 tensors with a recorded-tape reverse mode.

Every differentiable operation is a :class:`Function` subclass registered in
``OPS`` under a stable name. The registry is what the gradient checker walks,
so a new op is not finished until it has a check case in
:mod:`hiercon.gradcheck`.

Arrays are stored row-major and marked read-only once an op has produced
them; gradients are plain ``numpy`` arrays accumulated on ``Tensor.grad``.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8

OPS: dict[str, type["Function"]] = {}


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        arr.setflags(write=False)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._ctx: Function | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones) to every tensor that requires it."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._ctx is not None:
                for parent in node._ctx.parents:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._ctx is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._ctx.backward(g)
            for parent, pg in zip(node._ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


class Function:
    """One recorded op: ``forward`` computes the value, ``backward`` maps the
    upstream gradient to one gradient (or ``None``) per parent."""

    name = ""

    def __init__(self, *parents: Tensor):
        self.parents = parents

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            OPS[cls.name] = cls

    @classmethod
    def apply(cls, *parents: Tensor, **kwargs) -> Tensor:
        fn = cls(*parents)
        out = Tensor(fn.forward(*(p.data for p in parents), **kwargs))
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._ctx = fn
        return out

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: tuple[int, ...], b: tuple[int, ...], op: str) -> None:
    try:
        np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a} and {b}") from None


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
        _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        da = _unbroadcast(grad @ np.swapaxes(self.b, -1, -2), self.a.shape)
        db = _unbroadcast(np.swapaxes(self.a, -1, -2) @ grad, self.b.shape)
        return da, db


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _broadcast_shape(a.shape, b.shape, "add")
        # bias-style broadcast only: the result must keep a's shape
        if np.broadcast_shapes(a.shape, b.shape) != a.shape:
            raise ShapeError(f"add: {b.shape} does not broadcast onto {a.shape}")
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return grad, _unbroadcast(grad, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        if not _compatible(a, b) or np.broadcast_shapes(a.shape, b.shape) != a.shape:
            raise ShapeError(f"mul: {b.shape} does not broadcast onto {a.shape}")
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, _unbroadcast(grad * self.a, self.b.shape)


def _compatible(a: np.ndarray, b: np.ndarray) -> bool:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        return False
    return True


class Scale(Function):
    name = "scale"

    def forward(self, a, c: float = 1.0):
        self.c = float(c)
        return a * self.c

    def backward(self, grad):
        return (grad * self.c,)


class Tanh(Function):
    name = "tanh_map"

    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


class Relu(Function):
    name = "relu"

    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis: int = -1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.y = e / e.sum(axis=axis, keepdims=True)
        return self.y

    def backward(self, grad):
        y = self.y
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, gain, bias, eps: float = LAYER_NORM_EPS):
        d = x.shape[-1]
        if gain.shape != (d,) or bias.shape != (d,):
            raise ShapeError(
                f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({d},)"
            )
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.gain = gain
        return self.xhat * gain + bias

    def backward(self, grad):
        xhat, inv = self.xhat, self.inv
        lead = tuple(range(grad.ndim - 1))
        dgain = (grad * xhat).sum(axis=lead)
        dbias = grad.sum(axis=lead)
        gx = grad * self.gain
        dx = inv * (
            gx
            - gx.mean(axis=-1, keepdims=True)
            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias


def _reduced(shape: tuple[int, ...], axis: int) -> tuple[int, ...]:
    axis = axis % len(shape)
    return shape[:axis] + shape[axis + 1:]


class MeanAxis(Function):
    name = "mean_axis"

    def forward(self, x, axis: int = 0):
        self.shape, self.axis = x.shape, axis
        return x.mean(axis=axis)

    def backward(self, grad):
        n = self.shape[self.axis]
        g = np.expand_dims(grad.reshape(_reduced(self.shape, self.axis)), self.axis) / n
        return (np.broadcast_to(g, self.shape).copy(),)


class SumAxis(Function):
    name = "sum_axis"

    def forward(self, x, axis: int = 0):
        self.shape, self.axis = x.shape, axis
        return x.sum(axis=axis)

    def backward(self, grad):
        g = np.expand_dims(grad.reshape(_reduced(self.shape, self.axis)), self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape: Sequence[int] = ()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    """Swap the last two axes."""

    name = "transpose"

    def forward(self, x):
        if x.ndim < 2:
            raise ShapeError(f"transpose: need at least 2 axes, got {x.shape}")
        return np.ascontiguousarray(np.swapaxes(x, -1, -2))

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class WeightedSum(Function):
    """``out[..., :] = sum_i w[..., i] * v[..., i, :]`` (attention read-out)."""

    name = "weighted_sum"

    def forward(self, w, v):
        if v.shape[:-1] != w.shape:
            raise ShapeError(f"weighted_sum: weights {w.shape} do not index values {v.shape}")
        self.w, self.v = w, v
        return np.einsum("...i,...id->...d", w, v)

    def backward(self, grad):
        dw = np.einsum("...d,...id->...i", grad, self.v)
        dv = self.w[..., :, None] * grad[..., None, :]
        return dw, dv


class CrossEntropy(Function):
    """Mean negative log-likelihood of integer labels under softmax(logits)."""

    name = "cross_entropy"

    def forward(self, logits, labels: np.ndarray | None = None):
        if logits.ndim != 2:
            raise ShapeError(f"cross_entropy: logits must be [N x C], got {logits.shape}")
        labels = np.asarray(labels, dtype=np.int64)
        n, c = logits.shape
        if labels.shape != (n,):
            raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
        if np.any(labels < 0) or np.any(labels >= c):
            raise ValueError(f"cross_entropy: labels must lie in [0, {c})")
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        self.p = np.exp(logp)
        self.labels = labels
        return np.array(-logp[np.arange(n), labels].mean())

    def backward(self, grad):
        n = self.labels.shape[0]
        d = self.p.copy()
        d[np.arange(n), self.labels] -= 1.0
        return (d * (float(np.reshape(grad, -1)[0]) / n),)


class CosineMatrix(Function):
    """Pairwise ``S[i, j] = f_i . f_j / (|f_i| |f_j| + eps)`` over rows of ``F``."""

    name = "cosine_matrix"

    def forward(self, f, eps: float = COSINE_EPS):
        if f.ndim != 2:
            raise ShapeError(f"cosine_matrix: expected [N x d], got {f.shape}")
        self.f = f
        self.norms = np.sqrt((f * f).sum(axis=1))
        self.gram = f @ f.T
        self.denom = np.outer(self.norms, self.norms) + eps
        return self.gram / self.denom

    def backward(self, grad):
        a = grad / self.denom
        b = -grad * self.gram / (self.denom * self.denom)
        df = (a + a.T) @ self.f
        dn = (b + b.T) @ self.norms
        safe = np.where(self.norms > 0, self.norms, 1.0)
        df += np.where(self.norms[:, None] > 0, (dn / safe)[:, None] * self.f, 0.0)
        return (df,)


# functional surface ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return Scale.apply(a, c=c)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def tanh_map(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    return LayerNorm.apply(x, gain, bias, eps=eps)


def mean_axis(x: Tensor, axis: int = 0) -> Tensor:
    return MeanAxis.apply(x, axis=axis)


def sum_axis(x: Tensor, axis: int = 0) -> Tensor:
    return SumAxis.apply(x, axis=axis)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x: Tensor) -> Tensor:
    return Transpose.apply(x)


def weighted_sum(w: Tensor, v: Tensor) -> Tensor:
    return WeightedSum.apply(w, v)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return CrossEntropy.apply(logits, labels=np.asarray(labels))


def cosine_matrix(f: Tensor, eps: float = COSINE_EPS) -> Tensor:
    return CosineMatrix.apply(f, eps=eps)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x W^T + b`` with ``weight`` stored as [out x in]."""
    if x.data.ndim == 1:
        # lift a single vector to a row and drop the axis again
        return reshape(linear(reshape(x, (1, x.shape[0])), weight, bias), (weight.shape[0],))
    return add(matmul(x, transpose(weight)), bias)


def dropout_mask(shape: Sequence[int], rate: float, rng_seed=None, training: bool = True) -> Tensor:
    """Inverted-dropout keep mask; all ones when ``rate == 0`` or not training.

    ``rng_seed`` may be an int, a seed sequence, or a ``numpy`` Generator.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    shape = tuple(shape)
    if rate == 0.0 or not training:
        return Tensor(np.ones(shape))
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


def cosine_similarity(a, b, eps: float = COSINE_EPS) -> float:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64).reshape(-1)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size == 0:
        raise ShapeError(f"cosine_similarity: need equal non-empty vectors, got {a.shape} and {b.shape}")
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + eps))


# gradient verification -------------------------------------------------------

def finite_difference_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-6,
    skip: Callable[[], bool] | None = None,
) -> float:
    """Worst relative error between the tape gradient and central differences.

    ``f`` rebuilds the scalar output from the current contents of ``params``
    (each call must be deterministic). Coordinates for which ``skip()``
    returns True after perturbation are excluded; the loss tests use this to
    mask hinge kinks.
    """
    if h <= 0:
        raise ValueError("finite-difference step must be positive")
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        base = p.data.copy()
        flat = ga.reshape(-1)
        for i in range(base.size):
            masked = False
            vals = []
            for sign in (1.0, -1.0):
                pert = base.copy().reshape(-1)
                pert[i] += sign * h
                pert = pert.reshape(base.shape)
                pert.setflags(write=False)
                p.data = pert
                vals.append(f().item())
                if skip is not None and skip():
                    masked = True
            p.data = base
            if masked:
                continue
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            denom = max(abs(flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(flat[i] - numeric) / denom)
        base.setflags(write=False)
        p.data = base
    return worst


@contextlib.contextmanager
def corrupted_backward(name: str, factor: float = 1.1) -> Iterator[None]:
    """Test hook: scale the backward rule of op ``name`` by ``factor``."""
    cls = OPS[name]
    original = cls.backward

    def broken(self, grad):
        return tuple(None if g is None else g * factor for g in original(self, grad))

    cls.backward = broken
    try:
        yield
    finally:
        cls.backward = original
