"""Small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations the continual-learning model needs are provided. Each op
builds its output Tensor, records its parents and a closure that pushes the
output gradient back into them. ``Tensor.backward`` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
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
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _tracks(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf tensor with an SGD momentum buffer.

    ``decay`` marks whether weight decay applies to it; ``floor`` (if set) is
    a lower bound enforced after every optimizer step.
    """

    __slots__ = ("momentum", "decay", "floor")

    def __init__(self, data, name: str = "", decay: bool = True, floor: float | None = None):
        super().__init__(np.array(data, dtype=DTYPE, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)
        self.decay = decay
        self.floor = floor

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(_tracks(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            out.append(g[tuple(idx)])
        return tuple(out)

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward)


def total(a: Tensor) -> Tensor:
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),)
    )


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of each row of an [N, d] tensor.

    The gradient of a zero row is taken as zero.
    """
    n = np.sqrt((a.data**2).sum(axis=1))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        d = a.data / safe[:, None]
        d[n == 0] = 0.0
        return (g[:, None] * d,)

    return _node(n, (a,), backward)


def l2_normalize(a: Tensor) -> Tensor:
    """Row-wise unit normalization of an [N, d] tensor. Zero rows are an error."""
    n = np.sqrt((a.data**2).sum(axis=1, keepdims=True))
    if np.any(n == 0):
        raise ValueError("cannot normalize a zero-norm row")
    u = a.data / n

    def backward(g):
        return ((g - u * (g * u).sum(axis=1, keepdims=True)) / n,)

    return _node(u, (a,), backward)


# ---------------------------------------------------------------------------
# network layers


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)
    else:
        parents = (x, weight)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _node(out, parents, backward)


def _im2col(xp: np.ndarray, k: int, h: int, w: int) -> np.ndarray:
    """[N,C,Hp,Wp] padded input -> [N, C*k*k, h*w] patches in (c, i, j) order."""
    n, c = xp.shape[:2]
    shifts = [xp[:, :, i : i + h, j : j + w] for i in range(k) for j in range(k)]
    return np.stack(shifts, axis=2).reshape(n, c * k * k, h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, h: int, w: int) -> np.ndarray:
    n, c = shape[:2]
    out = np.zeros(shape)
    cols = cols.reshape(n, c, k * k, h, w)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + h, j : j + w] += cols[:, :, i * k + j]
    return out


def conv2d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation. ``x`` is [N,C,H,W], ``kernel`` is [F,C,k,k]."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, kc, k, k2 = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {kc}")
    if k != k2:
        raise ValueError("conv2d: kernel must be square")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ValueError("conv2d: kernel larger than padded input")
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, ho, wo)
    wmat = kernel.data.reshape(f, c * k * k)
    out = np.matmul(wmat, cols).reshape(n, f, ho, wo)

    def backward(g):
        g3 = g.reshape(n, f, ho * wo)
        gk = np.tensordot(g3, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape)
        if not _tracks(x):
            return (None, gk)
        gxp = _col2im(np.matmul(wmat.T, g3), xp.shape, k, ho, wo)
        return (gxp[:, :, padding : padding + h, padding : padding + w], gk)

    return _node(out, (x, kernel), backward)


def avg_pool2d(x: Tensor, window: int = 2) -> Tensor:
    if window != 2:
        raise ValueError("only 2x2 pooling is supported")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2d needs even spatial extents, got {h}x{w}")
    d = x.data
    out = (d[:, :, 0::2, 0::2] + d[:, :, 1::2, 0::2] + d[:, :, 0::2, 1::2] + d[:, :, 1::2, 1::2]) * 0.25

    def backward(g):
        gx = np.empty(x.shape)
        q = g * 0.25
        for i in (0, 1):
            for j in (0, 1):
                gx[:, :, i::2, j::2] = q
        return (gx,)

    return _node(out, (x,), backward)


# ---------------------------------------------------------------------------
# losses


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    targets = np.asarray(targets, dtype=np.int64)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ValueError(f"expected {n} targets, got shape {targets.shape}")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target index out of range for {k} classes")
    logp = log_softmax(logits.data)
    loss = -logp[np.arange(n), targets].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), targets] -= 1.0
        return (g * d / n,)

    return _node(np.asarray(loss), (logits,), backward)


# ---------------------------------------------------------------------------
# optimizer


@dataclass(frozen=True)
class Schedule:
    lr_max: float
    lr_min: float
    total_steps: int
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.lr_max <= 0 or self.lr_min < 0 or self.lr_min > self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max and lr_max > 0")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def lr(self, step: int) -> float:
        cos = math.cos(math.pi * step / self.total_steps)
        return self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + cos)


def sgd_step(
    params: Iterable[Parameter], schedule: Schedule, step: int, max_grad_norm: float | None = None
) -> float:
    """One momentum-SGD update at the cosine-annealed rate; returns the rate used.

    With ``max_grad_norm`` each parameter's raw gradient is rescaled to at most
    that norm before weight decay is added.
    """
    lr = schedule.lr(step)
    for p in params:
        g = p.grad
        if max_grad_norm is not None:
            norm = float(np.sqrt((g**2).sum()))
            if norm > max_grad_norm:
                g = g * (max_grad_norm / norm)
        if p.decay and schedule.weight_decay:
            g = g + schedule.weight_decay * p.data
        p.momentum = schedule.momentum * p.momentum + g
        p.data = p.data - lr * p.momentum
        if p.floor is not None:
            p.data = np.maximum(p.data, p.floor)
        p.zero_grad()
    return lr


# ---------------------------------------------------------------------------
# finite-difference verification


def numeric_grad(
    fn: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-6, indices: Sequence[int] | None = None
) -> np.ndarray:
    """Central differences; only the flat ``indices`` are filled when given (others stay 0)."""
    x = np.array(x, dtype=DTYPE, copy=True)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        orig = flat[i]
        flat[i] = orig + eps
        hi = fn(x)
        flat[i] = orig - eps
        lo = fn(x)
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise FloatingPointError("function value is not finite")
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def stable_numeric_grad(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    eps: float = 1e-4,
    indices: Sequence[int] | None = None,
    levels: int = 4,
) -> np.ndarray:
    """Central differences on the ladder eps, eps/10, ..., picked per coordinate.

    A large step can straddle a ReLU kink, a small one drowns in round-off
    when the function value is big. Each adjacent pair of steps is scored by
    its disagreement plus the round-off bound of its finer step, and the
    coarser estimate of the best pair is kept. No analytic gradient is used.
    """
    d = np.stack([numeric_grad(fn, x, eps / 10**k, indices) for k in range(levels)])
    noise = 8 * np.finfo(DTYPE).eps * abs(fn(np.asarray(x, dtype=DTYPE))) / (eps / 10 ** np.arange(1, levels))
    score = np.abs(d[:-1] - d[1:]) + noise.reshape((-1,) + (1,) * (d.ndim - 1))
    best = score.argmin(axis=0)
    return np.take_along_axis(d[:-1], best[None], axis=0)[0]


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    epsilon: float = 1e-6,
    max_coords: int | None = None,
    seed: int = 0,
    adaptive: bool = False,
) -> float:
    """Max relative error between the analytic and central-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor. The denominator per coordinate is
    max(|analytic|, |numeric|, 1e-8). With ``max_coords`` set, larger tensors are
    checked on that many coordinates drawn without replacement. ``adaptive``
    swaps plain central differences for :func:`stable_numeric_grad`.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    x = Tensor(np.array(point, dtype=DTYPE, copy=True), requires_grad=True)
    out = fn(x)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("function value is not finite")
    out.backward()
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    idx = np.arange(x.data.size)
    if max_coords is not None and idx.size > max_coords:
        idx = np.sort(np.random.default_rng(seed).choice(idx.size, max_coords, replace=False))
    numeric_fn = stable_numeric_grad if adaptive else numeric_grad
    numeric = numeric_fn(lambda v: float(fn(Tensor(v)).data), x.data, epsilon, idx)
    a, n = analytic.reshape(-1)[idx], numeric.reshape(-1)[idx]
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / denom).max())
