"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation builds a node holding its parents and a
closure that maps the output gradient to parent gradients.  ``backward``
orders the reachable nodes into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import contextlib
import math
import warnings

import numpy as np

_GRAD_ENABLED = True


class DimensionError(ValueError):
    pass


class LabelError(ValueError):
    pass


class NumericInputError(ValueError):
    pass


class ContractError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

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
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar, all routed through the primitives below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = parents
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a) -> Tensor:
    return mul(a, -1.0)


def power(a: Tensor, p: float) -> Tensor:
    a = as_tensor(a)
    out = a.data ** p

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return _make(out, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), bw, "log")


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            # shared weight: fold the batch axes into one GEMM
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner),)

    return _make(out, (a,), bw, "gelu")


def layer_norm(a: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply the optional affine."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_data = gamma.data if gamma is not None else None
    out = xhat if gamma is None else xhat * g_data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (a, gamma, beta) if t is not None)
    n = x.shape[-1]

    def bw(g):
        gx = g * g_data if gamma is not None else g
        dx = inv / n * (n * gx - gx.sum(-1, keepdims=True)
                        - xhat * (gx * xhat).sum(-1, keepdims=True))
        grads = [dx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return _make(out, parents, bw, "layer_norm")


def _check_finite(x: np.ndarray) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericInputError("softmax received non-finite input")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Fused log(softmax(.)), exact in the saturated regime."""
    a = as_tensor(a)
    _check_finite(a.data)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "concat")


def take(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing (slices, integer arrays)."""
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(i, (slice, int, type(Ellipsis))) or i is None for i in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), bw, "slice")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "mean")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g.reshape(a.shape),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


# ------------------------------------------------------------ compositions

def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm rows; all-zero rows stay zero."""
    a = as_tensor(a)
    sq = tsum(mul(a, a), axis=axis, keepdims=True)
    # zero rows: add 1 to the denominator so the result is 0, not nan
    guard = (sq.data == 0).astype(np.float64)
    return mul(a, power(add(sq, guard), -0.5))


def cosine_similarity(a, b) -> Tensor:
    """Cosine of two vectors. A zero-norm input yields 0 with a warning."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    if not np.any(a.data) or not np.any(b.data):
        warnings.warn("cosine_similarity on a zero-norm vector; returning 0", RuntimeWarning,
                      stacklevel=2)
    return tsum(mul(l2_normalize(a), l2_normalize(b)))


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosines between rows of ``a`` [n x d] and rows of ``b`` [m x d]."""
    return matmul(l2_normalize(as_tensor(a)), transpose(l2_normalize(as_tensor(b))))


def cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets``.

    ``weights`` (per-sample, optional) turn the mean into a weighted mean.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != t.shape[0]:
        raise DimensionError(f"cross_entropy expects [B x C] logits for {t.shape[0]} targets, "
                             f"got {logits.shape}")
    C = logits.shape[1]
    if t.size and (t.min() < 0 or t.max() >= C):
        raise LabelError(f"target out of range [0, {C}): {t.min()}..{t.max()}")
    picked = take(log_softmax(logits), (np.arange(t.shape[0]), t))
    if weights is None:
        return neg(mean(picked))
    w = np.asarray(weights, dtype=np.float64)
    return neg(tsum(mul(picked, w / w.sum())))


def kd_loss(student_logits: Tensor, teacher_logits, T: float = 2.0, weights=None) -> Tensor:
    """Batch-mean ``T^2 * KL(softmax(teacher/T) || softmax(student/T))``.

    Optional per-sample ``weights`` make it a weighted mean.
    """
    teacher = as_tensor(teacher_logits).data
    z = teacher / T - (teacher / T).max(axis=-1, keepdims=True)
    logp_t = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p_t = np.exp(logp_t)
    logq = log_softmax(mul(as_tensor(student_logits), 1.0 / T))
    kl = tsum(mul(add(logp_t, neg(logq)), p_t), axis=-1)
    if weights is None:
        return mul(mean(kl), T * T)
    w = np.asarray(weights, dtype=np.float64)
    return mul(tsum(mul(kl, w / w.sum())), T * T)


# ------------------------------------------------------------------ autodiff

class Tape:
    """Operations reachable from one output, parents before children."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
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
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def replay(self, root: Tensor, seed_grad: np.ndarray) -> dict[int, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(root): seed_grad}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        return grads


def backward(loss: Tensor) -> Tape:
    """Accumulate d loss / d leaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.record(loss)
    tape.replay(loss, np.ones_like(loss.data))
    return tape
