"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value in the network is a `Tensor` wrapping a contiguous numpy
float64 array.  Ops build a tape of closures; `backward` walks it once in
reverse topological order and accumulates gradients into `.grad`.
Serializations are explicit index permutations (`gather_permute`) so that
every reordering in the network is auditable and exactly invertible.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError, PermutationError, ShapeError

EPS_LAYER_NORM = 1e-5

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape construction (evaluation-only forwards)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_backward", "_parents", "op",
                 "_epoch")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self.op = ""  # tape node kind; "" for leaves
        self._epoch = 0  # visit mark for the backward traversal

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; the named functions below do the work
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by op '{op}'")


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    backward: Callable[[np.ndarray], None],
    op: str,
    check: bool = True,
) -> Tensor:
    """Create an op output; registers the closure only when grads are needed.

    This is the extension point fused ops (e.g. the scan recurrence) use to
    join the tape with a hand-derived backward rule.  `check=False` is for
    ops that provably map finite inputs to finite outputs (index moves,
    bounded activations, normalization): any non-finite value in a graph of
    such ops must first appear at a checked producer.
    """
    if check:
        _check_finite(data, op)
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)  # private copy; later adds mutate it
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return make_node(out, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return make_node(out, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        with np.errstate(over="ignore"):
            out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return make_node(out, (a, b), backward, "mul")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul supports rank 1/2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ad, bd = a.data, b.data
        if a.ndim == 2 and b.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, ad.T @ g)
        elif a.ndim == 2 and b.ndim == 1:
            _accum(a, np.outer(g, bd))
            _accum(b, ad.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            _accum(a, g @ bd.T)
            _accum(b, np.outer(ad, g))
        else:  # 1D @ 1D -> scalar
            _accum(a, g * bd)
            _accum(b, g * ad)

    return make_node(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# elementwise unary ops


def neg(x: Tensor) -> Tensor:
    def backward(g):
        _accum(x, -g)

    return make_node(-x.data, (x,), backward, "neg", check=False)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow -> inf -> NumericalError below
        out = np.exp(x.data)

    def backward(g):
        _accum(x, g * out)

    return make_node(out, (x,), backward, "exp")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # evaluated piecewise to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        _accum(x, g * out * (1.0 - out))

    return make_node(out, (x,), backward, "sigmoid", check=False)


def softplus(x: Tensor) -> Tensor:
    z = x.data
    out = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))

    def backward(g):
        _accum(x, g * _sigmoid(z))

    return make_node(out, (x,), backward, "softplus", check=False)


def silu(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    out = x.data * s

    def backward(g):
        _accum(x, g * (s + x.data * s * (1.0 - s)))

    return make_node(out, (x,), backward, "silu", check=False)


def abs_(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def backward(g):
        _accum(x, g * np.sign(x.data))

    return make_node(out, (x,), backward, "abs", check=False)


_UNARY = {"exp": exp, "softplus": softplus, "sigmoid": sigmoid, "silu": silu, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "matmul": matmul}


def apply_unary(op: str, x: Tensor) -> Tensor:
    if op not in _UNARY:
        raise ValueError(f"unknown unary op '{op}'")
    return _UNARY[op](x)


def apply_binary(op: str, a: Tensor, b: Tensor) -> Tensor:
    if op not in _BINARY:
        raise ValueError(f"unknown binary op '{op}'")
    return _BINARY[op](a, b)


# ---------------------------------------------------------------------------
# reductions and reshaping


def sum_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(x, np.broadcast_to(g, x.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(x, np.broadcast_to(ge, x.shape).copy())

    return make_node(out, (x,), backward, "sum")


def mean_(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        _accum(x, g.reshape(x.shape))

    return make_node(out, (x,), backward, "reshape", check=False)


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    ax = tuple(reversed(range(x.ndim))) if axes is None else axes
    inv = np.argsort(ax)
    out = np.ascontiguousarray(x.data.transpose(ax))

    def backward(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)))

    return make_node(out, (x,), backward, "transpose", check=False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = list(tensors)
    out = np.concatenate([t.data for t in ts], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in ts])

    def backward(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(t, g[tuple(idx)])

    return make_node(out, tuple(ts), backward, "concat", check=False)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accum(x, full)

    return make_node(out, (x,), backward, "slice", check=False)


# ---------------------------------------------------------------------------
# index ops


def invert_permutation(idx: np.ndarray) -> np.ndarray:
    inv = np.empty_like(idx)
    inv[idx] = np.arange(idx.size)
    return inv


def _validate_permutation(idx: np.ndarray, n: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1 or idx.size != n:
        raise PermutationError(f"index map has size {idx.size}, axis extent is {n}")
    seen = np.zeros(n, dtype=bool)
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= n:
        raise PermutationError("index out of range")
    seen[idx] = True
    if not seen.all():
        raise PermutationError("index map is not a bijection")
    return idx


def gather_permute(x: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """out[k] = x[idx[k]] along `axis`; idx must be a bijection.

    Backward scatters through the inverse permutation, so round trips are
    bit-exact.
    """
    idx = _validate_permutation(idx, x.shape[axis])
    inv = invert_permutation(idx)
    out = np.ascontiguousarray(np.take(x.data, idx, axis=axis))

    def backward(g):
        _accum(x, np.ascontiguousarray(np.take(g, inv, axis=axis)))

    return make_node(out, (x,), backward, "gather_permute", check=False)


def take(x: Tensor, idx: np.ndarray, axis: int = 0) -> Tensor:
    """General integer gather; backward scatter-adds (indices may repeat)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.min(initial=0) < 0 or idx.max(initial=-1) >= x.shape[axis]:
        raise ShapeError("take: index out of range")
    out = np.ascontiguousarray(np.take(x.data, idx, axis=axis))

    def backward(g):
        full = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            fm = np.moveaxis(full, axis, 0)
            np.add.at(fm, idx, np.moveaxis(g, axis, 0))
        _accum(x, full)

    return make_node(out, (x,), backward, "take", check=False)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Normalize the last (channel) axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm affine params must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + EPS_LAYER_NORM)
    xhat = xc * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        _accum(x, inv_std * (dxhat - m1 - xhat * m2))
        red = tuple(range(g.ndim - 1))
        _accum(gamma, (g * xhat).sum(axis=red))
        _accum(beta, g.sum(axis=red))

    return make_node(out, (x, gamma, beta), backward, "layer_norm", check=False)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------------------
# backward pass


_epoch_counter = 0


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative DFS with epoch marks; tapes can be deeper than the recursion limit
    global _epoch_counter
    _epoch_counter += 1
    epoch = _epoch_counter
    topo: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if node._epoch == epoch:
            continue
        node._epoch = epoch
        stack.append((node, True))
        for p in node._parents:
            if p._epoch != epoch:
                stack.append((p, False))
    return topo


def backward(loss: Tensor, leaves: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into `.grad` of every tensor reachable on the tape and
    returns a map from `id(tensor)` to its gradient.  Leaves listed in
    `leaves` that the loss does not reach get explicit zero gradients.
    The tape is consumed: closures are dropped as they run.
    """
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    topo = _toposort(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            node._backward = None
            node._parents = ()
    grads = {id(t): t.grad for t in topo if t.requires_grad and t.grad is not None}
    if leaves is not None:
        for t in leaves:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)
            if t.requires_grad:
                grads[id(t)] = t.grad
    return grads


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic grad and central differences.

    relative error per coordinate: |analytic - numeric| / max(1, |analytic|).
    `f` must be a deterministic scalar-valued function of its argument.
    """
    xv = Tensor(x.data.copy(), requires_grad=True)
    backward(f(xv), leaves=[xv])
    analytic = xv.grad.reshape(-1)

    flat = x.data.reshape(-1).copy()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        fm = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
