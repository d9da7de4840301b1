"""Dense-tensor arithmetic with reverse-mode gradients on top of numpy.

Every differentiable primitive registers a backward rule in ``BACKWARD_RULES``.
Outputs of primitives applied to tracked tensors remember their inputs and a
global recording index; :func:`backward` replays the recorded operations in
exact reverse order, so gradients are reproducible bit for bit.
"""
from __future__ import annotations

import contextlib
import hashlib
import itertools
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "BACKWARD_RULES",
    "ContractViolation",
    "GradCheckReport",
    "GradientTape",
    "NonFiniteError",
    "RngStream",
    "Tensor",
    "backward",
    "constant",
    "cross_entropy",
    "embedding",
    "finite_diff_grad",
    "gelu",
    "get_dtype",
    "grad_check",
    "l2_norm",
    "layer_norm",
    "precision",
    "set_precision",
    "softmax",
    "tensor",
]


class ContractViolation(ValueError):
    """Raised when a caller breaks an operation's precondition."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is NaN or infinite."""


# --------------------------------------------------------------------------
# precision

_state = threading.local()
_DTYPES = {32: np.float32, 64: np.float64}


def get_dtype() -> type:
    return getattr(_state, "dtype", np.float32)


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ContractViolation(f"precision must be 32 or 64 bits, got {bits}")
    _state.dtype = _DTYPES[bits]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the default float width (32 or 64)."""
    previous = get_dtype()
    set_precision(bits)
    try:
        yield
    finally:
        _state.dtype = previous


# --------------------------------------------------------------------------
# tensors and the recording machinery

_counter = itertools.count()


class _Node:
    __slots__ = ("op", "inputs", "ctx", "seq")

    def __init__(self, op: str, inputs: tuple, ctx: dict, seq: int):
        self.op = op
        self.inputs = inputs
        self.ctx = ctx
        self.seq = seq


class Tensor:
    """A dense float array that can participate in gradient recording."""

    __slots__ = ("data", "tracked", "_node", "__weakref__")
    # make numpy defer binary operators to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, tracked: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.tracked = tracked
        self._node: _Node | None = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"expected a scalar tensor, got dims {self.dims}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(dims={self.dims}{flag}, dtype={self.data.dtype.name})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return neg(self)
    def __abs__(self): return absolute(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in np.atleast_1d(axis)]))
        return reduce_sum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *dims) -> "Tensor":
        if len(dims) == 1 and isinstance(dims[0], (tuple, list)):
            dims = tuple(dims[0])
        return reshape(self, dims)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, tracked: bool = False) -> Tensor:
    return Tensor(data, tracked=tracked)


def constant(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def _emit(op: str, out: np.ndarray, inputs: tuple, ctx: dict | None = None) -> Tensor:
    result = Tensor(out, dtype=out.dtype)
    if any(t.tracked for t in inputs):
        result.tracked = True
        result._node = _Node(op, inputs, ctx or {}, next(_counter))
    return result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# primitives
#
# A backward rule maps (ctx, inputs, grad_of_output) to one gradient per input
# (None where the input is not tracked).

BackwardRule = Callable[[dict, tuple, np.ndarray], tuple]
BACKWARD_RULES: dict[str, BackwardRule] = {}


def rule(name: str):
    def register(fn: BackwardRule) -> BackwardRule:
        BACKWARD_RULES[name] = fn
        return fn
    return register


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("add", a.data + b.data, (a, b))


@rule("add")
def _add_bw(ctx, inputs, g):
    a, b = inputs
    return _unbroadcast(g, a.dims), _unbroadcast(g, b.dims)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("sub", a.data - b.data, (a, b))


@rule("sub")
def _sub_bw(ctx, inputs, g):
    a, b = inputs
    return _unbroadcast(g, a.dims), _unbroadcast(-g, b.dims)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("mul", a.data * b.data, (a, b))


@rule("mul")
def _mul_bw(ctx, inputs, g):
    a, b = inputs
    ga = _unbroadcast(g * b.data, a.dims) if a.tracked else None
    gb = _unbroadcast(g * a.data, b.dims) if b.tracked else None
    return ga, gb


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    return _emit("div", a.data / b.data, (a, b))


@rule("div")
def _div_bw(ctx, inputs, g):
    a, b = inputs
    ga = _unbroadcast(g / b.data, a.dims) if a.tracked else None
    gb = _unbroadcast(-g * a.data / (b.data * b.data), b.dims) if b.tracked else None
    return ga, gb


def neg(a: Tensor) -> Tensor:
    return _emit("neg", -a.data, (a,))


@rule("neg")
def _neg_bw(ctx, inputs, g):
    return (-g,)


def power(a: Tensor, exponent: float) -> Tensor:
    return _emit("power", a.data ** exponent, (a,), {"p": float(exponent)})


@rule("power")
def _power_bw(ctx, inputs, g):
    (a,) = inputs
    p = ctx["p"]
    return (g * p * a.data ** (p - 1.0),)


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.data.ndim > 2 and b.data.ndim == 2:
        # shared weight: one 2-D product is faster than a stacked matmul
        lead = a.data.shape[:-1]
        out = (a.data.reshape(-1, a.data.shape[-1]) @ b.data).reshape(lead + (b.data.shape[-1],))
    else:
        out = np.matmul(a.data, b.data)
    return _emit("matmul", out, (a, b))


@rule("matmul")
def _matmul_bw(ctx, inputs, g):
    a, b = inputs
    ga = gb = None
    if a.tracked:
        if b.data.ndim == 2 and a.data.ndim > 2:
            ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.dims)
        elif b.data.ndim == 1:
            ga = _unbroadcast(np.multiply.outer(g, b.data), a.dims)
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.dims)
    if b.tracked:
        if b.data.ndim == 2 and a.data.ndim > 2:
            k = a.data.shape[-1]
            gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
        elif b.data.ndim == 1:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g[..., None], b.dims + (1,)).reshape(b.dims)
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.dims)
    return ga, gb


def reshape(a: Tensor, dims: Sequence[int]) -> Tensor:
    return _emit("reshape", a.data.reshape(dims), (a,))


@rule("reshape")
def _reshape_bw(ctx, inputs, g):
    return (g.reshape(inputs[0].dims),)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(a.data.ndim)))
    return _emit("transpose", a.data.transpose(axes), (a,), {"axes": axes})


@rule("transpose")
def _transpose_bw(ctx, inputs, g):
    return (g.transpose(np.argsort(ctx["axes"])),)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _emit("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), {"axis": axis, "keepdims": keepdims})


@rule("sum")
def _sum_bw(ctx, inputs, g):
    (a,) = inputs
    axis = ctx["axis"]
    if axis is not None and not ctx["keepdims"]:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.dims).copy(),)


def exp(a: Tensor) -> Tensor:
    return _emit("exp", np.exp(a.data), (a,))


@rule("exp")
def _exp_bw(ctx, inputs, g):
    return (g * np.exp(inputs[0].data),)


def log(a: Tensor) -> Tensor:
    return _emit("log", np.log(a.data), (a,))


@rule("log")
def _log_bw(ctx, inputs, g):
    return (g / inputs[0].data,)


def tanh(a: Tensor) -> Tensor:
    return _emit("tanh", np.tanh(a.data), (a,))


@rule("tanh")
def _tanh_bw(ctx, inputs, g):
    t = np.tanh(inputs[0].data)
    return (g * (1.0 - t * t),)


def absolute(a: Tensor) -> Tensor:
    return _emit("abs", np.abs(a.data), (a,))


@rule("abs")
def _abs_bw(ctx, inputs, g):
    # np.sign(0) == 0 gives the subgradient convention at the kink
    return (g * np.sign(inputs[0].data),)


def l2_norm(a: Tensor, axis=None) -> Tensor:
    """Euclidean norm over ``axis`` (all axes by default); gradient 0 at the origin."""
    return _emit("l2_norm", np.sqrt((a.data * a.data).sum(axis=axis)), (a,), {"axis": axis})


@rule("l2_norm")
def _l2_norm_bw(ctx, inputs, g):
    (a,) = inputs
    axis = ctx["axis"]
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    scale = np.where(norm > 0, 1.0 / safe, 0.0)
    if axis is None:
        g = np.reshape(g, (1,) * a.data.ndim)
    else:
        g = np.expand_dims(g, axis)
    return (g * a.data * scale,)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    return _emit("gelu", 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x * x * x))), (a,))


@rule("gelu")
def _gelu_bw(ctx, inputs, g):
    x = inputs[0].data
    u = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", out, (a,), {"axis": axis, "out": out})


@rule("softmax")
def _softmax_bw(ctx, inputs, g):
    s, axis = ctx["out"], ctx["axis"]
    return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    return _emit("layer_norm", out, (x, gain, bias), {"xhat": xhat, "inv": inv})


@rule("layer_norm")
def _layer_norm_bw(ctx, inputs, g):
    x, gain, bias = inputs
    xhat, inv = ctx["xhat"], ctx["inv"]
    gx = ggain = gbias = None
    if x.tracked:
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
    if gain.tracked:
        ggain = (g * xhat).reshape(-1, g.shape[-1]).sum(axis=0)
    if bias.tracked:
        gbias = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, ggain, gbias


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``weight`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids, dtype=np.int64)
    return _emit("embedding", weight.data[ids], (weight,), {"ids": ids})


@rule("embedding")
def _embedding_bw(ctx, inputs, g):
    (weight,) = inputs
    out = np.zeros_like(weight.data)
    # np.add.at accumulates sequentially in index order
    np.add.at(out, ctx["ids"].reshape(-1), g.reshape(-1, weight.dims[-1]))
    return (out,)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Weighted mean token cross-entropy per sequence.

    ``logits`` is (batch, positions, vocab); ``targets`` and ``weights`` are
    (batch, positions). Each row's loss is sum(w * nll) / sum(w); rows with
    zero total weight are a contract violation.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = np.asarray(weights, dtype=logits.data.dtype)
    totals = weights.sum(axis=-1)
    if np.any(totals <= 0):
        raise ContractViolation("every sequence needs at least one scored position")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    out = (nll * weights).sum(axis=-1) / totals
    return _emit("cross_entropy", out, (logits,), {"logp": logp, "targets": targets, "w": weights / totals[:, None]})


@rule("cross_entropy")
def _cross_entropy_bw(ctx, inputs, g):
    p = np.exp(ctx["logp"])
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, ctx["targets"][..., None], 1.0, axis=-1)
    return ((p - onehot) * (ctx["w"] * g[:, None])[..., None],)


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


# --------------------------------------------------------------------------
# reverse sweep


@dataclass
class GradientTape:
    """Recorded operations reachable from one output, in recording order."""

    records: list[Tensor] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradientTape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [out]
        while stack:
            t = stack.pop()
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t._node.inputs)
        found.sort(key=lambda t: t._node.seq)
        return cls(found)

    def leaves(self) -> list[Tensor]:
        out, seen = [], set()
        for t in self.records:
            for inp in t._node.inputs:
                if inp.tracked and inp._node is None and id(inp) not in seen:
                    seen.add(id(inp))
                    out.append(inp)
        return out


def backward(loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Gradients of a scalar ``loss`` with respect to tracked leaf tensors.

    Returns a map from every tracked leaf reached by the recording (plus any
    tensor listed in ``wrt``) to its gradient. Tensors off the path get zeros.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got dims {loss.dims}")
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError(f"loss is not finite: {loss.data.reshape(-1)[0]}")

    tape = GradientTape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out in reversed(tape.records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        parts = BACKWARD_RULES[node.op](node.ctx, node.inputs, g)
        for inp, gi in zip(node.inputs, parts):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    result: dict[Tensor, Tensor] = {}
    leaves = tape.leaves()
    if loss.tracked and loss._node is None:
        leaves.append(loss)
    for leaf in leaves:
        g = grads.get(id(leaf))
        result[leaf] = Tensor(g if g is not None else np.zeros_like(leaf.data), dtype=leaf.data.dtype)
    for t in wrt or ():
        if t not in result:
            result[t] = Tensor(np.zeros_like(t.data), dtype=t.data.dtype)
    return result


# --------------------------------------------------------------------------
# numerical oracles


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        v = v.data
    arr = np.asarray(v, dtype=np.float64)
    if arr.size != 1:
        raise ContractViolation(f"function must return a scalar, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def finite_diff_grad(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of scalar ``f`` at ``x``."""
    if h <= 0:
        raise ContractViolation("step size h must be positive")
    base = np.array(x.data, copy=True)
    flat = base.reshape(-1)
    out = np.zeros(flat.shape, dtype=base.dtype)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = _scalar_value(f(Tensor(base, dtype=base.dtype)))
        flat[i] = orig - h
        f_minus = _scalar_value(f(Tensor(base, dtype=base.dtype)))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            coord = tuple(int(k) for k in np.unravel_index(i, base.shape))
            raise NonFiniteError(f"non-finite evaluation at coordinate {coord}")
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(out.reshape(base.shape), dtype=base.dtype)


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    analytic: np.ndarray
    numeric: np.ndarray


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5, rtol: float = 1e-4) -> GradCheckReport:
    """Compare :func:`backward` against central differences in 64-bit mode."""
    with precision(64):
        xt = Tensor(np.asarray(x.data, dtype=np.float64), tracked=True)
        loss = f(xt)
        analytic = backward(loss, wrt=[xt])[xt].data
        numeric = finite_diff_grad(f, Tensor(xt.data), h).data
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel <= rtol, analytic, numeric)


# --------------------------------------------------------------------------
# seeded randomness


def _label_key(label) -> int:
    digest = hashlib.sha256(str(label).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class RngStream:
    """Seeded random stream, split into independent children by label path.

    The same (seed, path) always yields the same draws regardless of which
    other streams were used before or concurrently.
    """

    seed: int
    path: tuple = ()

    def child(self, *labels) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(str(label) for label in labels))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(entropy=self.seed & (2**64 - 1), spawn_key=tuple(_label_key(p) for p in self.path))
        return np.random.Generator(np.random.PCG64(seq))

    def normal(self, dims: Sequence[int], scale: float = 1.0) -> np.ndarray:
        return self.generator().normal(0.0, scale, size=tuple(dims))
