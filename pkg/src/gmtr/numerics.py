"""Dense float64 tensors with reverse-mode autodiff on a numpy backend.

Every op records its parents and a vector-Jacobian closure on the output
tensor. ``backward`` linearises the recorded graph into a tape (reverse
topological order) and walks it once, accumulating gradients on the leaf
tensors that require them.
"""
from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

MASK_FILL = -1e30

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class EmptySupportError(ValueError):
    """A masked softmax row has no admissible entry."""


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def zero_grad(self) -> None:
        self.grad = None

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


class Parameter(Tensor):
    """A leaf tensor owned by a Module; trainable unless frozen."""

    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, name: str | None = None):
        super().__init__(np.array(data, dtype=np.float64), requires_grad, name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU; smooth, so finite differences stay clean."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, (a, b), vjp)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without repeated indices inside one operand."""
    a, b = as_tensor(a), as_tensor(b)
    ins, out_idx = subscripts.replace(" ", "").split("->")
    ia, ib = ins.split(",")
    for idx in (ia, ib, out_idx):
        if len(set(idx)) != len(idx):
            raise DimensionError(f"repeated index in einsum operand: {subscripts}")
    sizes: dict[str, int] = {}
    for idx, arr in ((ia, a.data), (ib, b.data)):
        if len(idx) != arr.ndim:
            raise DimensionError(f"einsum '{subscripts}' rank mismatch for shape {arr.shape}")
        for ch, n in zip(idx, arr.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(
                    f"einsum '{subscripts}' size mismatch: {a.shape} vs {b.shape}")
    out = np.einsum(subscripts, a.data, b.data)

    def grad_for(target: str, other: str, other_data: np.ndarray, g: np.ndarray):
        keep = "".join(ch for ch in target if ch in out_idx or ch in other)
        res = np.einsum(f"{out_idx},{other}->{keep}", g, other_data)
        if keep != target:
            # indices summed away inside this operand alone broadcast back
            expand = [i for i, ch in enumerate(target) if ch not in keep]
            res = np.broadcast_to(np.expand_dims(res, expand),
                                  tuple(sizes[ch] for ch in target))
        return np.ascontiguousarray(res)

    def vjp(g):
        return grad_for(ia, ib, b.data, g), grad_for(ib, ia, a.data, g)

    return _make(out, (a, b), vjp)


# -- reductions and shape ---------------------------------------------------

def _ordered_sum(x: np.ndarray, axis, keepdims: bool = False) -> np.ndarray:
    """Sum of the sorted terms: bitwise independent of the input order along ``axis``."""
    return np.sort(x, axis=axis).sum(axis=axis, keepdims=keepdims)


def tsum(a, axis=None, keepdims: bool = False, order_invariant: bool = False) -> Tensor:
    """Sum; ``order_invariant`` sorts the terms first (needs an int ``axis``)."""
    a = as_tensor(a)
    if order_invariant:
        if not isinstance(axis, int):
            raise ValueError("order_invariant sum needs a single integer axis")
        out = _ordered_sum(a.data, axis, keepdims)
    else:
        out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def scatter(values, index: tuple, shape: tuple[int, ...]) -> Tensor:
    """Dense tensor of ``shape`` with ``values`` added at ``index`` (zeros elsewhere)."""
    values = as_tensor(values)
    out = np.zeros(shape)
    np.add.at(out, index, values.data)
    return _make(out, (values,), lambda g: (g[index].reshape(values.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# -- normalisations -----------------------------------------------------------

def softmax(x, mask=None, axis: int = -1, order_invariant: bool = False) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is 0 come out exactly 0.

    ``order_invariant`` makes the normaliser independent of the order of entries
    along ``axis``, so permuting them permutes the output bit for bit.
    """
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise EmptySupportError("empty attention support")
        z = np.where(mask, z, MASK_FILL)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    total = _ordered_sum(e, axis, True) if order_invariant else e.sum(axis=axis, keepdims=True)
    y = e / total

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def log_normalize(x, axis: int, log_target: float = 0.0) -> Tensor:
    """``x - logsumexp(x, axis) + log_target``: one Sinkhorn half-step in log space."""
    x = as_tensor(x)
    mx = x.data.max(axis=axis, keepdims=True)
    shifted = np.exp(x.data - mx)
    total = shifted.sum(axis=axis, keepdims=True)
    lse = mx + np.log(total)
    probs = shifted / total
    return _make(x.data - lse + log_target, (x,),
                 lambda g: (g - probs * g.sum(axis=axis, keepdims=True),))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm affine shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), vjp)


# -- backward ---------------------------------------------------------------

def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` with every node after its inputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns the gradient contributed by this call, keyed by leaf tensor.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = grads[key] + pg if key in grads else pg
    return leaves


# -- modules and initialisation --------------------------------------------

def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Parameter container; submodules and Parameters are discovered by attribute."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise KeyError(f"missing parameter {missing[0]}")
        for name, arr in state.items():
            if name not in own:
                raise KeyError(f"unexpected parameter {name}")
            if own[name].shape != tuple(arr.shape):
                raise DimensionError(
                    f"parameter {name}: expected shape {own[name].shape}, got {tuple(arr.shape)}")
            own[name].data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def freeze(self) -> None:
        for p in self.parameters():
            p.requires_grad = False


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


# -- finite differences -----------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    checked: int
    max_rel: float
    mean_rel: float
    max_abs_small: float
    small: int
    skipped: bool = False


@dataclass
class GradCheckReport:
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def max_rel(self) -> float:
        vals = [p.max_rel for p in self.params if not p.skipped]
        return max(vals, default=0.0)

    @property
    def mean_rel(self) -> float:
        vals = [p.mean_rel for p in self.params if not p.skipped and p.checked > p.small]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def max_abs_small(self) -> float:
        vals = [p.max_abs_small for p in self.params if not p.skipped]
        return max(vals, default=0.0)

    def passed(self, rel_tol: float, abs_tol: float = 1e-9) -> bool:
        return self.max_rel <= rel_tol and self.max_abs_small <= abs_tol


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Parameter] | Iterable[tuple[str, Parameter]],
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    small: float = 1e-5,
) -> GradCheckReport:
    """Compare tape gradients against central differences ``(L(t+h) - L(t-h)) / 2h``.

    Entries where both gradients are below ``small`` in magnitude are judged by
    absolute difference only. ``max_entries`` samples that many coordinates per
    parameter (all of them when None). Frozen parameters are reported as skipped.
    """
    params = dict(params)
    rng = rng if rng is not None else np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    backward(loss)
    report = GradCheckReport()
    for name, p in params.items():
        if not p.requires_grad:
            report.params.append(ParamCheck(name, 0, 0.0, 0.0, 0.0, 0, skipped=True))
            continue
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        rels, smalls = [], []
        for k in idx:
            orig = flat[k]
            with no_grad():
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
            flat[k] = orig
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[k]
            scale = max(abs(a), abs(numeric))
            if scale < small:
                smalls.append(abs(a - numeric))
            else:
                rels.append(abs(a - numeric) / scale)
        report.params.append(ParamCheck(
            name, len(idx),
            max(rels, default=0.0), float(np.mean(rels)) if rels else 0.0,
            max(smalls, default=0.0), len(smalls)))
    return report
