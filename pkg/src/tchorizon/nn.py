"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations run eagerly on numpy arrays.  While a :class:`Tape` is active
(``with Tape() as tape:``) every operation whose inputs require gradients is
recorded together with its vector-Jacobian product; ``tape.backward(loss)``
replays the record in reverse and accumulates into ``Parameter.grad``.

Shapes follow ``[C, H, W]`` per frame, with optional leading batch/time axes.
"""
from __future__ import annotations

import base64
import contextvars
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFinite, NotScalar, ShapeMismatch

_active_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("tape", default=None)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFinite(f"non-finite values in tensor {name or ''}".strip())
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NotScalar(f"item() needs one element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)


class Parameter(Tensor):
    """Trainable tensor.  The value may be updated in place by optimisers."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)
        self.data.setflags(write=True)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc):
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.data.size != 1 or loss.ndim > 1:
            raise NotScalar(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if not self.records and loss.requires_grad:
            leaves[id(loss)] = loss
        for out, inputs, vjp in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for inp, gi in zip(inputs, vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    leaves[key] = inp
        for key, t in leaves.items():
            if key not in grads:
                continue
            if isinstance(t, Parameter):
                t.grad = t.grad + grads[key]
            elif t.grad is None:
                t.grad = grads[key]
            else:
                t.grad = t.grad + grads[key]


def _result(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFinite(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    data = np.ascontiguousarray(data, dtype=np.float64)
    data.setflags(write=False)
    out.data, out.requires_grad, out.grad, out.name = data, needs, None, None
    tape = _active_tape.get()
    if needs and tape is not None:
        tape.records.append((out, tuple(inputs), vjp))
    return out


def primitive(data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable, op: str = "custom") -> Tensor:
    """Register a user-defined primitive: ``vjp(g)`` returns one gradient per input."""
    return _result(np.asarray(data, dtype=np.float64), inputs, vjp, op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)), "mul")


def hadamard(a, b) -> Tensor:
    """Elementwise product of two equally shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"hadamard: {a.shape} vs {b.shape}")
    return mul(a, b)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _result(a.data * c, (a,), lambda g: (g * c,), "scale")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign to avoid overflow in exp
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


tanh_op = tanh


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def tan(a) -> Tensor:
    a = as_tensor(a)
    y = np.tan(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 + y * y),), "tan")


def abs_(a) -> Tensor:
    """Absolute value; the subgradient at zero is taken as zero."""
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def huber(x, x_hat) -> Tensor:
    """Elementwise Huber loss with unit threshold."""
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    _check_broadcast(x, x_hat, "huber")
    d = x.data - x_hat.data
    ad = np.abs(d)
    y = np.where(ad <= 1.0, 0.5 * d * d, ad - 0.5)
    dd = np.clip(d, -1.0, 1.0)
    return _result(y, (x, x_hat),
                   lambda g: (_unbroadcast(g * dd, x.shape), _unbroadcast(-g * dd, x_hat.shape)),
                   "huber")


# -- reductions and reshaping ----------------------------------------------------

def sum_(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _result(np.mean(a.data), (a,), lambda g: (np.full(a.shape, g / n),), "mean")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _result(y, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def select(a, axis: int, index: int) -> Tensor:
    """``a`` indexed at ``index`` along ``axis`` (that axis is dropped)."""
    a = as_tensor(a)
    ax = axis % a.ndim

    def vjp(g):
        full = np.zeros(a.shape)
        idx = [slice(None)] * a.ndim
        idx[ax] = index
        full[tuple(idx)] = g
        return (full,)

    return _result(np.take(a.data, index, axis=ax), (a,), vjp, "select")


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    ax = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), vjp, "slice")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatch("stack of nothing")
    if any(t.shape != ts[0].shape for t in ts):
        raise ShapeMismatch("stack: shapes differ")
    y = np.stack([t.data for t in ts], axis=axis)
    ax = axis % y.ndim
    return _result(y, ts, lambda g: tuple(np.take(g, i, axis=ax) for i in range(len(ts))), "stack")


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        y = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(ts)))

    return _result(y, ts, vjp, "concat")


def concat_channels(tensors: Sequence) -> Tensor:
    """Concatenate along the channel axis (third from last)."""
    return concat(tensors, axis=-3)


def global_avg_pool(a) -> Tensor:
    """Mean over the two trailing spatial axes: ``[..., C, H, W] -> [..., C]``."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise ShapeMismatch(f"global_avg_pool needs [..., C, H, W], got {a.shape}")
    hw = a.shape[-1] * a.shape[-2]
    return _result(a.data.mean(axis=(-2, -1)), (a,),
                   lambda g: (np.broadcast_to(g[..., None, None] / hw, a.shape).copy(),), "gap")


def fully_connected(x, weight, bias) -> Tensor:
    """Single-output linear layer: ``[..., D] -> [...]`` with ``weight [1, D]``."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if weight.ndim != 2 or weight.shape[0] != 1 or x.shape[-1] != weight.shape[1]:
        raise ShapeMismatch(f"fully_connected: x {x.shape}, weight {weight.shape}")
    if bias.data.size != 1:
        raise ShapeMismatch(f"fully_connected: bias must hold one value, got {bias.shape}")
    w = weight.data[0]
    y = x.data @ w + bias.data.reshape(())

    def vjp(g):
        gx = g[..., None] * w
        gw = (g[..., None] * x.data).reshape(-1, w.size).sum(axis=0)[None, :]
        return gx, gw, np.sum(g).reshape(bias.shape)

    return _result(y, (x, weight, bias), vjp, "fc")


# -- convolution -----------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int) -> int:
    return (n + 2 * (k // 2) - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1) -> Tensor:
    """2D cross-correlation with zero "same" padding.

    ``x`` is ``[C_in, H, W]`` or ``[N, C_in, H, W]``; ``kernel`` is
    ``[C_out, C_in, A, B]`` with odd ``A`` and ``B``.  With ``stride`` > 1 the
    output size is ``floor((H + 2*(A//2) - A) / stride) + 1``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        inputs.append(bias)
    if kernel.ndim != 4:
        raise ShapeMismatch(f"kernel must be [C_out, C_in, A, B], got {kernel.shape}")
    c_out, c_in, ka, kb = kernel.shape
    if ka % 2 == 0 or kb % 2 == 0:
        raise ShapeMismatch(f"kernel spatial size must be odd, got {ka}x{kb}")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or xd.shape[1] != c_in:
        raise ShapeMismatch(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeMismatch(f"conv2d: bias {bias.shape} for {c_out} output channels")
    n, _, h, w = xd.shape
    pa, pb = ka // 2, kb // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (pa, pa), (pb, pb)))
    cols = sliding_window_view(xp, (ka, kb), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = cols.shape[2], cols.shape[3]
    # [N, Ho, Wo, C_in*A*B] @ [C_in*A*B, C_out]
    cols2 = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c_in * ka * kb)
    kmat = kernel.data.reshape(c_out, -1)
    y = (cols2 @ kmat.T).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    if bias is not None:
        y = y + bias.data[None, :, None, None]

    def vjp(g):
        gb = g[None] if unbatched else g
        g2 = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (g2.T @ cols2).reshape(kernel.shape)
        gcols = (g2 @ kmat).reshape(n, ho, wo, c_in, ka, kb)
        gxp = np.zeros(xp.shape)
        for a in range(ka):
            for b in range(kb):
                gxp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride] += \
                    gcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pa:pa + h, pb:pb + w]
        if unbatched:
            gx = gx[0]
        out = [gx, gk]
        if bias is not None:
            out.append(gb.sum(axis=(0, 2, 3)))
        return out

    return _result(y[0] if unbatched else y, inputs, vjp, "conv2d")


# -- initialisation and checkpoints ----------------------------------------------

def init_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, name: str) -> Parameter:
    bound = np.sqrt(1.0 / fan_in)
    return Parameter(rng.uniform(-bound, bound, size=tuple(shape)), name)


CHECKPOINT_FORMAT = "tchorizon-checkpoint"
CHECKPOINT_VERSION = 1


def checkpoint_to_json(params: Mapping[str, Tensor], meta: Mapping | None = None) -> dict:
    """Serialise ``name -> tensor`` as shapes plus base64 little-endian float64 data."""
    tensors = {}
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        tensors[name] = {"shape": list(arr.shape),
                         "data": base64.b64encode(arr.tobytes()).decode("ascii")}
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "meta": dict(meta or {}), "tensors": tensors}


def checkpoint_from_json(doc: Mapping) -> dict[str, np.ndarray]:
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint {doc.get('format')} v{doc.get('version')}")
    out = {}
    for name, t in doc["tensors"].items():
        arr = np.frombuffer(base64.b64decode(t["data"]), dtype="<f8").astype(np.float64)
        out[name] = arr.reshape(t["shape"])
    return out


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], meta: Mapping | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_to_json(params, meta), indent=1))


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    return checkpoint_from_json(doc), doc.get("meta", {})


# -- gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [k for k, v in self.max_rel_error.items() if not v <= self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def numeric_gradient(fn: Callable[[], Tensor], param: Parameter, eps: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * eps)
    return grad


def grad_check(fn: Callable[[], Tensor], params: Iterable[Parameter], tolerance: float = 1e-4,
               eps: float = 1e-5,
               analytic: Callable[[], Mapping[str, np.ndarray]] | None = None) -> GradCheckReport:
    """Compare tape gradients of the scalar ``fn()`` with central differences.

    ``analytic`` may supply gradients to check instead of the tape's own, which
    is how a hand-written derivative is validated.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.zero_grad()
        with Tape() as tape:
            loss = fn()
        tape.backward(loss)
        got = {p.name: p.grad.copy() for p in params}
    else:
        got = dict(analytic())
    report = GradCheckReport(tolerance)
    for p in params:
        num = numeric_gradient(fn, p, eps)
        report.max_rel_error[p.name] = float(np.max(relative_error(got[p.name], num), initial=0.0))
    return report
