"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape (or when nothing requires
a gradient) every op is a plain numpy computation, which is what inference
and attack evaluation use.

Images are laid out NHWC throughout.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "NonFiniteError",
    "TapeConsumedError",
    "backward_stats",
    "add",
    "sub",
    "mul",
    "scale",
    "affine",
    "matmul",
    "dense",
    "conv2d",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "softmax_cross_entropy",
    "reshape",
    "transpose",
    "concat",
    "take",
    "avg_pool2d",
    "mean",
    "sum_all",
    "attention",
    "sign",
    "forward_scalar_loss",
    "backward_params",
    "backward_all",
    "input_gradient",
    "finite_difference_oracle",
]


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN or Inf."""


class TapeConsumedError(RuntimeError):
    pass


class Tensor:
    """An array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# tape


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


class _Stats(threading.local):
    def __init__(self):
        self.backward_passes = 0

    def reset(self):
        self.backward_passes = 0


#: Per-thread count of completed backward passes (test instrumentation).
backward_stats = _Stats()


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; ops executed inside the block whose inputs
    require gradients are appended in execution order, which is a valid
    topological order. ``backward`` replays the record in reverse and may be
    called once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False
        # filled by forward_scalar_loss
        self.params: dict[str, Tensor] = {}
        self.input: Tensor | None = None

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def record(self, out, inputs, backward, name):
        self.nodes.append(_Node(out, tuple(inputs), backward, name))

    @property
    def op_names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def backward(self, loss: Tensor, seed: np.ndarray | None = None, check_finite: bool = True):
        """Propagate d(loss) back through the tape.

        Returns a dict ``id(tensor) -> gradient`` covering every tensor that
        received one. Leaf tensors that require grad also get ``.grad`` set.
        """
        if self.consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        self.consumed = True
        if seed is None:
            if loss.data.size != 1:
                raise ValueError(f"backward needs a scalar loss or an explicit seed, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=loss.dtype)}
        produced = set()
        for node in reversed(self.nodes):
            produced.add(id(node.out))
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        leaves = {id(t): t for n in self.nodes for t in n.inputs if t.requires_grad and id(t) not in produced}
        for key, t in leaves.items():
            g = grads.get(key)
            t.grad = np.zeros_like(t.data) if g is None else g
            if check_finite and not np.all(np.isfinite(t.grad)):
                raise NonFiniteError("non-finite gradient in backward pass")
        backward_stats.backward_passes += 1
        self.nodes = []
        return grads


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _emit(data: np.ndarray, inputs: Sequence[Tensor], backward, name: str) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, inputs, backward, name)
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


# ---------------------------------------------------------------------------
# elementwise / structural primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def affine(a: Tensor, offset: float, divisor: float) -> Tensor:
    """``(a - offset) / divisor`` with scalar constants."""
    off, div = a.dtype.type(offset), a.dtype.type(divisor)
    return _emit((a.data - off) / div, (a,), lambda g: (g / div,), "affine")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(a: Tensor, index: int, axis: int) -> Tensor:
    """Select a single position along ``axis`` (the axis is dropped)."""

    def backward(g):
        out = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = index
        out[tuple(sl)] = g
        return (out,)

    return _emit(np.take(a.data, index, axis=axis), (a,), backward, "take")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _emit(
        np.broadcast_to(a.data, shape).copy(),
        (a,),
        lambda g: (_unbroadcast(g, a.shape),),
        "broadcast",
    )


def mean(a: Tensor, axis) -> Tensor:
    axis = tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)
    axis = tuple(ax % a.ndim for ax in axis)
    count = int(np.prod([a.shape[ax] for ax in axis]))

    def backward(g):
        g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit(a.data.mean(axis=axis), (a,), backward, "mean")


def sum_all(a: Tensor) -> Tensor:
    return _emit(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
        "sum",
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * d,)

    return _emit(out.astype(a.dtype), (a,), backward, "gelu")


def sign(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with sign(0) = 0."""
    return np.sign(x)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return _emit(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any number of leading axes)."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"dense: input feature size {x.shape[-1]} != weight rows {w.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (w.shape[1],))
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit(out, inputs, backward, "dense")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 'same' convolution. x: (N,H,W,C), w: (kh,kw,C,O) with odd kh, kw."""
    x, w = _as_tensor(x), _as_tensor(w)
    kh, kw, cin, cout = w.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d: kernel sizes must be odd")
    n, h, wd, _ = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    # (N,H,W,C,kh,kw) -> (N,H,W,kh,kw,C)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    cols = win.reshape(n * h * wd, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(n, h, wd, cout)
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(n, h, wd, kh, kw, cin)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + h, j : j + wd, :] += dcols[:, :, :, i, j, :]
            gx = dxp[:, ph : ph + h, pw : pw + wd, :]
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _emit(out, inputs, backward, "conv2d")


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    n, h, wd, c = x.shape
    if h % k or wd % k:
        raise ValueError(f"avg_pool2d: spatial size {(h, wd)} not divisible by {k}")
    out = x.data.reshape(n, h // k, k, wd // k, k, c).mean(axis=(2, 4))

    def backward(g):
        g = np.repeat(np.repeat(g, k, axis=1), k, axis=2)
        return (g / (k * k),)

    return _emit(out, (x,), backward, "avg_pool2d")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    d = x.shape[-1]

    def backward(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = g.reshape(-1, d)
        return (
            gx,
            (lead * xhat.reshape(-1, d)).sum(axis=0),
            lead.sum(axis=0),
        )

    return _emit(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit(p, (x,), backward, "softmax")


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of softmax(logits) against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits.data)
    nll = -logp[np.arange(n), labels]
    if reduction == "mean":
        value, k = nll.mean(), 1.0 / n
    elif reduction == "sum":
        value, k = nll.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g * k),)

    return _emit(np.asarray(value, dtype=logits.dtype), (logits,), backward, "softmax_cross_entropy")


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention on (..., T, d) tensors, built from primitives."""
    d = q.shape[-1]
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    scores = scale(matmul(q, kt), 1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# model-level helpers (duck-typed on ``model.forward(x: Tensor, params) -> Tensor``)


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


def _param_tensors(model, requires_grad: bool) -> dict[str, Tensor]:
    return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in model.params.items()}


def forward_scalar_loss(
    model,
    batch,
    labels,
    loss: str = "cross_entropy",
    reduction: str = "mean",
    params_grad: bool = True,
    input_grad: bool = False,
):
    """Run the model on ``batch`` under a fresh tape and return ``(loss, tape)``.

    ``tape.params`` maps parameter names to the tensors used in the pass and
    ``tape.input`` is the input tensor, so one backward serves both.
    """
    if loss != "cross_entropy":
        raise ValueError(f"unknown loss selector {loss!r}")
    tape = Tape()
    with tape:
        x = Tensor(np.asarray(batch, dtype=model.dtype), requires_grad=input_grad)
        params = _param_tensors(model, params_grad)
        logits = model.forward(x, params)
        _check_finite(logits.data, "logits")
        value = softmax_cross_entropy(logits, labels, reduction=reduction)
    tape.params = params
    tape.input = x
    return value, tape


def backward_params(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    param_grads, _ = backward_all(tape, loss)
    return param_grads


def backward_all(tape: Tape, loss: Tensor):
    """One backward pass; returns ``(param_grads, input_grad_or_None)``."""
    tape.backward(loss)
    grads = {name: t.grad for name, t in tape.params.items() if t.requires_grad}
    gx = None
    if tape.input is not None and tape.input.requires_grad:
        gx = tape.input.grad
    return grads, gx


SCALARS = ("loss", "logit", "prob")


def selected_scalar(logits: Tensor, labels, scalar: str) -> Tensor:
    """Sum over the batch of the per-image scalar chosen by ``scalar``."""
    labels = np.asarray(labels, dtype=np.int64)
    if scalar == "loss":
        return softmax_cross_entropy(logits, labels, reduction="sum")
    n, c = logits.shape
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    if scalar == "logit":
        return sum_all(mul(logits, Tensor(onehot)))
    if scalar == "prob":
        return sum_all(mul(softmax(logits), Tensor(onehot)))
    raise ValueError(f"unknown scalar selector {scalar!r}; expected one of {SCALARS}")


def scalar_values(model, x, labels, scalar: str) -> np.ndarray:
    """Per-image value of the selected scalar (no tape)."""
    logits = model.forward(Tensor(np.asarray(x, dtype=model.dtype)), _param_tensors(model, False)).data
    labels = np.asarray(labels, dtype=np.int64)
    idx = np.arange(len(labels))
    if scalar == "loss":
        return -log_softmax(logits)[idx, labels]
    if scalar == "logit":
        return logits[idx, labels]
    if scalar == "prob":
        return np.exp(log_softmax(logits))[idx, labels]
    raise ValueError(f"unknown scalar selector {scalar!r}")


def input_gradient(model, x, labels, scalar: str = "loss", check_finite: bool = True) -> np.ndarray:
    """Gradient of the selected per-image scalar w.r.t. raw pixel input.

    Each row's gradient depends only on that row (the batch scalar is a sum).
    """
    tape = Tape()
    with tape:
        xt = Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
        logits = model.forward(xt, _param_tensors(model, False))
        if check_finite:
            _check_finite(logits.data, "logits")
        value = selected_scalar(logits, labels, scalar)
    tape.backward(value, check_finite=check_finite)
    return xt.grad


def finite_difference_oracle(fn_or_model, x, labels=None, scalar: str = "loss", h: float = 1e-3, coords=None):
    """Central differences ``(S(x+h e_i) - S(x-h e_i)) / 2h``.

    ``fn_or_model`` is either a callable returning a scalar for an array, or a
    model evaluated through ``scalar_values`` summed over the batch. ``coords``
    optionally restricts the check to a list of flat indices; other entries
    are left at zero.
    """
    if h <= 0:
        raise ValueError("finite-difference step h must be positive")
    if callable(fn_or_model) and not hasattr(fn_or_model, "forward"):
        fn = fn_or_model
    else:
        model = fn_or_model

        def fn(z):
            return float(np.sum(scalar_values(model, z, labels, scalar), dtype=np.float64))

    base = np.array(x, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = fn(base)
        flat[i] = orig - h
        fm = fn(base)
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)
