"""Dense rank-4 tensors with a reverse-mode gradient tape.

Every forward op here takes and returns :class:`Tensor` objects holding
``(n, c, h, w)`` numpy arrays. When a :class:`Tape` is active (``with Tape()
as tape:``) and at least one input requires a gradient, the op appends a node
carrying a closure that maps the output adjoint to input adjoints.
:func:`backward` replays those closures in reverse.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.9

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "rdseg_active_tape", default=None
)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    """Raised when a tape cannot be replayed (construction bug)."""


class Tensor:
    """A named numpy array, optionally tracked for gradients."""

    __slots__ = ("data", "name", "requires_grad")

    def __init__(self, data, name: str | None = None, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.name = name
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"


def tensor(data, dtype=np.float32, name: str | None = None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), name=name, requires_grad=requires_grad)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed ops. Confined to one thread of execution."""

    nodes: list[_Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.nodes.append(_Node(op, tuple(inputs), output, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


class no_grad:
    """Suspend recording for the enclosed block."""

    def __enter__(self):
        self._token = _active_tape.set(None)

    def __exit__(self, *exc):
        _active_tape.reset(self._token)


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    tape = _active_tape.get()
    if tape is not None and needs:
        tape.record(op, inputs, result, backward_fn)
    return result


def _check4(x: Tensor, what: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{what} must be rank 4 (n, c, h, w), got shape {x.shape}")


# --------------------------------------------------------------------------
# forward ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero "same" padding (3x3 or 1x1 kernels)."""
    _check4(x, "conv2d input")
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise ShapeError(f"conv2d kernel must be (c_out, c_in, 3, 3) or (c_out, c_in, 1, 1), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} vs kernel shape {w.shape}"
        )
    if bias.data.shape != (w.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} does not match kernel shape {w.shape}")

    n, c, h, wd = x.shape
    c_out, k = w.shape[0], w.shape[2]
    if k == 1:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
        # (n, c, h, w, 3, 3) -> rows of (c, ky, kx), matching the kernel layout
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)
        cols = cols.reshape(n * h * wd, c * 9)
    wmat = w.reshape(c_out, -1)
    out = cols @ wmat.T
    out += bias.data
    out = np.ascontiguousarray(out.reshape(n, h, wd, c_out).transpose(0, 3, 1, 2))

    def backward_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g.sum(axis=(0, 2, 3))
        dcols = g2 @ wmat
        if k == 1:
            gx = dcols.reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, h, wd, c, 3, 3)
            gxp = np.zeros((n, c, h + 2, wd + 2), dtype=g.dtype)
            for ky in range(3):
                for kx in range(3):
                    gxp[:, :, ky:ky + h, kx:kx + wd] += dcols[..., ky, kx].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        return np.ascontiguousarray(gx), gw, gb

    return _emit("conv2d", (x, weight, bias), out, backward_fn)


def maxpool2x2(x: Tensor) -> Tensor:
    """Disjoint 2x2 max pooling. Ties route the adjoint to the first element in row-major order."""
    _check4(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even height and width, got shape {x.shape}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return _emit("maxpool2x2", (x,), out, backward_fn)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling."""
    _check4(x, "upsample2x input")
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def backward_fn(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _emit("upsample2x", (x,), out, backward_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels first input")
    _check4(b, "concat_channels second input")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat_channels batch/spatial mismatch: {a.shape} vs {b.shape}")
    split = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward_fn(g):
        return g[:, :split], g[:, split:]

    return _emit("concat_channels", (a, b), out, backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _emit("relu", (x,), out, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clamped one ulp inside (0, 1) so saturated outputs stay strictly interior."""
    xd = x.data
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1 / (1 + e), e / (1 + e)).astype(xd.dtype, copy=False)
    info = np.finfo(out.dtype)
    out = np.clip(out, info.tiny, 1 - info.epsneg)

    def backward_fn(g):
        return (g * out * (1 - out),)

    return _emit("sigmoid", (x,), out, backward_fn)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def tensor_sum(x: Tensor) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype).reshape(())
    return _emit("sum", (x,), out, lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    running_mean: np.ndarray
    running_var: np.ndarray
    batches_seen: int = 0

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    eps: float = BN_EPSILON,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel normalization over (n, h, w).

    In training mode the batch statistics are used and the running statistics
    are updated as ``running = momentum * running + (1 - momentum) * batch``
    (biased batch variance). Inference mode uses the running statistics.
    """
    _check4(x, "batch_norm input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match input {x.shape}")
    dt = x.dtype
    g4 = gamma.data.reshape(1, c, 1, 1)

    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError(f"batch_norm training needs n*h*w >= 2 per channel, got input {x.shape}")
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = (1 / np.sqrt(var + dt.type(eps))).astype(dt)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

        m = dt.type(momentum)
        state.running_mean = (m * state.running_mean + (1 - m) * mean).astype(state.running_mean.dtype)
        state.running_var = (m * state.running_var + (1 - m) * var).astype(state.running_var.dtype)
        state.batches_seen += 1

        def backward_fn(g):
            gsum = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            scale = (gamma.data * inv_std / count).reshape(1, c, 1, 1)
            gx = scale * (
                count * g - gsum.reshape(1, c, 1, 1) - xhat * gxhat_sum.reshape(1, c, 1, 1)
            )
            return gx.astype(dt, copy=False), gxhat_sum, gsum

        return _emit("batch_norm", (x, gamma, beta), out.astype(dt, copy=False), backward_fn)

    if state.batches_seen == 0:
        raise RuntimeError("batch_norm inference requested before any running statistics were recorded")
    inv_std = (1 / np.sqrt(state.running_var.astype(dt) + dt.type(eps))).astype(dt)
    xhat = (x.data - state.running_mean.astype(dt).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
    out = g4 * xhat + beta.data.reshape(1, c, 1, 1)

    def backward_fn(g):
        gx = g * (gamma.data * inv_std).reshape(1, c, 1, 1)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _emit("batch_norm", (x, gamma, beta), out.astype(dt, copy=False), backward_fn)


# --------------------------------------------------------------------------
# reverse pass


def backward(
    tape: Tape,
    loss: Tensor,
    wrt: Mapping[str, Tensor] | None = None,
    grad_output: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse and return d(loss)/d(tensor) for each entry of ``wrt``.

    ``wrt`` defaults to every named leaf on the tape that requires a gradient.
    Tensors that do not influence ``loss`` get zero gradients of their own shape.
    ``grad_output`` seeds a non-scalar ``loss`` (vector-Jacobian product).
    """
    produced: dict[int, int] = {}
    for i, node in enumerate(tape.nodes):
        key = id(node.output)
        if key in produced:
            raise TapeError(f"tensor produced twice on tape (ops #{produced[key]} and #{i}, {node.op})")
        for inp in node.inputs:
            if id(inp) == key:
                raise TapeError(f"op #{i} ({node.op}) consumes its own output")
            j = produced.get(id(inp))
            if j is not None and j >= i:
                raise TapeError(f"op #{i} ({node.op}) consumes a tensor produced later")
        produced[key] = i

    if id(loss) not in produced:
        raise TapeError("loss tensor was not produced by any op on this tape")
    if grad_output is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss or grad_output, got shape {loss.shape}")
        grad_output = np.ones_like(loss.data)
    elif np.shape(grad_output) != loss.shape:
        raise ShapeError(f"grad_output shape {np.shape(grad_output)} does not match loss {loss.shape}")

    if wrt is None:
        wrt = {}
        for node in tape.nodes:
            for inp in node.inputs:
                if inp.name and inp.requires_grad and id(inp) not in produced:
                    wrt.setdefault(inp.name, inp)

    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad_output, dtype=loss.dtype)}
    stop = produced[id(loss)]
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, input_grads):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi

    out = {}
    for name, t in wrt.items():
        g = grads.get(id(t))
        out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
    return out


# --------------------------------------------------------------------------
# finite-difference checking


def numerical_gradient(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max absolute deviation scaled by the larger gradient magnitude (floored)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Mapping[str, Tensor],
    eps: float = 1e-5,
    joint: bool = False,
) -> dict[str, float]:
    """Compare tape gradients of the scalar ``fn()`` against central differences.

    Returns the relative error per input name. With ``joint=True`` every
    deviation is scaled by the largest gradient over all inputs, which keeps
    inputs whose true gradient is identically zero (a bias feeding straight
    into batch norm) from reporting finite-difference round-off as error.
    ``fn`` is re-evaluated many times and must be a pure function of the
    input arrays.
    """
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, wrt=inputs)

    def scalar():
        with no_grad():
            return float(fn().data)

    numeric = {name: numerical_gradient(scalar, t.data, eps) for name, t in inputs.items()}
    if not joint:
        return {name: relative_error(analytic[name], numeric[name]) for name in inputs}
    scale = max(
        max(np.abs(analytic[n]).max(initial=0.0), np.abs(numeric[n]).max(initial=0.0)) for n in inputs
    )
    scale = max(scale, 1e-6)
    return {n: float(np.abs(analytic[n] - numeric[n]).max(initial=0.0) / scale) for n in inputs}
