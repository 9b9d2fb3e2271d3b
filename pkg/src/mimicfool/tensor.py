"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Only the operations needed by the feature extractors, the heads and the
attack loss are provided. Graphs are define-by-run: every op executed while a
:class:`Tape` is active appends one node holding its vector-Jacobian product,
and :func:`backward` walks the nodes in reverse exactly once.

Image tensors use NHWC layout. ``conv2d`` and the pooling ops also accept an
unbatched ``(H, W, C)`` input.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "AdamState",
    "op_forward",
    "backward",
    "adam_step",
    "finite_diff_grad",
    "conv2d",
    "dense",
    "relu",
    "tanh",
    "avgpool2d",
    "maxpool2d",
    "add",
    "scale_shift",
    "sumsq",
    "clamp",
    "OP_KINDS",
]

OP_KINDS = (
    "conv2d",
    "dense",
    "relu",
    "tanh",
    "avgpool2d",
    "maxpool2d",
    "add",
    "scale-shift",
    "sumsq",
    "clamp",
)


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_from_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        if self.data.ndim == 0:
            self.data = self.data.reshape(1)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._from_op = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class _Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray, tuple[bool, ...]], list]


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Single-use record of executed ops, in execution (topological) order.

    Used as a context manager; ops run outside any tape are not recorded.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp) -> Tensor:
    out = Tensor(out_data)
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and needs:
        out.requires_grad = True
        out._from_op = True
        tape.nodes.append(_Node(kind, tuple(inputs), out, vjp))
    return out


def _shape_error(op: str, what: str, a, b) -> ValueError:
    return ValueError(f"{op}: shape mismatch, {what} {tuple(a)} vs {tuple(b)}")


# ---------------------------------------------------------------- conv2d


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D cross-correlation. ``w`` has shape ``(K, K, C_in, C_out)``."""
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    unbatched = x.data.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.data.ndim != 4:
        raise _shape_error("conv2d", "input/kernel", x.shape, w.shape)
    kh, kw, cin, cout = w.shape
    n, h, wd, c = xd.shape
    if c != cin:
        raise _shape_error("conv2d", "input channels vs kernel", x.shape, w.shape)
    if b is not None and b.shape != (cout,):
        raise _shape_error("conv2d", "bias vs kernel", b.shape, w.shape)
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise _shape_error("conv2d", "padded input smaller than kernel", x.shape, w.shape)
    if padding:
        xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    else:
        xp = xd
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    # (N, Ho, Wo, C_in, K, K)
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([3, 4, 5], [2, 0, 1]))
    if b is not None:
        out += b.data

    wdat = w.data

    def vjp(g, needs):
        g4 = g[None] if unbatched else g
        grads = [None, None, None]
        if needs[0]:
            cols = np.tensordot(g4, wdat, axes=([3], [3]))  # (N, Ho, Wo, K, K, C_in)
            dxp = np.zeros((n, hp, wp, c))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[:, :, :, i, j, :]
            dx = dxp[:, padding:padding + h, padding:padding + wd, :] if padding else dxp
            grads[0] = dx[0] if unbatched else dx
        if needs[1]:
            dw = np.tensordot(win, g4, axes=([0, 1, 2], [0, 1, 2]))  # (C_in, K, K, C_out)
            grads[1] = dw.transpose(1, 2, 0, 3)
        if len(needs) > 2 and needs[2]:
            grads[2] = g4.sum(axis=(0, 1, 2))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", inputs, out[0] if unbatched else out, vjp)


# ---------------------------------------------------------------- dense


def dense(x: Tensor, w: Tensor, b: Tensor | None = None, batched: bool | None = None) -> Tensor:
    """Affine map ``x @ w + b``.

    With ``batched`` the leading axis is the batch and the trailing axes are
    flattened; otherwise all of ``x`` is flattened into one row and the
    output is 1-D. The default treats only 1-D inputs as unbatched.
    """
    if w.data.ndim != 2:
        raise _shape_error("dense", "weight must be 2-D, got", w.shape, ())
    din, dout = w.shape
    if batched is None:
        batched = x.data.ndim > 1
    if not batched:
        x2 = x.data.reshape(1, -1)
    else:
        x2 = x.data.reshape(x.shape[0], -1)
    if x2.shape[1] != din:
        raise _shape_error("dense", "input vs weight", x.shape, w.shape)
    if b is not None and b.shape != (dout,):
        raise _shape_error("dense", "bias vs weight", b.shape, w.shape)
    out = x2 @ w.data
    if b is not None:
        out += b.data
    xshape = x.shape
    wdat = w.data

    def vjp(g, needs):
        g2 = g.reshape(-1, dout)
        grads = [None, None, None]
        if needs[0]:
            grads[0] = (g2 @ wdat.T).reshape(xshape)
        if needs[1]:
            grads[1] = x2.T @ g2
        if len(needs) > 2 and needs[2]:
            grads[2] = g2.sum(axis=0)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("dense", inputs, out if batched else out[0], vjp)


# ---------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g, n: [g * mask])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit("tanh", (x,), y, lambda g, n: [g * (1.0 - y * y)])


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes where ``lo <= x <= hi`` (bounds inclusive)."""
    if lo > hi:
        raise ValueError(f"clamp: lo {lo} > hi {hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit("clamp", (x,), np.clip(x.data, lo, hi), lambda g, n: [g * inside])


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise _shape_error("add", "operands", a.shape, b.shape)
    return _emit("add", (a, b), a.data + b.data, lambda g, n: [g, g])


def scale_shift(x: Tensor, scale=1.0, shift=0.0) -> Tensor:
    """``x * scale + shift`` with constant (non-differentiable) scale and shift."""
    scale = np.asarray(scale, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    try:
        out = x.data * scale + shift
    except ValueError:
        raise _shape_error("scale-shift", "input vs scale/shift",
                           x.shape, np.broadcast_shapes(scale.shape, shift.shape)) from None
    if out.shape != x.shape:
        raise _shape_error("scale-shift", "input vs scale/shift", x.shape, out.shape)
    return _emit("scale-shift", (x,), out, lambda g, n: [g * scale])


def sumsq(x: Tensor) -> Tensor:
    xd = x.data
    out = np.array([np.dot(xd.reshape(-1), xd.reshape(-1))])
    return _emit("sumsq", (x,), out, lambda g, n: [2.0 * g[0] * xd])


# ---------------------------------------------------------------- pooling


def _pool_view(op: str, x: np.ndarray, k: int) -> tuple[np.ndarray, bool]:
    if k < 1:
        raise ValueError(f"{op}: window must be >= 1, got {k}")
    unbatched = x.ndim == 3
    xd = x[None] if unbatched else x
    if xd.ndim != 4:
        raise _shape_error(op, "input must be (N,)H,W,C, got", x.shape, ())
    n, h, w, c = xd.shape
    if h % k or w % k:
        raise _shape_error(op, f"spatial dims not divisible by window {k}", x.shape, (k, k))
    return xd.reshape(n, h // k, k, w // k, k, c), unbatched


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    v, unbatched = _pool_view("avgpool2d", x.data, k)
    out = v.mean(axis=(2, 4))
    xshape = x.shape

    def vjp(g, needs):
        g4 = g[None] if unbatched else g
        dx = np.broadcast_to(g4[:, :, None, :, None, :] / (k * k), v.shape)
        return [dx.reshape(xshape)]

    return _emit("avgpool2d", (x,), out[0] if unbatched else out, vjp)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping max pool; ties go to the first element in row-major window order."""
    v, unbatched = _pool_view("maxpool2d", x.data, k)
    n, ho, _, wo, _, c = v.shape
    flat = v.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    xshape = x.shape

    def vjp(g, needs):
        g4 = g[None] if unbatched else g
        dflat = np.zeros_like(flat)
        np.put_along_axis(dflat, idx[..., None], g4[..., None], axis=-1)
        dx = dflat.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3)
        return [dx.reshape(xshape)]

    return _emit("maxpool2d", (x,), out[0] if unbatched else out, vjp)


_DISPATCH = {
    "conv2d": conv2d,
    "dense": dense,
    "relu": relu,
    "tanh": tanh,
    "avgpool2d": avgpool2d,
    "maxpool2d": maxpool2d,
    "add": add,
    "scale-shift": scale_shift,
    "sumsq": sumsq,
    "clamp": clamp,
}


def op_forward(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Run op ``kind`` on ``inputs``; recorded on the active tape if any."""
    try:
        fn = _DISPATCH[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; expected one of {OP_KINDS}") from None
    return fn(*inputs, **params)


def backward(tape: Tape, output: Tensor, seed=None) -> None:
    """Populate ``.grad`` of every leaf that requires grad with d<seed, output>/d leaf.

    Leaf gradients are overwritten, not accumulated across calls.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a backward pass")
    if seed is None:
        seed = np.ones(output.size)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.size != output.size:
        raise ValueError(f"backward: seed length {seed.size} != output length {output.size}")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(output): seed.reshape(output.shape)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        for t, gi in zip(node.inputs, node.vjp(g, needs)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not t._from_op:
                leaves[key] = t
    if not output._from_op and output.requires_grad:
        leaves[id(output)] = output
    for key, t in leaves.items():
        t.grad = np.array(grads[key], dtype=np.float64).reshape(t.shape)
    tape.nodes.clear()


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """Moment estimates for one flat parameter array; ``lr`` is held constant."""

    size: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Bias-corrected Adam update of ``param`` in place; returns ``param``."""
    p = param.reshape(-1)
    g = np.asarray(grad, dtype=np.float64).reshape(-1)
    if not (p.size == g.size == state.m.size == state.v.size):
        raise ValueError(
            f"adam_step: length mismatch param={p.size} grad={g.size} state={state.m.size}"
        )
    if not np.shares_memory(p, param):
        raise ValueError("adam_step: param must be contiguous so it can be updated in place")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return param


# ---------------------------------------------------------------- oracle


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_diff_grad(fn: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    base = x.data.reshape(-1).copy()
    out = np.empty(base.size)
    probe = Tensor(base.reshape(x.shape).copy())
    flat = probe.data.reshape(-1)
    for i in range(base.size):
        flat[i] = base[i] + h
        fp = _scalar(fn(probe))
        flat[i] = base[i] - h
        fm = _scalar(fn(probe))
        flat[i] = base[i]
        out[i] = (fp - fm) / (2.0 * h)
    return out
