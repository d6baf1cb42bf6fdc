"""Reverse-mode automatic differentiation on dense float64 arrays.

A ``Tensor`` wraps a numpy array plus an optional gradient buffer. Primitive
operations record themselves on the active ``Tape``; ``Tape.backward`` replays
the recorded nodes in reverse and accumulates gradients into every tensor that
requires them. Tapes are cheap, per-forward-pass objects and are freed as soon
as backward completes.

Broadcasting is deliberately restricted to exact shape matches plus scalars;
batched layers go through explicit primitives (``matmul``, ``add_bias``,
``conv1d``) so that shape errors stay loud.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.shapes = shapes


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """View of the same values, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        req = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{req})"

    # Operator sugar for the common elementwise cases.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Each node stores the output tensor, its input tensors, and a backward
    rule mapping the output gradient to per-input gradient contributions.
    Nodes are appended in execution order, so the list is already a
    topological order and the backward pass is a single reverse sweep.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], rule: Callable) -> None:
        self._nodes.append((out, inputs, rule))

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(node) into every requires_grad tensor.

        The loss must be a live scalar output of this tape. Gradients add
        across fan-out; each node is visited exactly once. The tape is freed
        afterwards and cannot be replayed.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward pass")
        if loss.shape != ():
            raise ValueError(f"backward expects a scalar loss, got shape {loss.shape}")
        _accumulate(loss, np.ones((), dtype=np.float64))
        for out, inputs, rule in reversed(self._nodes):
            g = out.grad
            if g is None:
                continue  # not on the path from the loss
            contribs = rule(g)
            for tensor, contrib in zip(inputs, contribs):
                if contrib is None or not tensor.requires_grad:
                    continue
                _accumulate(tensor, contrib)
        self._consumed = True
        self._nodes.clear()


def _accumulate(t: Tensor, contrib: np.ndarray) -> None:
    if t.grad is None:
        # Copy: backward rules may hand back views of upstream buffers.
        t.grad = np.array(contrib, dtype=np.float64)
    else:
        t.grad += contrib


def _record(out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, tuple(inputs), rule)
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar_operand(t: Tensor) -> bool:
    return t.shape == ()


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar_operand(a) or _is_scalar_operand(b)):
        raise ShapeMismatch(op, a.shape, b.shape)


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # Only scalar broadcast is permitted, so the reduction is all-or-nothing.
    return g.sum() if shape == () and g.shape != () else g


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("add", a, b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record(out, (a, b), rule)


def sub(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("sub", a, b)
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b) -> Tensor:
    """Hadamard product; one operand may be scalar."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise("mul", a, b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def rule(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return _record(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data, a.requires_grad)
    return _record(out, (a,), lambda g: (-g,))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (never differentiated w.r.t. s)."""
    s = float(s)
    out = Tensor(a.data * s, a.requires_grad)
    return _record(out, (a,), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a trailing-axes bias to a batched tensor.

    ``b.shape`` must equal the trailing ``b.ndim`` axes of ``x``; the bias
    gradient sums over the leading (batch) axes.
    """
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim:] != b.shape:
        raise ShapeMismatch("add_bias", x.shape, b.shape)
    lead = tuple(range(x.ndim - b.ndim))
    out = Tensor(x.data + b.data, x.requires_grad or b.requires_grad)

    def rule(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _record(out, (x, b), rule)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to (rows, channels, T); gradient sums rows and time."""
    if x.ndim != 3 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeMismatch("add_channel_bias", x.shape, b.shape)
    out = Tensor(x.data + b.data[None, :, None], x.requires_grad or b.requires_grad)

    def rule(g):
        return g, g.sum(axis=(0, 2))

    return _record(out, (x, b), rule)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """(rows, n) @ (n, m) -> (rows, m)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeMismatch("matmul", x.shape, w.shape)
    out = Tensor(x.data @ w.data, x.requires_grad or w.requires_grad)
    x_data, w_data = x.data, w.data
    x_needs, w_needs = x.requires_grad, w.requires_grad

    def rule(g):
        return (g @ w_data.T if x_needs else None,
                x_data.T @ g if w_needs else None)

    return _record(out, (x, w), rule)


def matvec(m: Tensor, v: Tensor) -> Tensor:
    """(m, n) @ (n,) -> (m,); backward sends M^T g into v and g v^T into M."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeMismatch("matvec", m.shape, v.shape)
    out = Tensor(m.data @ v.data, m.requires_grad or v.requires_grad)
    m_data, v_data = m.data, v.data

    def rule(g):
        return np.outer(g, v_data), m_data.T @ g

    return _record(out, (m, v), rule)


def conv1d(signal: Tensor, kernels: Tensor) -> Tensor:
    """Same-padded 1-d cross-correlation.

    ``signal`` is (c_in, T) or (batch, c_in, T); ``kernels`` is
    (c_out, c_in, k) with odd k. Output length equals input length.

    Implemented as one channel-mixing GEMM per kernel tap on a channels-last
    layout, which keeps the work in BLAS instead of materializing sliding
    windows.
    """
    if kernels.ndim != 3:
        raise ShapeMismatch("conv1d kernels", kernels.shape)
    c_out, c_in, klen = kernels.shape
    if klen % 2 == 0:
        raise ValueError(f"conv1d requires an odd kernel length, got {klen}")
    squeeze = signal.ndim == 2
    if squeeze:
        if signal.shape[0] != c_in:
            raise ShapeMismatch("conv1d", signal.shape, kernels.shape)
        x = signal.data[None]
    elif signal.ndim == 3:
        if signal.shape[1] != c_in:
            raise ShapeMismatch("conv1d", signal.shape, kernels.shape)
        x = signal.data
    else:
        raise ShapeMismatch("conv1d", signal.shape, kernels.shape)

    rows, _, samples = x.shape
    pad = klen // 2
    sig_needs = signal.requires_grad
    ker_needs = kernels.requires_grad

    if c_in == 1 and c_out == 1:
        # single-channel path (the forward-model wavelet): window correlations
        kvec = kernels.data[0, 0]
        x2 = x.reshape(rows, samples)
        xp = np.zeros((rows, samples + 2 * pad))
        xp[:, pad:pad + samples] = x2
        win = np.lib.stride_tricks.sliding_window_view(xp, klen, axis=1)
        out_data = (win @ kvec).reshape(x.shape)
        if squeeze:
            out_data = out_data[0]
        out = Tensor(out_data, sig_needs or ker_needs)

        def rule1(g):
            g2 = (g[None] if squeeze else g).reshape(rows, samples)
            gk = None
            if ker_needs:
                gk = (win.reshape(rows * samples, klen).T
                      @ g2.reshape(rows * samples)).reshape(1, 1, klen)
            gx = None
            if sig_needs:
                gp = np.zeros((rows, samples + 2 * pad))
                gp[:, pad:pad + samples] = g2
                gwin = np.lib.stride_tricks.sliding_window_view(gp, klen, axis=1)
                gx = (gwin @ kvec[::-1]).reshape(x.shape)
                if squeeze:
                    gx = gx[0]
            return gx, gk

        return _record(out, (signal, kernels), rule1)

    xp = np.zeros((rows, c_in, samples + 2 * pad))
    xp[:, :, pad:pad + samples] = x
    # im2col: window count along the padded axis is exactly klen, so the
    # tap axis lands between channels and time and one batched GEMM remains.
    win = np.lib.stride_tricks.sliding_window_view(xp, samples, axis=2)
    col = win.reshape(rows, c_in * klen, samples)  # (rows, c_in*k, T), one copy
    km = kernels.data.reshape(c_out, c_in * klen)
    out_data = np.matmul(km, col)
    if squeeze:
        out_data = out_data[0]
    out = Tensor(out_data, signal.requires_grad or kernels.requires_grad)

    def rule(g):
        gb = g[None] if squeeze else g  # (rows, c_out, T)
        gk = None
        if ker_needs:
            gk = np.tensordot(gb, col, axes=([0, 2], [0, 2]))
            gk = gk.reshape(c_out, c_in, klen)
        gx = None
        if sig_needs:
            taps = np.matmul(km.T, gb).reshape(rows, c_in, klen, samples)
            gxp = np.zeros((rows, c_in, samples + 2 * pad))
            for j in range(klen):
                gxp[:, :, j:j + samples] += taps[:, :, j, :]
            gx = gxp[:, :, pad:pad + samples].copy()
            if squeeze:
                gx = gx[0]
        return gx, gk

    return _record(out, (signal, kernels), rule)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), x.requires_grad)
    x_data = x.data

    def rule(g):
        return (g * (x_data > 0.0),)  # subgradient at 0 is 0

    return _record(out, (x,), rule)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)
    out = Tensor(out_data, x.requires_grad)

    def rule(g):
        return (g * (1.0 - out_data * out_data),)

    return _record(out, (x,), rule)


def mse_loss(a: Tensor, b: Tensor) -> Tensor:
    """Squared l2 distance, summed over every element (no averaging)."""
    if a.shape != b.shape:
        raise ShapeMismatch("mse_loss", a.shape, b.shape)
    diff = a.data - b.data
    out = Tensor(np.dot(diff.ravel(), diff.ravel()), a.requires_grad or b.requires_grad)

    def rule(g):
        d = (2.0 * g) * diff
        return d, -d

    return _record(out, (a, b), rule)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), a.requires_grad)
    shape = a.shape

    def rule(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _record(out, (a,), rule)


def dot(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch("dot", a.shape, b.shape)
    out = Tensor(np.dot(a.data.ravel(), b.data.ravel()), a.requires_grad or b.requires_grad)
    a_data, b_data = a.data, b.data

    def rule(g):
        return g * b_data, g * a_data

    return _record(out, (a, b), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    old = x.shape

    def rule(g):
        return (g.reshape(old),)

    return _record(out, (x,), rule)


def gd_update(x: Tensor, u: Tensor, eta: float, noise: np.ndarray | None = None) -> Tensor:
    """Fused unrolled-solver update x - eta * (u + noise).

    ``noise`` is injected as a constant: it never receives a gradient, which
    is exactly the treatment of jitter draws during training.
    """
    if x.shape != u.shape:
        raise ShapeMismatch("gd_update", x.shape, u.shape)
    eta = float(eta)
    step = u.data if noise is None else u.data + noise
    out = Tensor(x.data - eta * step, x.requires_grad or u.requires_grad)

    def rule(g):
        return g, -eta * g

    return _record(out, (x, u), rule)


def finite_difference_grad(f: Callable[[np.ndarray], float], x: np.ndarray,
                           step: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise in x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad
