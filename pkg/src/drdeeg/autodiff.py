"""Tape-based reverse-mode differentiation over dense float64 arrays.

Values are plain ``numpy.ndarray`` objects in float64.  A :class:`Tape` records
every primitive applied to its variables; :func:`backward` walks the tape once
in reverse and returns gradients for the parameter leaves and the input leaves
separately.  Leaves created with :meth:`Tape.constant` take no gradient, which
lets callers skip the parameter (or input) half of the backward pass.

Operands may carry leading batch axes; ``matmul`` and ``conv_time`` broadcast
them the way ``numpy.matmul`` does, which is how per-example weights are
supported.
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "Tape",
    "Var",
    "Grads",
    "backward",
    "finite_diff_grad",
    "add",
    "sub",
    "scale",
    "mul",
    "matmul",
    "conv_time",
    "elu",
    "mean",
    "sum",
    "reshape",
    "take",
    "log_softmax",
    "nll",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    """Operand shapes do not conform for ``op``."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + ", ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


_PARAM, _INPUT, _CONST, _OP = "param", "input", "const", "op"


class _Node:
    __slots__ = ("kind", "parents", "rule", "needs_grad", "shape")

    def __init__(self, kind, parents, rule, needs_grad, shape):
        self.kind = kind
        self.parents = parents
        self.rule = rule
        self.needs_grad = needs_grad
        self.shape = shape


class Var:
    """Handle to a value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.shape}, index={self.index})"


def _leaf_array(value, what: str) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} leaf contains NaN or Inf")
    arr.flags.writeable = False
    return arr


class Tape:
    """Append-only record of primitive operations.

    A tape is built fresh for each forward pass and may be consumed by at most
    one call to :func:`backward`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.params: list[int] = []
        self.inputs: list[int] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def _leaf(self, value, kind) -> Var:
        if self.consumed:
            raise AutodiffError("tape already consumed by a backward pass")
        arr = _leaf_array(value, kind)
        idx = len(self.nodes)
        self.nodes.append(_Node(kind, (), None, kind != _CONST, arr.shape))
        if kind == _PARAM:
            self.params.append(idx)
        elif kind == _INPUT:
            self.inputs.append(idx)
        return Var(self, idx, arr)

    def param(self, value) -> Var:
        return self._leaf(value, _PARAM)

    def input(self, value) -> Var:
        return self._leaf(value, _INPUT)

    def constant(self, value) -> Var:
        return self._leaf(value, _CONST)

    def record(self, value: np.ndarray, parents: Sequence[Var], rule: Callable) -> Var:
        """Append an op node.

        ``rule(g, need)`` receives the output cotangent and a tuple of flags
        saying which parents need a gradient; it returns one array (or None)
        per parent.
        """
        if self.consumed:
            raise AutodiffError("tape already consumed by a backward pass")
        for p in parents:
            if p.tape is not self:
                raise AutodiffError("operands belong to different tapes")
        pidx = tuple(p.index for p in parents)
        needs = any(self.nodes[i].needs_grad for i in pidx)
        idx = len(self.nodes)
        self.nodes.append(_Node(_OP, pidx, rule, needs, value.shape))
        return Var(self, idx, value)


class Grads(NamedTuple):
    params: list[np.ndarray]
    inputs: list[np.ndarray]


def backward(tape: Tape, output: Var) -> Grads:
    """Reverse pass from a scalar ``output``.

    Returns gradients for every parameter leaf and every input leaf, in the
    order they were created.  Leaves that do not reach ``output`` get zeros.
    """
    if output.tape is not tape:
        raise AutodiffError("output does not belong to this tape")
    if tape.consumed:
        raise AutodiffError("tape already consumed by a backward pass")
    if output.value.size != 1:
        raise AutodiffError(f"backward needs a scalar output, got shape {output.shape}")
    tape.consumed = True

    nodes = tape.nodes
    grads: list = [None] * len(nodes)
    grads[output.index] = np.ones_like(output.value)
    for i in range(output.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node.kind != _OP or not node.needs_grad:
            continue
        need = tuple(nodes[p].needs_grad for p in node.parents)
        pgrads = node.rule(g, need)
        for p, pg, n in zip(node.parents, pgrads, need):
            if not n or pg is None:
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
        if i != output.index:
            grads[i] = None

    def collect(indices):
        out = []
        for i in indices:
            g = grads[i]
            out.append(np.zeros(nodes[i].shape) if g is None else np.array(g, dtype=np.float64))
        return out

    return Grads(collect(tape.params), collect(tape.inputs))


def finite_diff_grad(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(at, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# --------------------------------------------------------------------------
# primitives


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a: Var, b: Var) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def add(a: Var, b: Var) -> Var:
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def rule(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                _unbroadcast(g, sb) if need[1] else None)

    return a.tape.record(a.value + b.value, (a, b), rule)


def sub(a: Var, b: Var) -> Var:
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def rule(g, need):
        return (_unbroadcast(g, sa) if need[0] else None,
                -_unbroadcast(g, sb) if need[1] else None)

    return a.tape.record(a.value - b.value, (a, b), rule)


def scale(a: Var, s: float) -> Var:
    s = float(s)
    return a.tape.record(a.value * s, (a,), lambda g, need: (g * s,))


def mul(a: Var, b: Var) -> Var:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value

    def rule(g, need):
        return (_unbroadcast(g * bv, av.shape) if need[0] else None,
                _unbroadcast(g * av, bv.shape) if need[1] else None)

    return a.tape.record(av * bv, (a, b), rule)


def matmul(a: Var, b: Var) -> Var:
    """``numpy.matmul`` semantics, including 1-D promotion and batch broadcasting."""
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError("matmul", av.shape, bv.shape, detail="scalar operand")
    a2 = av[None, :] if av.ndim == 1 else av
    b2 = bv[:, None] if bv.ndim == 1 else bv
    if a2.shape[-1] != b2.shape[-2]:
        raise ShapeError("matmul", av.shape, bv.shape, detail="inner dimensions differ")
    try:
        np.broadcast_shapes(a2.shape[:-2], b2.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", av.shape, bv.shape, detail="batch dimensions") from None
    out2 = a2 @ b2
    out = out2
    if av.ndim == 1:
        out = out[..., 0, :]
    if bv.ndim == 1:
        out = out[..., 0]

    def rule(g, need):
        g2 = g.reshape(out2.shape)
        ga = gb = None
        if need[0]:
            ga = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        if need[1]:
            gb = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return ga, gb

    return a.tape.record(out, (a, b), rule)


def _fast_len(n: int) -> int:
    """Smallest 5-smooth integer >= n (cheap FFT length)."""
    best = 1 << max(0, (n - 1).bit_length())
    p5 = 1
    while p5 < best:
        p35 = p5
        while p35 < best:
            m = p35
            while m < n:
                m *= 2
            best = min(best, m)
            p35 *= 3
        p5 *= 5
    return best


def _per_freq_matmul(a, b):
    """(..., F, I) x (F, I, O) -> (..., F, O), one matmul per frequency."""
    lead = a.shape[:-2]
    f, i = a.shape[-2:]
    af = np.moveaxis(a, -2, 0).reshape(f, -1, i)
    out = np.matmul(af, b)
    return np.moveaxis(out.reshape((f,) + lead + (b.shape[-1],)), 0, -2)


def _conv_fft(xv, wv, left):
    """Shared-weight path: FFT cross-correlation, exact up to round-off."""
    T = xv.shape[-2]
    K, f_in, f_out = wv.shape
    n = _fast_len(T + K - 1)
    X = np.fft.rfft(xv, n=n, axis=-2)
    out = np.fft.irfft(_per_freq_matmul(X, np.fft.rfft(wv[::-1], n=n, axis=0)), n=n, axis=-2)
    out = np.ascontiguousarray(out[..., K - 1 - left:K - 1 - left + T, :])

    def rule(g, need):
        gx = gw = None
        G = np.fft.rfft(g, n=n, axis=-2)
        if need[0]:
            Wf = np.fft.rfft(wv, n=n, axis=0)
            full = np.fft.irfft(_per_freq_matmul(G, np.swapaxes(Wf, -1, -2)), n=n, axis=-2)
            gx = _unbroadcast(full[..., left:left + T, :], xv.shape)
        if need[1]:
            Xf = np.moveaxis(np.broadcast_to(X, G.shape[:-1] + (f_in,)), -2, 0).reshape(X.shape[-2], -1, f_in)
            Gf = np.moveaxis(G, -2, 0).reshape(G.shape[-2], -1, f_out)
            corr = np.fft.irfft(np.matmul(np.swapaxes(Xf, -1, -2), np.conj(Gf)), n=n, axis=0)
            gw = corr[(np.arange(K) - left) % n]
        return gx, gw

    return out, rule


def _conv_loop(xv, wv, left):
    """Per-example-weight path: one batched matmul per kernel tap."""
    T = xv.shape[-2]
    K = wv.shape[-3]
    pad = [(0, 0)] * xv.ndim
    pad[-2] = (left, K - 1 - left)
    xp = np.pad(xv, pad)
    out = xp[..., 0:T, :] @ wv[..., 0, :, :]
    for k in range(1, K):
        out += xp[..., k:k + T, :] @ wv[..., k, :, :]

    def rule(g, need):
        gx = gw = None
        if need[0]:
            gxp = np.zeros(np.broadcast_shapes(xp.shape[:-2], g.shape[:-2]) + xp.shape[-2:])
            for k in range(K):
                gxp[..., k:k + T, :] += g @ np.swapaxes(wv[..., k, :, :], -1, -2)
            gxp = _unbroadcast(gxp, xp.shape)
            gx = gxp[..., left:left + T, :]
        if need[1]:
            gw = np.empty(np.broadcast_shapes(wv.shape, out.shape[:-2] + (1, 1, 1)))
            for k in range(K):
                gw[..., k, :, :] = np.swapaxes(xp[..., k:k + T, :], -1, -2) @ g
            gw = _unbroadcast(gw, wv.shape)
        return gx, gw

    return out, rule


FFT_MIN_KERNEL = 8


def conv_time(x: Var, w: Var) -> Var:
    """Cross-correlation along time with zero 'same' padding.

    ``x`` has shape (..., T, F_in) and ``w`` has shape (..., K, F_in, F_out);
    the output has shape (..., T, F_out).  For even K the extra zero goes on
    the right.  Shared weights with K >= 8 go through an FFT; per-example
    weights and short kernels use a direct per-tap sum.
    """
    xv, wv = x.value, w.value
    if xv.ndim < 2 or wv.ndim < 3 or xv.shape[-1] != wv.shape[-2]:
        raise ShapeError("conv_time", xv.shape, wv.shape)
    try:
        np.broadcast_shapes(xv.shape[:-2], wv.shape[:-3])
    except ValueError:
        raise ShapeError("conv_time", xv.shape, wv.shape, detail="batch dimensions") from None
    K = wv.shape[-3]
    left = (K - 1) // 2
    if wv.ndim == 3 and K >= FFT_MIN_KERNEL:
        out, rule = _conv_fft(xv, wv, left)
    else:
        out, rule = _conv_loop(xv, wv, left)
    return x.tape.record(out, (x, w), rule)


def elu(x: Var) -> Var:
    xv = x.value
    neg = np.expm1(np.minimum(xv, 0.0))
    out = np.maximum(xv, 0.0) + neg

    def rule(g, need):
        # d/dx is 1 for x > 0 and exp(x) otherwise, i.e. neg + 1 in both cases
        return (g * (neg + 1.0),)

    return x.tape.record(out, (x,), rule)


def mean(x: Var, axis: int) -> Var:
    shape = x.shape
    ax = axis % x.ndim
    n = shape[ax]

    def rule(g, need):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape),)

    return x.tape.record(x.value.mean(axis=ax), (x,), rule)


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def rule(g, need):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return x.tape.record(np.asarray(x.value.sum(axis=axis)), (x,), rule)


def reshape(x: Var, shape: Sequence[int]) -> Var:
    src = x.shape
    try:
        out = x.value.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return x.tape.record(out, (x,), lambda g, need: (g.reshape(src),))


def take(x: Var, start: int, stop: int) -> Var:
    """Slice ``[start:stop]`` along the last axis."""
    n = x.shape[-1]
    if not 0 <= start <= stop <= n:
        raise ShapeError("take", x.shape, detail=f"slice {start}:{stop}")
    src = x.shape

    def rule(g, need):
        full = np.zeros(src)
        full[..., start:stop] = g
        return (full,)

    return x.tape.record(x.value[..., start:stop], (x,), rule)


def log_softmax(x: Var, axis: int = -1) -> Var:
    xv = x.value
    m = xv.max(axis=axis, keepdims=True)
    shifted = xv - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def rule(g, need):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return x.tape.record(out, (x,), rule)


def nll(logp: Var, labels) -> Var:
    """Per-example negative log-likelihood ``-logp[..., label]``."""
    lab = np.asarray(labels, dtype=np.intp)
    if lab.shape != logp.shape[:-1]:
        raise ShapeError("nll", logp.shape, lab.shape)
    n = logp.shape[-1]
    if lab.size and (lab.min() < 0 or lab.max() >= n):
        raise ValueError(f"nll: label out of range [0, {n})")
    idx = lab[..., None]
    out = -np.take_along_axis(logp.value, idx, axis=-1)[..., 0]
    src = logp.shape

    def rule(g, need):
        full = np.zeros(src)
        np.put_along_axis(full, idx, -g[..., None], axis=-1)
        return (full,)

    return logp.tape.record(out, (logp,), rule)
