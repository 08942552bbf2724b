"""Tape-based reverse-mode autodiff over numpy arrays.

Everything trainable in this project runs on the primitives below: forward
ops record onto the active :class:`Tape`, ``backward`` replays the tape in
reverse order and accumulates adjoints into leaf tensors. Arrays are float32
by default; reductions use numpy's fixed left-to-right order so repeated runs
are bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""


class NonFiniteError(FloatingPointError):
    """A non-finite value was produced during backward."""


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of primitive applications.

    Forward ops executed inside ``with tape:`` append their result nodes in
    execution order, which is a topological order of the computation graph;
    ``backward`` walks the list once, in reverse.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


def active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tensor:
    """N-d array plus the bookkeeping needed to replay its adjoint."""

    __slots__ = ("data", "grad", "inputs", "backward_rule", "op", "name")

    def __init__(self, data, *, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        self.grad = None
        self.inputs: tuple[Tensor, ...] = ()
        self.backward_rule = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or self.op
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g


def constant(data, dtype=None) -> Tensor:
    """Leaf tensor that never receives a gradient of interest."""
    return Tensor(data, dtype=dtype)


def _node(data, inputs, rule, op) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.inputs = inputs
    out.backward_rule = rule
    out.op = op
    out.name = None
    tape = active_tape()
    if tape is not None:
        tape.nodes.append(out)
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")

    def rule(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _node(a.data + b.data, (a, b), rule, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")

    def rule(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(-g, b.data.shape))

    return _node(a.data - b.data, (a, b), rule, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")

    def rule(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _node(a.data * b.data, (a, b), rule, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def rule(g):
        a._accumulate(g * c)

    return _node(a.data * c, (a,), rule, "scale")


def shift(a: Tensor, c: float) -> Tensor:
    """Add a python scalar constant."""

    def rule(g):
        a._accumulate(g)

    return _node(a.data + a.data.dtype.type(c), (a,), rule, "shift")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def rule(g):
        a._accumulate(g * out * (1.0 - out))

    return _node(out, (a,), rule, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def rule(g):
        a._accumulate(g * (1.0 - out * out))

    return _node(out, (a,), rule, "tanh")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)

    def rule(g):
        a._accumulate(g * (a.data > 0))

    return _node(out, (a,), rule, "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def rule(g):
        a._accumulate(g * out)

    return _node(out, (a,), rule, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def rule(g):
        a._accumulate(g / a.data)

    return _node(out, (a,), rule, "log")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D @ 2-D, 2-D @ 1-D (mat-vec) and 1-D @ 2-D."""
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or (ad.ndim == 1 and bd.ndim == 1):
        raise ShapeError(f"matmul: unsupported ranks, got {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")

    def rule(g):
        if ad.ndim == 2 and bd.ndim == 2:
            a._accumulate(g @ bd.T)
            b._accumulate(ad.T @ g)
        elif ad.ndim == 2 and bd.ndim == 1:
            a._accumulate(np.outer(g, bd))
            b._accumulate(ad.T @ g)
        else:  # 1-D @ 2-D
            a._accumulate(g @ bd.T)
            b._accumulate(np.outer(ad, g))

    return _node(ad @ bd, (a, b), rule, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got {a.data.shape}")

    def rule(g):
        a._accumulate(g.T)

    return _node(a.data.T.copy(), (a,), rule, "transpose")


# ---------------------------------------------------------------------------
# reductions and normalizers


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _node(np.asarray(out), (a,), rule, "sum")


def reduce_mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate((np.broadcast_to(g, a.data.shape) / n).astype(a.data.dtype))

    return _node(np.asarray(out), (a,), rule, "mean")


def softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        a._accumulate(out * (g - dot))

    return _node(out, (a,), rule, "softmax")


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def rule(g):
        a._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return _node(out, (a,), rule, "log_softmax")


def logsumexp(a: Tensor, axis=-1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def rule(g):
        a._accumulate(np.expand_dims(g, axis) * soft)

    return _node(out, (a,), rule, "logsumexp")


# ---------------------------------------------------------------------------
# shape plumbing


def reshape(a: Tensor, shape) -> Tensor:
    def rule(g):
        a._accumulate(g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), rule, "reshape")


def concat(parts, axis=0) -> Tensor:
    parts = list(parts)
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            p._accumulate(g[tuple(idx)])

    return _node(data, tuple(parts), rule, "concat")


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def rule(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        a._accumulate(full)

    return _node(a.data[idx].copy(), (a,), rule, "slice")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup; gradient scatters back with np.add.at (deterministic)."""
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or (ids.size and ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: ids out of range for table with {table.data.shape[0]} rows"
        )

    def rule(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _node(table.data[ids].copy(), (table,), rule, "embedding")


def gather_cols(a: Tensor, cols) -> Tensor:
    """Pick one column per row of a 2-D tensor."""
    cols = np.asarray(cols)
    rows = np.arange(a.data.shape[0])

    def rule(g):
        full = np.zeros_like(a.data)
        full[rows, cols] = g
        a._accumulate(full)

    return _node(a.data[rows, cols].copy(), (a,), rule, "gather_cols")


def conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-length 1-D convolution with replicate-edge padding.

    ``x`` is (batch, in_channels, T), ``kernel`` (out_channels, in_channels, W)
    with W odd, ``bias`` (out_channels,). Edge values are repeated rather than
    zero-padded so monotone series do not acquire spurious boundary dips.
    """
    xd, kd = x.data, kernel.data
    if xd.ndim != 3 or kd.ndim != 3:
        raise ShapeError(f"conv1d: expected rank-3 operands, got {xd.shape}, {kd.shape}")
    if xd.shape[1] != kd.shape[1]:
        raise ShapeError(f"conv1d: channel mismatch {xd.shape} vs {kd.shape}")
    w = kd.shape[2]
    if w % 2 != 1:
        raise ShapeError(f"conv1d: kernel width must be odd, got {w}")
    t = xd.shape[2]
    if t < w:
        raise ShapeError(f"conv1d: input length {t} shorter than kernel width {w}")
    p = w // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, w, axis=2)  # (B, C, T, W)
    out = np.einsum("bctw,ocw->bot", win, kd) + bias.data[None, :, None]
    out = out.astype(xd.dtype, copy=False)

    def rule(g):
        kernel._accumulate(np.einsum("bot,bctw->ocw", g, win).astype(kd.dtype))
        bias._accumulate(g.sum(axis=(0, 2)).astype(bias.data.dtype))
        gxp = np.zeros_like(xp)
        for off in range(w):
            gxp[:, :, off : off + t] += np.einsum("bot,oc->bct", g, kd[:, :, off])
        gx = gxp[:, :, p : p + t].copy()
        gx[:, :, 0] += gxp[:, :, :p].sum(axis=2)
        gx[:, :, -1] += gxp[:, :, p + t :].sum(axis=2)
        x._accumulate(gx)

    return _node(out, (x, kernel, bias), rule, "conv1d")


# ---------------------------------------------------------------------------
# backward


def backward(tape: Tape, loss: Tensor, params: "ParameterStore") -> dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every parameter in ``params``.

    Parameters the loss never touched get zero gradients. Raises
    :class:`NonFiniteError` naming the primitive if any adjoint goes non-finite.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape.nodes):
            if node.grad is None or node.backward_rule is None:
                continue
            if not np.all(np.isfinite(node.grad)):
                raise NonFiniteError(f"non-finite adjoint at primitive '{node.op}'")
            node.backward_rule(node.grad)
        grads = {}
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient for parameter '{name}'")
            grads[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        return grads
    finally:
        for node in tape.nodes:
            node.grad = None
            for inp in node.inputs:
                inp.grad = None
        loss.grad = None


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParameterStore:
    """Named, shaped leaf tensors for every learnable parameter."""

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(value, dtype=self.dtype, name=name)
        self._params[name] = t
        return t

    def uniform(self, name, shape, rng, low=-0.1, high=0.1) -> Tensor:
        return self.add(name, rng.uniform(low, high, size=shape))

    def full(self, name, shape, value) -> Tensor:
        return self.add(name, np.full(shape, value))

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def restore(self, arrays: dict[str, np.ndarray]):
        for k, v in arrays.items():
            self._params[k].data = np.asarray(v, dtype=self.dtype).copy()


@dataclass
class AdamState:
    """Adam moments and step counter; one instance per training run."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParameterStore, grads: dict[str, np.ndarray], state: AdamState):
    """One Adam update over every parameter, in store insertion order."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            logger.debug("adam_step: no gradient for %s, treating as zero", name)
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} != param {p.data.shape} for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data -= (state.lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# finite-difference oracle


def _as_float(value) -> float:
    return float(value.data) if isinstance(value, Tensor) else float(value)


def numeric_gradient(loss_fn, param: Tensor, index, step=1e-3) -> float:
    """Central finite difference of ``loss_fn()`` w.r.t. one coordinate."""
    orig = param.data[index]
    param.data[index] = orig + step
    hi = _as_float(loss_fn())
    param.data[index] = orig - step
    lo = _as_float(loss_fn())
    param.data[index] = orig
    return (hi - lo) / (2.0 * step)


def max_grad_error(loss_fn, store: ParameterStore, step=1e-3, max_coords=None, rng=None):
    """Worst relative error between tape gradients and finite differences.

    Checks every coordinate of each parameter unless ``max_coords`` caps the
    per-tensor sample (large embedding tables). Relative error uses
    ``|a - f| / max(|a|, |f|, 1e-6)`` so near-zero gradients compare on an
    absolute scale.
    """
    tape = Tape()
    with tape:
        loss = loss_fn()
    grads = backward(tape, loss, store)
    worst = 0.0
    for name, p in store.items():
        flat_indices = list(np.ndindex(p.data.shape))
        if max_coords is not None and len(flat_indices) > max_coords:
            if rng is None:
                rng = np.random.default_rng(0)
            picks = rng.choice(len(flat_indices), size=max_coords, replace=False)
            flat_indices = [flat_indices[i] for i in picks]
        for idx in flat_indices:
            fd = numeric_gradient(loss_fn, p, idx, step=step)
            an = float(grads[name][idx])
            err = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
            worst = max(worst, err)
    return worst
