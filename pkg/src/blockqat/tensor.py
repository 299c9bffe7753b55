"""Minimal dense-tensor engine with a reverse-mode gradient tape.

Values are float32 numpy arrays in row-major order; there are no views,
no striding tricks, and only the broadcasting the toy transformer needs.
Each differentiable op appends one TapeNode to the active tape, so the
tape's order is exactly forward execution order and backward replays it
in exact reverse.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

# Attention logits use a large negative finite mask value instead of -inf so
# every stored tensor stays finite.
MASK_VALUE = -1e9


class Tensor:
    """A float32 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float32)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable Tensor; optimizers update these and only these."""

    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class TapeNode:
    """One recorded op: identifier, input refs, and the backward rule."""

    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], out: Tensor,
                 backward: Callable[[np.ndarray], None]):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Forward-ordered op record; backward visits nodes in exact reverse."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise DimensionError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            node.backward(g)


_ACTIVE_TAPE: Optional[Tape] = None


@contextlib.contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape; ops recorded inside can be backpropagated."""
    global _ACTIVE_TAPE
    if _ACTIVE_TAPE is not None:
        raise StateError("tapes do not nest")
    t = Tape()
    _ACTIVE_TAPE = t
    try:
        yield t
    finally:
        _ACTIVE_TAPE = None


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward: Callable[[np.ndarray], None]) -> Tensor:
    """Create the output tensor and, when recording, its tape node.

    The output keeps the dtype the op produced (float32 whenever the leaves
    are float32, which is every training path).
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data)
    out.grad = None
    out.requires_grad = needs
    if needs and _ACTIVE_TAPE is not None:
        _ACTIVE_TAPE.nodes.append(TapeNode(op, tuple(inputs), out, backward))
    return out


def check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g)
        if b.requires_grad:
            b.accum_grad(g)

    return record("add", (a, b), out_data, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g * b.data)
        if b.requires_grad:
            b.accum_grad(g * a.data)

    return record("mul", (a, b), out_data, backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g * c)

    return record("scale", (a,), out_data, backward)


def add_const(a: Tensor, arr: np.ndarray) -> Tensor:
    """Add a non-trainable array (broadcast against `a` is allowed)."""
    out_data = a.data + np.asarray(arr, dtype=np.float32)
    if out_data.shape != a.shape:
        raise DimensionError("add_const must not change the tensor shape")

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g)

    return record("add_const", (a,), out_data, backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out_data = x.data * sig

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g * sig * (1.0 + x.data * (1.0 - sig)))

    return record("silu", (x,), out_data, backward)


# ---------------------------------------------------------------------------
# shape ops (materialized copies; the engine has no views)
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g.reshape(x.shape))

    return record("reshape", (x,), out_data, backward)


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out_data = np.ascontiguousarray(np.transpose(x.data, axes))
    inv = tuple(np.argsort(axes))

    def backward(g):
        if x.requires_grad:
            x.accum_grad(np.ascontiguousarray(np.transpose(g, inv)))

    return record("transpose", (x,), out_data, backward)


# ---------------------------------------------------------------------------
# matrix ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D operands, or batched 3-D with equal batch extents.

    Backward: dA = dC @ B^T, dB = A^T @ dC (batched analogues for 3-D).
    """
    if a.data.ndim == 2 and b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    elif a.data.ndim == 3 and b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"batched matmul extents differ: {a.shape} x {b.shape}")
    else:
        raise DimensionError(f"matmul supports 2D x 2D or 3D x 3D, got {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accum_grad(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accum_grad(a.data.swapaxes(-1, -2) @ g)

    return record("matmul", (a, b), out_data, backward)


def linear(x: Tensor, w: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[n, in] @ w[out, in]^T (+ bias[out])."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"linear shapes incompatible: x{x.shape} w{w.shape}")
    out_data = x.data @ w.data.T
    if bias is not None:
        out_data = out_data + bias.data

    def backward(g):
        if x.requires_grad:
            x.accum_grad(g @ w.data)
        if w.requires_grad:
            w.accum_grad(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias.accum_grad(g.sum(axis=0))

    inputs = (x, w) if bias is None else (x, w, bias)
    return record("linear", inputs, out_data, backward)


# ---------------------------------------------------------------------------
# normalization / activations over the last axis
# ---------------------------------------------------------------------------

def rms_norm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    """y = gain * x / sqrt(mean(x^2) + eps) along the last axis."""
    if eps <= 0:
        raise DimensionError("rms_norm requires eps > 0")
    d = x.shape[-1]
    if gain.shape != (d,):
        raise DimensionError(f"gain shape {gain.shape} does not match last axis {d}")
    ms = np.mean(np.square(x.data), axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(ms + eps)
    out_data = gain.data * x.data * r

    def backward(g):
        gg = g * gain.data
        if x.requires_grad:
            inner = np.sum(gg * x.data, axis=-1, keepdims=True)
            x.accum_grad(gg * r - x.data * (r ** 3) * inner / d)
        if gain.requires_grad:
            red = tuple(range(x.data.ndim - 1))
            gain.accum_grad(np.sum(g * x.data * r, axis=red))

    return record("rms_norm", (x, gain), out_data, backward)


def softmax(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if x.requires_grad:
            x.accum_grad(p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    return record("softmax", (x,), p, backward)


# ---------------------------------------------------------------------------
# lookup and loss
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    if ids.ndim != 1:
        raise DimensionError("embedding ids must be 1-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out_data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids, g)

    return record("embedding", (table,), out_data, backward)


def softmax_ce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean over positions of -log softmax(logits)[target], max-stabilized."""
    targets = np.asarray(targets)
    t = logits.shape[0]
    if t == 0:
        raise DimensionError("softmax_ce_loss on an empty batch")
    if targets.shape != (t,):
        raise DimensionError(f"targets shape {targets.shape} does not match positions {t}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise IndexError("target token id out of range")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True)) + m
    nll = lse[:, 0] - logits.data[np.arange(t), targets]
    out_data = nll.mean()

    def backward(g):
        if logits.requires_grad:
            p = np.exp(logits.data - lse)
            p[np.arange(t), targets] -= 1.0
            logits.accum_grad(p * (g / t))

    return record("softmax_ce_loss", (logits,), out_data, backward)


def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against a constant target array."""
    target = np.asarray(target, dtype=np.float32)
    if pred.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise DimensionError("mse_loss on an empty tensor")
    diff = pred.data - target
    out_data = np.mean(np.square(diff))

    def backward(g):
        if pred.requires_grad:
            pred.accum_grad(diff * (g * (2.0 / pred.size)))

    return record("mse_loss", (pred,), out_data, backward)


def per_position_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inference-only NLL per position (no tape); used by evaluation."""
    m = logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(logits - m).sum(axis=1, keepdims=True)) + m
    return lse[:, 0] - logits[np.arange(logits.shape[0]), targets]


# ---------------------------------------------------------------------------
# attention composite
# ---------------------------------------------------------------------------

def causal_mask(t: int) -> np.ndarray:
    """Additive [1, t, t] mask: MASK_VALUE above the diagonal."""
    m = np.triu(np.full((t, t), MASK_VALUE, dtype=np.float32), k=1)
    return m[None, :, :]


def causal_self_attention(q: Tensor, k: Tensor, v: Tensor,
                          n_heads: int, seq_len: int) -> Tensor:
    """Multi-head causal attention over [batch*seq, d] projections.

    Built entirely from taped primitives (reshape/transpose/matmul/softmax),
    so gradients need no dedicated rule.
    """
    n, d = q.shape
    if n % seq_len != 0 or d % n_heads != 0:
        raise DimensionError("attention extents do not factor into (batch, seq, heads)")
    b = n // seq_len
    hd = d // n_heads

    def split(x: Tensor) -> Tensor:
        x = reshape(x, (b, seq_len, n_heads, hd))
        x = transpose(x, (0, 2, 1, 3))
        return reshape(x, (b * n_heads, seq_len, hd))

    qh, kh, vh = split(q), split(k), split(v)
    scores = matmul(qh, transpose(kh, (0, 2, 1)))
    scores = scale(scores, 1.0 / np.sqrt(hd))
    scores = add_const(scores, causal_mask(seq_len))
    ctx = matmul(softmax(scores), vh)
    ctx = reshape(ctx, (b, n_heads, seq_len, hd))
    ctx = transpose(ctx, (0, 2, 1, 3))
    return reshape(ctx, (n, d))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Decoupled-moment adaptive optimizer with bias correction.

    beta=(0.9, 0.999), eps=1e-8, zero weight decay, constant learning rate.
    Accepts parameter groups with per-group learning rates.
    """

    def __init__(self, groups: list[dict], betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.groups = [{"params": list(g["params"]), "lr": float(g["lr"])} for g in groups]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for g in self.groups:
            for p in g["params"]:
                p.grad = None

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for g in self.groups:
            lr = g["lr"]
            for p in g["params"]:
                if p.grad is None:
                    continue
                key = id(p)
                if key not in self._m:
                    self._m[key] = np.zeros_like(p.data)
                    self._v[key] = np.zeros_like(p.data)
                m = self._m[key]
                v = self._v[key]
                m *= self.beta1
                m += (1.0 - self.beta1) * p.grad
                v *= self.beta2
                v += (1.0 - self.beta2) * np.square(p.grad)
                mhat = m / bc1
                vhat = v / bc2
                p.data -= lr * mhat / (np.sqrt(vhat) + self.eps)
