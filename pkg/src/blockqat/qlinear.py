"""Quantized linear layer with straight-through-estimator gradients.

Two modes:

* latent  — full-precision weights W are kept and re-quantized on every
  forward pass; gradients flow to W, s, and z through the piecewise STE
  rules below (block-wise reconstruction training).
* frozen  — the integer weights are fixed and only dequantization happens
  in the forward pass; s (and optionally z) keep training end-to-end with
  the closed-form derivative d(w_hat)/ds = w_int - z.

Per element, with u = round(w/s) + z and M = 2^N - 1:

    in range (0 <= u <= M):  d(w_hat)/ds = round(w/s) - w/s
                             d(w_hat)/dz = 0
                             d(w_hat)/dw = 1
    clamped low  (u < 0):    d(w_hat)/ds = -z,    d(w_hat)/dz = -s,  d(w_hat)/dw = 0
    clamped high (u > M):    d(w_hat)/ds = M - z, d(w_hat)/dz = -s,  d(w_hat)/dw = 0

Group parameters accumulate their elements' gradients.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericError, StateError
from .quant import (
    QuantSpec,
    S_EPS,
    expand_groups,
    group_sum,
    init_matrix_params,
    quantize_matrix,
)
from .quant import GroupParams

LATENT = "latent"
FROZEN = "frozen"


class SteElements(NamedTuple):
    """Per-element forward value and STE derivatives of the quantizer."""

    w_hat: np.ndarray
    dw: np.ndarray
    ds: np.ndarray
    dz: np.ndarray
    branch: np.ndarray  # -1 clamped low, 0 in range, +1 clamped high


def ste_elements(w: np.ndarray, s: np.ndarray, z: np.ndarray, bits: int) -> SteElements:
    """Evaluate w_hat = (clip(round(w/s) + z, 0, 2^N - 1) - z) * s and its
    piecewise STE derivatives. Inputs broadcast; dtype is preserved."""
    qmax = (1 << bits) - 1
    t = w / s
    r = np.rint(t)
    u = r + z
    low = u < 0
    high = u > qmax
    mid = ~(low | high)
    w_hat = (np.clip(u, 0, qmax) - z) * s
    zeros = np.zeros_like(w_hat)
    dw = mid.astype(w_hat.dtype)
    ds = np.where(mid, r - t, np.where(low, -z + zeros, qmax - z + zeros))
    dz = np.where(mid, zeros, -s + zeros)
    branch = np.where(mid, 0, np.where(low, -1, 1)).astype(np.int8)
    return SteElements(w_hat, dw, ds, dz, branch)


class QuantLinear:
    """Linear layer whose weight passes through quantize/dequantize.

    Weight shape is [out, in]; forward computes x @ w_hat^T (+ bias), which
    is the dequantized-weight matmul with no separate fast path.
    """

    def __init__(self, spec: QuantSpec, out_dim: int, in_dim: int):
        self.spec = spec
        self.out_dim = out_dim
        self.in_dim = in_dim
        self.mode = LATENT
        self.w: Optional[T.Parameter] = None          # latent only
        self.w_int: Optional[np.ndarray] = None       # frozen only, uint8
        self.s: Optional[T.Parameter] = None          # [out, n_groups]
        self.z: Optional[T.Parameter] = None          # [out, n_groups], float
        self.bias: Optional[T.Parameter] = None
        self.trainable: set[str] = {"w", "s", "z"}

    # -- construction -------------------------------------------------------

    @classmethod
    def from_dense(cls, w: np.ndarray, spec: QuantSpec,
                   bias: Optional[np.ndarray] = None,
                   trainable: set[str] = frozenset({"w", "s", "z"})) -> "QuantLinear":
        """Wrap a dense [out, in] weight; s and z get min-max initialization."""
        w = np.asarray(w, dtype=np.float32)
        layer = cls(spec, w.shape[0], w.shape[1])
        p = init_matrix_params(w, spec)
        layer.w = T.Parameter(w.copy())
        layer.s = T.Parameter(p.s)
        layer.z = T.Parameter(p.z)
        if bias is not None:
            layer.bias = T.Parameter(np.asarray(bias, dtype=np.float32))
        layer.trainable = set(trainable)
        return layer

    # -- helpers ------------------------------------------------------------

    @property
    def n_groups(self) -> int:
        return self.spec.n_groups(self.in_dim)

    def _expand(self, per_group: np.ndarray) -> np.ndarray:
        return expand_groups(per_group, self.spec, self.in_dim)

    def _group_sum(self, per_element: np.ndarray) -> np.ndarray:
        return group_sum(per_element, self.spec, self.in_dim)

    def parameters(self) -> list[T.Parameter]:
        """All float parameters present in the current mode."""
        ps = []
        if self.mode == LATENT:
            ps.append(self.w)
        ps.extend([self.s, self.z])
        if self.bias is not None:
            ps.append(self.bias)
        return ps

    def trainable_parameters(self) -> dict[str, T.Parameter]:
        out = {}
        if "w" in self.trainable and self.mode == LATENT:
            out["w"] = self.w
        if "s" in self.trainable:
            out["s"] = self.s
        if "z" in self.trainable:
            out["z"] = self.z
        return out

    def clamp_step_sizes(self) -> None:
        """Project s back onto its validity domain (s > 0) after an update."""
        np.maximum(self.s.data, S_EPS, out=self.s.data)

    def weight_hat(self) -> np.ndarray:
        """Current dequantized weight matrix (no tape)."""
        if self.mode == LATENT:
            return ste_elements(self.w.data, self._expand(self.s.data),
                                self._expand(self.z.data), self.spec.bits).w_hat
        return (self.w_int.astype(np.float32) - self._expand(self.z.data)) \
            * self._expand(self.s.data)

    # -- forward / backward -------------------------------------------------

    def forward(self, x: T.Tensor) -> T.Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"input shape {x.shape} does not match in_dim {self.in_dim}")
        if self.mode == LATENT:
            return self._forward_latent(x)
        return self._forward_frozen(x)

    __call__ = forward

    def _forward_latent(self, x: T.Tensor) -> T.Tensor:
        for name, p in (("w", self.w), ("s", self.s), ("z", self.z)):
            if not np.isfinite(p.data).all():
                raise NumericError(f"non-finite {name} in latent forward")
        if np.any(self.s.data <= 0):
            raise NumericError("non-positive step size in latent forward")
        s_e = self._expand(self.s.data)
        z_e = self._expand(self.z.data)
        el = ste_elements(self.w.data, s_e, z_e, self.spec.bits)
        out_data = x.data @ el.w_hat.T
        if self.bias is not None:
            out_data = out_data + self.bias.data

        def backward(g):
            grad_w_hat = g.T @ x.data
            if "w" in self.trainable:
                self.w.accum_grad(grad_w_hat * el.dw)
            if "s" in self.trainable:
                self.s.accum_grad(self._group_sum(grad_w_hat * el.ds))
            if "z" in self.trainable:
                self.z.accum_grad(self._group_sum(grad_w_hat * el.dz))
            if self.bias is not None and "bias" in self.trainable:
                self.bias.accum_grad(g.sum(axis=0))
            if x.requires_grad:
                x.accum_grad(g @ el.w_hat)

        inputs = (x, self.w, self.s, self.z)
        return T.record("qlinear_latent", inputs, out_data, backward)

    def _forward_frozen(self, x: T.Tensor) -> T.Tensor:
        if not (np.isfinite(self.s.data).all() and np.isfinite(self.z.data).all()):
            raise NumericError("non-finite quantization parameters in frozen forward")
        s_e = self._expand(self.s.data)
        z_e = self._expand(self.z.data)
        w_int = self.w_int.astype(np.float32)
        w_hat = (w_int - z_e) * s_e
        out_data = x.data @ w_hat.T
        if self.bias is not None:
            out_data = out_data + self.bias.data

        def backward(g):
            grad_w_hat = g.T @ x.data
            if "s" in self.trainable:
                self.s.accum_grad(self._group_sum(grad_w_hat * (w_int - z_e)))
            if "z" in self.trainable:
                self.z.accum_grad(self._group_sum(grad_w_hat * (-s_e)))
            if self.bias is not None and "bias" in self.trainable:
                self.bias.accum_grad(g.sum(axis=0))
            if x.requires_grad:
                x.accum_grad(g @ w_hat)

        inputs = (x, self.s, self.z)
        return T.record("qlinear_frozen", inputs, out_data, backward)

    # -- mode transition ----------------------------------------------------

    def freeze(self) -> "QuantLinear":
        """Quantize the latent weight once and drop it; z becomes integral.

        After freezing only step sizes are trainable by default.
        """
        if self.mode != LATENT:
            raise StateError("freeze requires latent mode")
        z_int = np.clip(np.rint(self.z.data), 0, self.spec.qmax).astype(np.float32)
        p = GroupParams(s=self.s.data, z=z_int)
        self.w_int = quantize_matrix(self.w.data, p, self.spec).astype(np.uint8)
        self.z = T.Parameter(z_int)
        self.w = None
        self.mode = FROZEN
        self.trainable = {"s"}
        return self
