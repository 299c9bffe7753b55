"""Group-wise asymmetric uniform quantization math and bit-budget accounting.

Quantize:    w_int = clamp(round(w / s) + z, 0, 2^N - 1)   (round half-to-even)
Dequantize:  w_hat = (w_int - z) * s

Groups are contiguous runs of `group_size` entries along the input-channel
axis of an [out, in] weight matrix; a shorter tail group is allowed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, DomainError, NumericError

# Step sizes are floored here so constant groups stay representable with
# finite gradients.
S_EPS = 1e-8


@dataclass(frozen=True)
class QuantSpec:
    """Bit width, group size, and rounding policy for one configuration."""

    bits: int
    group_size: int
    rounding: str = field(default="half-even")

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise DomainError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size != -1 and self.group_size < 1:
            raise DomainError(f"group_size must be -1 or >= 1, got {self.group_size}")
        if self.rounding != "half-even":
            raise DomainError(f"unsupported rounding policy {self.rounding!r}")

    @property
    def qmax(self) -> int:
        """Top of the integer range [0, 2^N - 1]."""
        return (1 << self.bits) - 1

    def effective_group(self, in_dim: int) -> int:
        """Group extent, with -1 meaning one group per output channel."""
        return in_dim if self.group_size == -1 else self.group_size

    def group_starts(self, in_dim: int) -> np.ndarray:
        return np.arange(0, in_dim, self.effective_group(in_dim))

    def n_groups(self, in_dim: int) -> int:
        return math.ceil(in_dim / self.effective_group(in_dim))


@dataclass
class GroupParams:
    """Per-group step sizes (positive) and zero points (in [0, 2^N - 1])."""

    s: np.ndarray
    z: np.ndarray

    def validate(self, spec: QuantSpec) -> None:
        if np.any(self.s <= 0):
            raise DomainError("step sizes must be positive")
        if np.any(self.z < 0) or np.any(self.z > spec.qmax):
            raise DomainError(f"zero points must lie in [0, {spec.qmax}]")


def init_group_params(w_group: np.ndarray, spec: QuantSpec) -> GroupParams:
    """Min-max initialization: s = (max - min) / (2^N - 1), z = round(-min / s)."""
    w_group = np.asarray(w_group)
    if w_group.size == 0:
        raise DimensionError("cannot initialize parameters for an empty group")
    s = (w_group.max() - w_group.min()) / spec.qmax
    s = max(float(s), S_EPS)
    z = float(np.clip(np.rint(-w_group.min() / s), 0, spec.qmax))
    return GroupParams(s=np.asarray(s, dtype=w_group.dtype),
                       z=np.asarray(z, dtype=w_group.dtype))


def quantize(w: np.ndarray, p: GroupParams, spec: QuantSpec) -> np.ndarray:
    """Eq-style rounding to the integer grid; s and z broadcast against w."""
    w = np.asarray(w)
    if not np.isfinite(w).all():
        raise NumericError("quantize received non-finite weights")
    return np.clip(np.rint(w / p.s) + p.z, 0, spec.qmax)


def dequantize(w_int: np.ndarray, p: GroupParams, spec: QuantSpec) -> np.ndarray:
    """w_hat = (w_int - z) * s; rejects integers outside [0, 2^N - 1]."""
    w_int = np.asarray(w_int)
    if np.any(w_int < 0) or np.any(w_int > spec.qmax):
        raise DomainError(f"integer outside [0, {spec.qmax}]")
    return (w_int - p.z) * p.s


# ---------------------------------------------------------------------------
# matrix-level helpers (vectorized over all (row, group) pairs)
# ---------------------------------------------------------------------------

def init_matrix_params(w: np.ndarray, spec: QuantSpec) -> GroupParams:
    """Min-max init for every (row, group) of an [out, in] matrix."""
    if w.ndim != 2 or w.size == 0:
        raise DimensionError(f"expected a non-empty [out, in] matrix, got shape {w.shape}")
    starts = spec.group_starts(w.shape[1])
    wmin = np.minimum.reduceat(w, starts, axis=1)
    wmax = np.maximum.reduceat(w, starts, axis=1)
    s = np.maximum((wmax - wmin) / spec.qmax, S_EPS).astype(w.dtype)
    z = np.clip(np.rint(-wmin / s), 0, spec.qmax).astype(w.dtype)
    return GroupParams(s=s, z=z)


def group_sizes(spec: QuantSpec, in_dim: int) -> np.ndarray:
    starts = spec.group_starts(in_dim)
    ends = np.append(starts[1:], in_dim)
    return ends - starts


def expand_groups(per_group: np.ndarray, spec: QuantSpec, in_dim: int) -> np.ndarray:
    """Spread [out, n_groups] values to the [out, in] element grid."""
    return np.repeat(per_group, group_sizes(spec, in_dim), axis=1)


def group_sum(per_element: np.ndarray, spec: QuantSpec, in_dim: int) -> np.ndarray:
    """Sum an [out, in] element grid back to [out, n_groups]."""
    return np.add.reduceat(per_element, spec.group_starts(in_dim), axis=1)


def quantize_matrix(w: np.ndarray, p: GroupParams, spec: QuantSpec) -> np.ndarray:
    in_dim = w.shape[1]
    grid = GroupParams(s=expand_groups(p.s, spec, in_dim),
                       z=expand_groups(p.z, spec, in_dim))
    return quantize(w, grid, spec)


def dequantize_matrix(w_int: np.ndarray, p: GroupParams, spec: QuantSpec) -> np.ndarray:
    in_dim = w_int.shape[1]
    grid = GroupParams(s=expand_groups(p.s, spec, in_dim),
                       z=expand_groups(p.z, spec, in_dim))
    return dequantize(w_int, grid, spec)


# ---------------------------------------------------------------------------
# bit-budget accounting
# ---------------------------------------------------------------------------

def avg_bits(spec: QuantSpec, in_dim: int | None = None, z_fp16: bool = False) -> float:
    """Average stored bits per quantized parameter.

    Default layout charges N-bit weights plus one N-bit zero point and one
    16-bit step size per group: N + (N + 16) / g.  When zero points are kept
    as 16-bit floats (end-to-end z training) the charge is N + 32 / g.
    """
    if spec.group_size == -1:
        if in_dim is None:
            raise DimensionError("channel-wise avg_bits needs the input extent")
        g = in_dim
    else:
        g = spec.group_size
    z_bits = 16 if z_fp16 else spec.bits
    return spec.bits + (z_bits + 16) / g


def model_size_bits(layer_dims: list[tuple[int, int]], spec: QuantSpec,
                    fp_param_count: int = 0, z_fp16: bool = False) -> int:
    """Exact stored content in bits, before any byte-boundary padding."""
    total = 16 * fp_param_count
    for out_dim, in_dim in layer_dims:
        groups = out_dim * spec.n_groups(in_dim)
        z_bits = 16 if z_fp16 else spec.bits
        total += out_dim * in_dim * spec.bits + groups * z_bits + groups * 16
    return total


def model_size_bytes(layer_dims: list[tuple[int, int]], spec: QuantSpec,
                     fp_param_count: int = 0, z_fp16: bool = False) -> int:
    """Packed storage bytes: ceil-packed N-bit weights (per-row byte aligned),
    packed N-bit zero points, 16-bit step sizes, 2 bytes per FP parameter."""
    total = 2 * fp_param_count
    for out_dim, in_dim in layer_dims:
        groups = out_dim * spec.n_groups(in_dim)
        total += out_dim * math.ceil(in_dim * spec.bits / 8)
        total += groups * 2 if z_fp16 else math.ceil(groups * spec.bits / 8)
        total += groups * 2
    return total
