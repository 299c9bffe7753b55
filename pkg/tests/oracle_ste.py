"""Independent forward-mode AD oracle for the quantizer's STE surrogate.

Evaluates w_hat(w, s, z) = (clip_pass(round_pass(w/s) + z, 0, 2^N - 1) - z) * s
with dual numbers, where round_pass passes gradients straight through and
clip_pass passes them only inside the clamp range. This is deliberately a
separate implementation from the library's backward rules.
"""

import numpy as np


class Dual:
    """value + derivative pair under elementwise arithmetic."""

    def __init__(self, val, dot):
        self.val = np.asarray(val, dtype=np.float64)
        self.dot = np.asarray(dot, dtype=np.float64)

    def __add__(self, o):
        return Dual(self.val + o.val, self.dot + o.dot)

    def __sub__(self, o):
        return Dual(self.val - o.val, self.dot - o.dot)

    def __mul__(self, o):
        return Dual(self.val * o.val, self.dot * o.val + self.val * o.dot)

    def __truediv__(self, o):
        return Dual(self.val / o.val, (self.dot * o.val - self.val * o.dot) / (o.val ** 2))


def round_pass(u: Dual) -> Dual:
    return Dual(np.rint(u.val), u.dot)


def clip_pass(u: Dual, lo: float, hi: float) -> Dual:
    inside = (u.val >= lo) & (u.val <= hi)
    return Dual(np.clip(u.val, lo, hi), np.where(inside, u.dot, 0.0))


def surrogate(w: Dual, s: Dual, z: Dual, bits: int) -> Dual:
    qmax = (1 << bits) - 1
    return (clip_pass(round_pass(w / s) + z, 0.0, float(qmax)) - z) * s


def ste_oracle_grads(w, s, z, bits):
    """Forward-mode derivatives of the surrogate w.r.t. w, s, and z."""
    w = np.asarray(w, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    one = np.ones_like(w)
    zero = np.zeros_like(w)
    dw = surrogate(Dual(w, one), Dual(s, zero), Dual(z, zero), bits).dot
    ds = surrogate(Dual(w, zero), Dual(s, one), Dual(z, zero), bits).dot
    dz = surrogate(Dual(w, zero), Dual(s, zero), Dual(z, one), bits).dot
    what = surrogate(Dual(w, zero), Dual(s, zero), Dual(z, zero), bits).val
    return what, dw, ds, dz
