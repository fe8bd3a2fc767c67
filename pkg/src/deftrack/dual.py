"""Minimal forward-mode dual numbers over numpy arrays.

Used as an independent differentiation path to cross-check the analytic
gradients: seed one parameter's dot with 1, evaluate the objective in dual
arithmetic, and read the directional derivative off the result. Only the
operations the cost evaluation needs are implemented.
"""

import numpy as np


class Dual:
    __slots__ = ("val", "dot")

    def __init__(self, val, dot=None):
        self.val = np.asarray(val, dtype=np.float64)
        self.dot = (np.zeros_like(self.val) if dot is None
                    else np.asarray(dot, dtype=np.float64))

    @staticmethod
    def lift(x):
        return x if isinstance(x, Dual) else Dual(np.asarray(x, np.float64),
                                                  np.zeros_like(np.asarray(x, np.float64)))

    def __getitem__(self, key):
        return Dual(self.val[key], self.dot[key])

    def __add__(self, other):
        o = Dual.lift(other)
        return Dual(self.val + o.val, self.dot + o.dot)

    __radd__ = __add__

    def __sub__(self, other):
        o = Dual.lift(other)
        return Dual(self.val - o.val, self.dot - o.dot)

    def __rsub__(self, other):
        o = Dual.lift(other)
        return Dual(o.val - self.val, o.dot - self.dot)

    def __mul__(self, other):
        o = Dual.lift(other)
        return Dual(self.val * o.val, self.dot * o.val + self.val * o.dot)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = Dual.lift(other)
        return Dual(self.val / o.val,
                    (self.dot * o.val - self.val * o.dot) / (o.val * o.val))

    def __neg__(self):
        return Dual(-self.val, -self.dot)


def cross(a, b):
    a = Dual.lift(a)
    b = Dual.lift(b)
    return Dual(np.cross(a.val, b.val),
                np.cross(a.dot, b.val) + np.cross(a.val, b.dot))


def dsum(a, axis=None, keepdims=False):
    a = Dual.lift(a)
    return Dual(np.sum(a.val, axis=axis, keepdims=keepdims),
                np.sum(a.dot, axis=axis, keepdims=keepdims))


def concat(parts, axis=0):
    parts = [Dual.lift(p) for p in parts]
    return Dual(np.concatenate([p.val for p in parts], axis=axis),
                np.concatenate([p.dot for p in parts], axis=axis))


def rotate(q, v):
    """Dual-number twin of kernels.rotate_vectors."""
    q = Dual.lift(q)
    v = Dual.lift(v)
    w = q[..., :1]
    qv = q[..., 1:]
    s = dsum(q * q, axis=-1, keepdims=True)
    u = cross(qv, cross(qv, v) + w * v)
    return v + (u * 2.0) / s
