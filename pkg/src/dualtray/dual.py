"""Vectorised forward-mode automatic differentiation.

A :class:`Dual` carries values of any shape together with their
derivatives with respect to ``n`` seed directions (trailing axis of
``der``).  Numpy ufuncs dispatch through ``__array_ufunc__`` so model code
written against plain arrays (``np.sin(x) * y``) differentiates unchanged.
"""

from __future__ import annotations

import numpy as np


class Dual:
    __slots__ = ("val", "der")
    __array_priority__ = 100

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=float)
        self.der = np.asarray(der, dtype=float)

    @classmethod
    def seed(cls, val, offset: int, n: int) -> "Dual":
        """Variables ``val[..., i]`` get unit derivative along seed ``offset + i``."""
        val = np.asarray(val, dtype=float)
        k = val.shape[-1]
        der = np.zeros(val.shape + (n,))
        idx = np.arange(k)
        der[..., idx, offset + idx] = 1.0
        return cls(val, der)

    @property
    def shape(self):
        return self.val.shape

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        return Dual(self.val[key], self.der[key + (slice(None),)])

    def __repr__(self) -> str:
        return f"Dual(val={self.val!r}, der_shape={self.der.shape})"

    # arithmetic ----------------------------------------------------------
    @staticmethod
    def _parts(x):
        if isinstance(x, Dual):
            return x.val, x.der
        return np.asarray(x, dtype=float), None

    def __add__(self, other):
        ov, od = self._parts(other)
        return Dual(self.val + ov, self.der if od is None else self.der + od)

    __radd__ = __add__

    def __sub__(self, other):
        ov, od = self._parts(other)
        return Dual(self.val - ov, self.der if od is None else self.der - od)

    def __rsub__(self, other):
        return Dual(np.asarray(other, dtype=float) - self.val, -self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __mul__(self, other):
        ov, od = self._parts(other)
        der = self.der * ov[..., None]
        if od is not None:
            der = der + od * self.val[..., None]
        return Dual(self.val * ov, der)

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov, od = self._parts(other)
        val = self.val / ov
        der = self.der / ov[..., None]
        if od is not None:
            der = der - od * (val / ov)[..., None]
        return Dual(val, der)

    def __rtruediv__(self, other):
        val = np.asarray(other, dtype=float) / self.val
        return Dual(val, -self.der * (val / self.val)[..., None])

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("Dual exponents are not supported")
        return Dual(self.val**p, self.der * (p * self.val ** (p - 1))[..., None])

    # numpy interop -------------------------------------------------------
    def _chain(self, val, dval):
        return Dual(val, self.der * dval[..., None])

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            return NotImplemented
        if ufunc in _BINARY:
            a, b = inputs
            return _BINARY[ufunc](a if isinstance(a, Dual) else Dual._const(a, b),
                                  b if isinstance(b, Dual) else Dual._const(b, a))
        if ufunc in _UNARY and len(inputs) == 1:
            x = inputs[0]
            return _UNARY[ufunc](x)
        return NotImplemented

    @staticmethod
    def _const(x, like: "Dual") -> "Dual":
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(x.shape, like.val.shape)
        return Dual(np.broadcast_to(x, shape), np.zeros(shape + like.der.shape[-1:]))


def _sin(x):
    return x._chain(np.sin(x.val), np.cos(x.val))


def _cos(x):
    return x._chain(np.cos(x.val), -np.sin(x.val))


def _tanh(x):
    t = np.tanh(x.val)
    return x._chain(t, 1.0 - t * t)


def _exp(x):
    e = np.exp(x.val)
    return x._chain(e, e)


def _sqrt(x):
    r = np.sqrt(x.val)
    return x._chain(r, 0.5 / r)


def _square(x):
    return x._chain(x.val * x.val, 2.0 * x.val)


_UNARY = {
    np.sin: _sin,
    np.cos: _cos,
    np.tanh: _tanh,
    np.exp: _exp,
    np.sqrt: _sqrt,
    np.square: _square,
    np.negative: lambda x: -x,
}

_BINARY = {
    np.add: lambda a, b: a + b,
    np.subtract: lambda a, b: a - b,
    np.multiply: lambda a, b: a * b,
    np.true_divide: lambda a, b: a / b,
}


def stack(parts, axis: int = -1):
    """``np.stack`` that also accepts :class:`Dual` members."""
    if not any(isinstance(p, Dual) for p in parts):
        return np.stack(parts, axis=axis)
    ref = next(p for p in parts if isinstance(p, Dual))
    duals = [p if isinstance(p, Dual) else Dual._const(p, ref) for p in parts]
    shape = np.broadcast_shapes(*(d.val.shape for d in duals))
    vals = [np.broadcast_to(d.val, shape) for d in duals]
    ders = [np.broadcast_to(d.der, shape + d.der.shape[-1:]) for d in duals]
    ax = axis if axis >= 0 else len(shape) + 1 + axis
    return Dual(np.stack(vals, axis=ax), np.stack(ders, axis=ax))


def value(x):
    return x.val if isinstance(x, Dual) else np.asarray(x, dtype=float)


def jacobian(f, x, *args):
    """Dense Jacobian of ``f`` at ``x`` (1-D) by forward mode."""
    x = np.asarray(x, dtype=float)
    out = f(Dual.seed(x, 0, x.size), *args)
    return out.der
