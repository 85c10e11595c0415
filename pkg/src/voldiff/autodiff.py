"""Forward-mode automatic differentiation with fixed-width derivative tuples.

A :class:`Dual` carries a value together with its partial derivatives with
respect to ``p`` seeded parameters.  The payload may be a python float or a
numpy array, so whole pixel buffers can be pushed through the arithmetic in
one go.  Cost grows linearly with ``p``, which is why the renderer only
instantiates small widths (camera: p=2, stepsize: p=1); high-dimensional
parameters go through the adjoint path instead.

The module-level functions (``exp``, ``minimum``, ``where``, ...) accept
either duals or plain numpy values and dispatch accordingly, so numeric code
can be written once and run in both differentiated and plain mode.
"""

from __future__ import annotations

import numpy as np

from .errors import DomainError


def _coerce(x, p):
    """Lift a plain value to a zero-derivative Dual of width p."""
    if isinstance(x, Dual):
        return x
    val = np.asarray(x, dtype=np.float64)
    return Dual(val, np.zeros((p,) + val.shape, dtype=np.float64))


def _pad(der, payload_ndim):
    """Insert singleton payload axes so der aligns as (p, *payload)."""
    cur = der.ndim - 1
    if cur >= payload_ndim:
        return der
    p = der.shape[0]
    return der.reshape((p,) + (1,) * (payload_ndim - cur) + der.shape[1:])


class Dual:
    """Value plus an array of p partial derivatives.

    ``der`` has shape ``(p,) + shape(val)``.  Constants carry all-zero
    derivatives; a seeded parameter carries a single 1.
    """

    __slots__ = ("val", "der")

    # keep numpy from absorbing duals into object arrays; binary ops with
    # ndarrays then fall back to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = np.asarray(val, dtype=np.float64)
        self.der = np.asarray(der, dtype=np.float64)
        if self.der.shape[1:] != self.val.shape:
            raise ValueError(
                f"derivative shape {self.der.shape} does not extend value shape {self.val.shape}"
            )

    @property
    def p(self) -> int:
        return self.der.shape[0]

    @classmethod
    def constant(cls, val, p: int) -> "Dual":
        val = np.asarray(val, dtype=np.float64)
        return cls(val, np.zeros((p,) + val.shape, dtype=np.float64))

    @classmethod
    def seed(cls, val, index: int, p: int) -> "Dual":
        """Parameter variable: derivative one in slot ``index``, zero elsewhere."""
        val = np.asarray(val, dtype=np.float64)
        der = np.zeros((p,) + val.shape, dtype=np.float64)
        der[index] = 1.0
        return cls(val, der)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        o = _coerce(other, self.p)
        val = self.val + o.val
        return Dual(val, _pad(self.der, val.ndim) + _pad(o.der, val.ndim))

    __radd__ = __add__

    def __sub__(self, other):
        o = _coerce(other, self.p)
        val = self.val - o.val
        return Dual(val, _pad(self.der, val.ndim) - _pad(o.der, val.ndim))

    def __rsub__(self, other):
        return _coerce(other, self.p).__sub__(self)

    def __mul__(self, other):
        o = _coerce(other, self.p)
        val = self.val * o.val
        der = self.val * _pad(o.der, val.ndim) + o.val * _pad(self.der, val.ndim)
        return Dual(val, der)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = _coerce(other, self.p)
        if np.any(o.val == 0.0):
            raise DomainError("dual division by zero value part")
        # plain division keeps the value part bit-identical to undifferentiated code
        val = self.val / o.val
        inv = 1.0 / o.val
        der = (_pad(self.der, val.ndim) - val * _pad(o.der, val.ndim)) * inv
        return Dual(val, der)

    def __rtruediv__(self, other):
        return _coerce(other, self.p).__truediv__(self)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __pow__(self, k):
        if isinstance(k, Dual):
            raise DomainError("dual exponents are not supported")
        k = float(k)
        if k != int(k) and np.any(self.val < 0.0):
            raise DomainError("fractional power of a negative value")
        return Dual(self.val ** k, k * self.val ** (k - 1.0) * self.der)

    # comparisons act on value parts only ----------------------------------

    def __lt__(self, other):
        return self.val < value_of(other)

    def __le__(self, other):
        return self.val <= value_of(other)

    def __gt__(self, other):
        return self.val > value_of(other)

    def __ge__(self, other):
        return self.val >= value_of(other)

    def __repr__(self):
        return f"Dual(val={self.val!r}, der={self.der!r})"


def value_of(x):
    """Value part of a Dual, or the input itself for plain numerics."""
    return x.val if isinstance(x, Dual) else x


def derivative_of(x, p: int):
    """Derivative part of ``x``, all zeros for plain numerics."""
    if isinstance(x, Dual):
        return x.der
    return np.zeros((p,) + np.shape(np.asarray(x)), dtype=np.float64)


def exp(x):
    if isinstance(x, Dual):
        e = np.exp(x.val)
        return Dual(e, e * x.der)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        if np.any(x.val <= 0.0):
            raise DomainError("log of non-positive value")
        return Dual(np.log(x.val), x.der / x.val)
    return np.log(x)


def sqrt(x):
    if isinstance(x, Dual):
        if np.any(x.val < 0.0):
            raise DomainError("sqrt of negative value")
        s = np.sqrt(x.val)
        return Dual(s, x.der / (2.0 * s))
    return np.sqrt(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), np.cos(x.val) * x.der)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -np.sin(x.val) * x.der)
    return np.cos(x)


def where(cond, a, b):
    """Branch select on a plain boolean mask; derivatives follow the branch."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        p = a.p if isinstance(a, Dual) else b.p
        ad_ = _coerce(a, p)
        bd_ = _coerce(b, p)
        val = np.where(cond, ad_.val, bd_.val)
        der = np.where(cond, _pad(ad_.der, val.ndim), _pad(bd_.der, val.ndim))
        return Dual(val, der)
    return np.where(cond, a, b)


def maximum(a, b):
    """max(a, b); at ties the derivative of the first argument wins."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return where(value_of(a) >= value_of(b), a, b)
    return np.maximum(a, b)


def minimum(a, b):
    """min(a, b); at ties the derivative of the first argument wins."""
    if isinstance(a, Dual) or isinstance(b, Dual):
        return where(value_of(a) <= value_of(b), a, b)
    return np.minimum(a, b)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)
