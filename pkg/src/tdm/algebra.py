"""Multilinear products: Hadamard, Kronecker, Khatri-Rao, outer and n-mode."""

from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .dimension import Dimension, KeyType
from .errors import EmptyInput, NonNumericValueType, ShapeMismatch, TypeMismatch
from .tensor import TypedTensor, ValueType, fold, from_dense, promote

__all__ = [
    "hadamard",
    "kronecker",
    "khatri_rao",
    "khatri_rao_all",
    "outer",
    "n_mode_product",
    "n_mode_product_dense",
]


def _as_numeric(t: TypedTensor) -> TypedTensor:
    return t.astype(ValueType.INTEGER) if t.value_type is ValueType.BOOLEAN else t


def hadamard(x: TypedTensor, y: TypedTensor) -> TypedTensor:
    """Elementwise product of two equally shaped tensors.

    The result default is ``x.default * y.default``.  When either default is 0
    only the stored entries of that operand are visited.  Boolean operands are
    promoted to integers 0/1.
    """
    if not isinstance(x, TypedTensor) or not isinstance(y, TypedTensor):
        raise TypeMismatch("hadamard expects two TypedTensor operands")
    if x.shape != y.shape:
        raise ShapeMismatch(f"hadamard shapes differ: {x.shape} vs {y.shape}")
    x, y = _as_numeric(x), _as_numeric(y)
    value_type = promote(x.value_type, y.value_type)
    conv = float if value_type is ValueType.REAL else int
    dx, dy = x.default, y.default
    default = conv(dx * dy)
    xd, yd = x._data, y._data
    if dx == 0 and dy == 0:
        small, large = (xd, yd) if len(xd) <= len(yd) else (yd, xd)
        coords = (c for c in small if c in large)
    elif dx == 0:
        coords = iter(xd)
    elif dy == 0:
        coords = iter(yd)
    else:
        coords = itertools.chain(xd, (c for c in yd if c not in xd))
    data = {}
    for c in coords:
        v = conv(xd.get(c, dx) * yd.get(c, dy))
        if v != default:
            data[c] = v
    return TypedTensor._trusted(x.name, x.dims, value_type, default, data)


def _matrix(a, label: str) -> np.ndarray:
    a = np.asarray(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"{label} must be a 2-d matrix, got shape {a.shape}")
    return a


def kronecker(a, b) -> np.ndarray:
    """Kronecker product: block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a, b = _matrix(a, "a"), _matrix(b, "b")
    (p, q), (r, s) = a.shape, b.shape
    return (a[:, None, :, None] * b[None, :, None, :]).reshape(p * r, q * s)


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product of matrices with equal column counts.

    Row ``i * b.rows + j`` of the result is ``a[i] * b[j]``.
    """
    a, b = _matrix(a, "a"), _matrix(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ShapeMismatch(f"khatri_rao needs equal column counts, got {a.shape[1]} and {b.shape[1]}")
    return (a[:, None, :] * b[None, :, :]).reshape(a.shape[0] * b.shape[0], a.shape[1])


def khatri_rao_all(mats: Sequence[np.ndarray]) -> np.ndarray:
    """``mats[0] ⊙ mats[1] ⊙ ...`` (the last matrix varies fastest)."""
    out = mats[0]
    for m in mats[1:]:
        out = khatri_rao(out, m)
    return out


def outer(vs: Sequence[TypedTensor], name: str | None = None) -> TypedTensor:
    """Outer product of 1-order tensors; entry ``(i1..iN) = prod vs[n][i_n]``."""
    vs = list(vs)
    if not vs:
        raise EmptyInput("outer needs at least one vector")
    for v in vs:
        if not isinstance(v, TypedTensor) or v.order != 1:
            raise ShapeMismatch("outer expects 1-order tensors")
    vs = [_as_numeric(v) for v in vs]
    value_type = vs[0].value_type
    for v in vs[1:]:
        value_type = promote(value_type, v.value_type)
    if name is None:
        name = vs[0].name if len(vs) == 1 else "outer"
    dims = [v.dims[0] for v in vs]
    conv = float if value_type is ValueType.REAL else int
    if len(vs) == 1:
        v = vs[0]
        data = {c: conv(x) for c, x in v._data.items()}
        return TypedTensor._trusted(name, dims, value_type, conv(v.default), data)
    if all(v.default == 0 for v in vs):
        data = {}
        for combo in itertools.product(*(sorted(v._data.items()) for v in vs)):
            val = conv(math.prod(x for _, x in combo))
            if val != 0:
                data[tuple(c[0] for c, _ in combo)] = val
        return TypedTensor._trusted(name, dims, value_type, conv(0), data)
    dense = vs[0].to_dense()
    for v in vs[1:]:
        dense = np.multiply.outer(dense, v.to_dense())
    return from_dense(name, dims, dense, value_type=value_type, default=0)


def _proj_dimension(original: Dimension, size: int) -> Dimension:
    return Dimension(f"{original.name}_proj", KeyType.INTEGER, range(1, size + 1))


def n_mode_product(x: TypedTensor, m, n: int | str) -> TypedTensor:
    """Mode-``n`` product ``x ×_n m``.

    Satisfies ``unfold(result, n) == m @ unfold(x, n)``.  The contracted
    dimension is replaced by an integer dimension ``<name>_proj`` with keys
    ``1..m.rows``.  The result has default 0.
    """
    if not x.value_type.numeric:
        raise NonNumericValueType("n_mode_product requires a numeric tensor")
    m = _matrix(m, "m")
    mode = x.mode_of(n)
    if m.shape[1] != x.shape[mode]:
        raise ShapeMismatch(
            f"matrix has {m.shape[1]} columns but mode {mode + 1} has size {x.shape[mode]}"
        )
    if m.dtype.kind == "b":
        m = m.astype(np.int64)
    product = m @ x.unfold(mode + 1)
    dims = list(x.dims)
    dims[mode] = _proj_dimension(x.dims[mode], m.shape[0])
    return fold(product, mode + 1, dims, name=x.name, default=0)


def n_mode_product_dense(array: np.ndarray, m: np.ndarray, mode: int) -> np.ndarray:
    """Dense helper: ``array ×_mode m`` for a 0-based ``mode``."""
    moved = np.tensordot(m, array, axes=(1, mode))
    return np.moveaxis(moved, 0, mode)
