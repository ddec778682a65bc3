"""Sparse typed tensors over named dimensions.

A :class:`TypedTensor` is the tuple ``(name, dims, values, value_type)`` where
``values`` is a sparse map from coordinates to values and every coordinate not
stored holds ``default``.  Tensors never store an entry equal to their default.

Coordinates, indices and modes are 1-based at the public surface.  Internally
coordinates are kept 0-based.
"""

from __future__ import annotations

import io
import math
import numbers
import os
from enum import Enum
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .dimension import Dimension, KeyType
from .errors import (
    DuplicateDimensionName,
    IndexOutOfRange,
    ModeOutOfRange,
    NonNumericValueType,
    ShapeMismatch,
    TypeMismatch,
)

__all__ = [
    "ValueType",
    "Index",
    "TypedTensor",
    "TensorBuilder",
    "new_tensor",
    "scalar_tensor",
    "from_dense",
    "fold",
    "fold_array",
    "unfold_array",
    "frobenius_norm",
    "read_coo",
    "write_coo",
    "index_dimension",
    "SPARSIFY_ATOL",
]

SPARSIFY_ATOL = 1e-12


class ValueType(str, Enum):
    INTEGER = "integer"
    REAL = "real"
    BOOLEAN = "boolean"

    @property
    def numeric(self) -> bool:
        return self is not ValueType.BOOLEAN

    @property
    def dtype(self):
        return {"integer": np.int64, "real": np.float64, "boolean": np.bool_}[self.value]

    @classmethod
    def of_dtype(cls, dtype) -> ValueType:
        kind = np.dtype(dtype).kind
        if kind in "iu":
            return cls.INTEGER
        if kind == "f":
            return cls.REAL
        if kind == "b":
            return cls.BOOLEAN
        raise TypeMismatch(f"unsupported dtype {dtype}")


def promote(a: ValueType, b: ValueType) -> ValueType:
    """Numeric promotion; booleans count as integers."""
    if ValueType.REAL in (a, b):
        return ValueType.REAL
    return ValueType.INTEGER


def coerce_value(value_type: ValueType, v: Any):
    if value_type is ValueType.BOOLEAN:
        if isinstance(v, (bool, np.bool_)):
            return bool(v)
        raise TypeMismatch(f"expected a boolean value, got {v!r}")
    if value_type is ValueType.INTEGER:
        if isinstance(v, (bool, np.bool_)) or not isinstance(v, numbers.Integral):
            raise TypeMismatch(f"expected an integer value, got {v!r}")
        return int(v)
    if isinstance(v, (bool, np.bool_)) or not isinstance(v, numbers.Real):
        raise TypeMismatch(f"expected a real value, got {v!r}")
    return float(v)


class Index(int):
    """Marks a coordinate as a raw 1-based index rather than a dimension key."""

    def __repr__(self):
        return f"Index({int(self)})"


def index_dimension(name: str, size: int) -> Dimension:
    """Anonymous integer dimension with keys ``1..size``."""
    return Dimension(name, KeyType.INTEGER, range(1, size + 1))


def _check_dims(dims: Sequence[Dimension]) -> tuple[Dimension, ...]:
    dims = tuple(dims)
    for d in dims:
        if not isinstance(d, Dimension):
            raise TypeError(f"expected Dimension, got {type(d).__name__}")
    names = [d.name for d in dims]
    if len(set(names)) != len(names):
        raise DuplicateDimensionName(f"dimension names must be distinct: {names}")
    return dims


class TypedTensor:
    """Immutable sparse N-order tensor.

    Use :func:`new_tensor` or :class:`TensorBuilder` to construct one, and
    :meth:`set` to derive an updated copy.
    """

    __slots__ = ("name", "dims", "value_type", "default", "_data", "_coo")

    def __init__(self, name, dims, value_type, default, data=None):
        self.name = name
        self.dims = _check_dims(dims)
        self.value_type = ValueType(value_type)
        self.default = coerce_value(self.value_type, default)
        self._data: dict = {}
        self._coo = None
        if data:
            shape = self.shape
            for coord, v in data.items():
                coord = tuple(coord)
                if len(coord) != len(shape) or any(
                    not 0 <= c < s for c, s in zip(coord, shape)
                ):
                    raise IndexOutOfRange(f"coordinate {coord} outside shape {shape}")
                v = coerce_value(self.value_type, v)
                if v != self.default:
                    self._data[coord] = v

    @classmethod
    def _trusted(cls, name, dims, value_type, default, data) -> TypedTensor:
        """Wrap an already-canonical 0-based dict without validation."""
        t = cls.__new__(cls)
        t.name = name
        t.dims = tuple(dims)
        t.value_type = value_type
        t.default = default
        t._data = data
        t._coo = None
        return t

    # shape ------------------------------------------------------------------

    @property
    def order(self) -> int:
        return len(self.dims)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(d.size for d in self.dims)

    @property
    def nnz(self) -> int:
        return len(self._data)

    @property
    def dim_names(self) -> tuple[str, ...]:
        return tuple(d.name for d in self.dims)

    def mode_of(self, mode: int | str) -> int:
        """Return the 0-based mode for a 1-based mode number or a dimension name/alias."""
        if isinstance(mode, str):
            for n, d in enumerate(self.dims):
                if d.name == mode:
                    return n
            for n, d in enumerate(self.dims):
                if d.alias == mode:
                    return n
            raise ModeOutOfRange(f"tensor {self.name!r} has no dimension {mode!r}")
        if isinstance(mode, bool) or not isinstance(mode, numbers.Integral):
            raise ModeOutOfRange(f"invalid mode {mode!r}")
        if not 1 <= mode <= self.order:
            raise ModeOutOfRange(f"mode {mode} outside 1..{self.order}")
        return int(mode) - 1

    # addressing -------------------------------------------------------------

    def _resolve_one(self, n: int, c: Any) -> int:
        dim = self.dims[n]
        if isinstance(c, Index):
            if not 1 <= c <= dim.size:
                raise IndexOutOfRange(f"index {int(c)} outside 1..{dim.size} for {dim.name!r}")
            return int(c) - 1
        return dim.index_of(c) - 1

    def _resolve(self, coords: Sequence[Any]) -> tuple[int, ...]:
        if not isinstance(coords, (tuple, list)):
            coords = (coords,)
        if len(coords) != self.order:
            raise IndexOutOfRange(f"expected {self.order} coordinates, got {len(coords)}")
        return tuple(self._resolve_one(n, c) for n, c in enumerate(coords))

    def get(self, coords: Sequence[Any]):
        """Value at ``coords`` (keys, or :class:`Index` for raw indices)."""
        return self._data.get(self._resolve(coords), self.default)

    def get_index(self, *indices: int):
        """Value at 1-based integer indices."""
        return self.get(tuple(Index(i) for i in indices))

    def __getitem__(self, coords):
        return self.get(coords)

    def set(self, coords: Sequence[Any], v: Any) -> TypedTensor:
        """Return a copy with ``coords`` set to ``v``."""
        coord = self._resolve(coords)
        v = coerce_value(self.value_type, v)
        data = dict(self._data)
        if v == self.default:
            data.pop(coord, None)
        else:
            data[coord] = v
        return TypedTensor._trusted(self.name, self.dims, self.value_type, self.default, data)

    def entries(self) -> Iterator[tuple[tuple[int, ...], Any]]:
        """Stored entries as ``(1-based indices, value)`` in lexicographic order."""
        for coord in sorted(self._data):
            yield tuple(c + 1 for c in coord), self._data[coord]

    def keyed_entries(self) -> Iterator[tuple[tuple, Any]]:
        """Stored entries as ``(keys, value)`` in lexicographic index order."""
        for coord in sorted(self._data):
            keys = tuple(d.key_of(c + 1) for d, c in zip(self.dims, coord))
            yield keys, self._data[coord]

    def coo(self) -> tuple[np.ndarray, np.ndarray]:
        """0-based ``(subs, vals)`` arrays sorted lexicographically (cached)."""
        if self._coo is None:
            coords = sorted(self._data)
            subs = np.array(coords, dtype=np.int64).reshape(len(coords), self.order)
            vals = np.array([self._data[c] for c in coords], dtype=self.value_type.dtype)
            subs.setflags(write=False)
            vals.setflags(write=False)
            self._coo = (subs, vals)
        return self._coo

    def to_dense(self) -> np.ndarray:
        out = np.full(self.shape, self.default, dtype=self.value_type.dtype)
        if self._data:
            subs, vals = self.coo()
            if self.order == 0:
                out[()] = vals[0]
            else:
                out[tuple(subs.T)] = vals
        return out

    def item(self):
        if self.order != 0:
            raise ShapeMismatch("item() requires a 0-order tensor")
        return self._data.get((), self.default)

    def astype(self, value_type: ValueType | str) -> TypedTensor:
        value_type = ValueType(value_type)
        if value_type is self.value_type:
            return self
        conv = {ValueType.INTEGER: int, ValueType.REAL: float, ValueType.BOOLEAN: bool}[value_type]
        if value_type is ValueType.INTEGER and self.value_type is ValueType.REAL:
            raise TypeMismatch("refusing lossy real -> integer conversion")
        default = conv(self.default)
        data = {c: conv(v) for c, v in self._data.items() if conv(v) != default}
        return TypedTensor._trusted(self.name, self.dims, value_type, default, data)

    def renamed(self, name: str) -> TypedTensor:
        return TypedTensor._trusted(name, self.dims, self.value_type, self.default, self._data)

    def __eq__(self, other):
        if not isinstance(other, TypedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.dims == other.dims
            and self.value_type is other.value_type
            and self.default == other.default
            and self._data == other._data
        )

    __hash__ = None

    def __repr__(self):
        dims = " x ".join(f"{d.name}:{d.size}" for d in self.dims)
        return (
            f"TypedTensor({self.name!r}, [{dims}], {self.value_type.value}, "
            f"default={self.default!r}, nnz={self.nnz})"
        )

    # structural views ---------------------------------------------------------

    def _fixed_coords(self, free: Sequence[int], fixed) -> dict[int, int]:
        others = [n for n in range(self.order) if n not in free]
        if isinstance(fixed, Mapping):
            resolved = {self.mode_of(m): c for m, c in fixed.items()}
            if sorted(resolved) != others:
                raise ModeOutOfRange(
                    f"fixed coordinates must cover exactly modes {[n + 1 for n in others]}"
                )
        else:
            fixed = list(fixed)
            if len(fixed) != len(others):
                raise ModeOutOfRange(
                    f"expected {len(others)} fixed coordinates, got {len(fixed)}"
                )
            resolved = dict(zip(others, fixed))
        return {n: self._resolve_one(n, c) for n, c in resolved.items()}

    def _subtensor(self, free: Sequence[int], fixed) -> TypedTensor:
        pinned = self._fixed_coords(free, fixed)
        data = {}
        for coord, v in self._data.items():
            if all(coord[n] == c for n, c in pinned.items()):
                data[tuple(coord[n] for n in free)] = v
        dims = [self.dims[n] for n in free]
        return TypedTensor._trusted(self.name, dims, self.value_type, self.default, data)

    def fiber(self, free_mode: int | str, fixed) -> TypedTensor:
        """Vector obtained by fixing every mode except ``free_mode``.

        ``fixed`` lists the coordinates of the remaining modes in mode order,
        or maps mode (number or dimension name) to coordinate.
        """
        if self.order < 1:
            raise ModeOutOfRange("fiber requires order >= 1")
        return self._subtensor([self.mode_of(free_mode)], fixed)

    def slice(self, free_modes: Sequence[int | str], fixed=()) -> TypedTensor:
        """Matrix obtained by fixing every mode except the two ``free_modes``."""
        if self.order < 2:
            raise ModeOutOfRange("slice requires order >= 2")
        free = [self.mode_of(m) for m in free_modes]
        if len(free) != 2 or free[0] == free[1]:
            raise ModeOutOfRange("slice needs two distinct free modes")
        return self._subtensor(free, fixed)

    def unfold(self, mode: int | str) -> np.ndarray:
        """Mode-``mode`` matricization.

        Column ordering puts the lowest remaining mode fastest:
        ``j = sum_{k != n} i_k * J_k`` with ``J_k = prod_{m < k, m != n} I_m``
        (0-based indices).
        """
        if not self.value_type.numeric:
            raise NonNumericValueType("unfold requires a numeric tensor")
        n = self.mode_of(mode)
        shape = self.shape
        strides = _unfold_strides(shape, n)
        cols = math.prod(s for k, s in enumerate(shape) if k != n)
        out = np.full((shape[n], cols), self.default, dtype=self.value_type.dtype)
        if self._data:
            subs, vals = self.coo()
            out[subs[:, n], subs @ strides] = vals
        return out

    def frobenius_norm(self) -> float:
        return frobenius_norm(self)


def _unfold_strides(shape: Sequence[int], n: int) -> np.ndarray:
    strides = np.zeros(len(shape), dtype=np.int64)
    acc = 1
    for k, s in enumerate(shape):
        if k == n:
            continue
        strides[k] = acc
        acc *= s
    return strides


class TensorBuilder:
    """Mutable accumulator; :meth:`freeze` yields the immutable tensor."""

    def __init__(self, name: str, dims: Sequence[Dimension], value_type, default=None):
        value_type = ValueType(value_type)
        if default is None:
            default = False if value_type is ValueType.BOOLEAN else 0
        self._proto = TypedTensor(name, dims, value_type, default)
        self._data: dict = {}

    def set(self, coords, v) -> None:
        coord = self._proto._resolve(coords)
        v = coerce_value(self._proto.value_type, v)
        if v == self._proto.default:
            self._data.pop(coord, None)
        else:
            self._data[coord] = v

    def freeze(self) -> TypedTensor:
        p = self._proto
        return TypedTensor._trusted(p.name, p.dims, p.value_type, p.default, dict(self._data))


def new_tensor(name: str, dims: Sequence[Dimension], value_type, default=None) -> TypedTensor:
    """Empty typed tensor: every coordinate holds ``default``."""
    if not dims:
        raise ShapeMismatch("a tensor needs at least one dimension; use scalar_tensor")
    value_type = ValueType(value_type)
    if default is None:
        default = False if value_type is ValueType.BOOLEAN else 0
    return TypedTensor(name, dims, value_type, default)


def scalar_tensor(value, name: str = "scalar", value_type=None) -> TypedTensor:
    """0-order tensor holding ``value``."""
    if value_type is None:
        value_type = (
            ValueType.BOOLEAN if isinstance(value, (bool, np.bool_))
            else ValueType.INTEGER if isinstance(value, numbers.Integral)
            else ValueType.REAL
        )
    value_type = ValueType(value_type)
    default = coerce_value(value_type, False if value_type is ValueType.BOOLEAN else 0)
    return TypedTensor(name, (), value_type, default, {(): value})


def _sparsify(value_type: ValueType, default, array: np.ndarray) -> dict:
    if value_type is ValueType.REAL:
        keep = np.abs(array - default) > SPARSIFY_ATOL
    else:
        keep = array != default
    idx = np.nonzero(keep)
    vals = array[idx].tolist()
    return dict(zip(map(tuple, np.transpose(idx).tolist()), vals))


def from_dense(
    name: str,
    dims: Sequence[Dimension],
    array: np.ndarray,
    *,
    value_type=None,
    default=None,
) -> TypedTensor:
    """Sparse tensor from a dense array; entries within 1e-12 of default are dropped for reals."""
    array = np.asarray(array)
    dims = _check_dims(dims)
    if array.shape != tuple(d.size for d in dims):
        raise ShapeMismatch(f"array shape {array.shape} does not match dims {[d.size for d in dims]}")
    value_type = ValueType.of_dtype(array.dtype) if value_type is None else ValueType(value_type)
    if default is None:
        default = False if value_type is ValueType.BOOLEAN else 0
    default = coerce_value(value_type, default)
    array = array.astype(value_type.dtype, copy=False)
    data = _sparsify(value_type, default, array)
    return TypedTensor._trusted(name, dims, value_type, default, data)


def fold(
    m: np.ndarray,
    mode: int,
    dims: Sequence[Dimension],
    *,
    name: str = "folded",
    value_type=None,
    default=None,
) -> TypedTensor:
    """Inverse of :meth:`TypedTensor.unfold` for 1-based ``mode``."""
    m = np.asarray(m)
    dims = _check_dims(dims)
    shape = tuple(d.size for d in dims)
    if isinstance(mode, bool) or not isinstance(mode, numbers.Integral) or not 1 <= mode <= len(dims):
        raise ModeOutOfRange(f"mode {mode!r} outside 1..{len(dims)}")
    n = mode - 1
    cols = math.prod(s for k, s in enumerate(shape) if k != n)
    if m.ndim != 2 or m.shape != (shape[n], cols):
        raise ShapeMismatch(f"matrix shape {m.shape} incompatible with mode {mode} of {shape}")
    return from_dense(name, dims, fold_array(m, n, shape), value_type=value_type, default=default)


def fold_array(m: np.ndarray, n: int, shape: Sequence[int]) -> np.ndarray:
    """Dense inverse of the mode-``n`` (0-based) unfolding."""
    rest = [k for k in range(len(shape)) if k != n]
    # columns are Fortran-ordered over the remaining modes
    arr = m.reshape([shape[n]] + [shape[k] for k in reversed(rest)])
    arr = np.transpose(arr, [0] + list(range(len(rest), 0, -1)))
    return np.moveaxis(arr, 0, n)


def unfold_array(a: np.ndarray, n: int) -> np.ndarray:
    """Dense mode-``n`` (0-based) unfolding with the same column order as :meth:`TypedTensor.unfold`."""
    return np.moveaxis(a, n, 0).reshape(a.shape[n], -1, order="F")


def frobenius_norm(t: TypedTensor) -> float:
    """Square root of the sum of squares over all coordinates."""
    if not t.value_type.numeric:
        raise NonNumericValueType("frobenius_norm requires a numeric tensor")
    _, vals = t.coo()
    total = float(np.dot(vals.astype(np.float64), vals.astype(np.float64)))
    if t.default != 0:
        size = math.prod(t.shape)
        total += (size - t.nnz) * float(t.default) ** 2
    return math.sqrt(total)


# COO text format -----------------------------------------------------------


def _format_value(value_type: ValueType, v) -> str:
    if value_type is ValueType.REAL:
        return repr(float(v))
    if value_type is ValueType.BOOLEAN:
        return "1" if v else "0"
    return str(int(v))


def _parse_value(value_type: ValueType, text: str):
    if value_type is ValueType.REAL:
        return float(text)
    if value_type is ValueType.BOOLEAN:
        if text not in ("0", "1"):
            raise TypeMismatch(f"boolean values must be 0 or 1, got {text!r}")
        return text == "1"
    return int(text)


def write_coo(t: TypedTensor, dest: str | os.PathLike | io.TextIOBase) -> None:
    """Write ``t`` in the COO text format.

    Line 1: ``# tensor <name> order <N> dims <name1:size1> ...``.
    Line 2: ``# value_type <type> default <value>``.
    Then one tab-separated ``i1 ... iN value`` line per stored entry (1-based).
    """
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w", encoding="utf-8", newline="\n") as fh:
            write_coo(t, fh)
        return
    for label in (t.name, *t.dim_names):
        if not label or any(ch.isspace() for ch in label):
            raise ValueError(f"names written to COO must be non-empty without whitespace: {label!r}")
    dims = " ".join(f"{d.name}:{d.size}" for d in t.dims)
    dest.write(f"# tensor {t.name} order {t.order} dims {dims}".rstrip() + "\n")
    dest.write(f"# value_type {t.value_type.value} default {_format_value(t.value_type, t.default)}\n")
    for idx, v in t.entries():
        dest.write("\t".join([*map(str, idx), _format_value(t.value_type, v)]) + "\n")


def read_coo(
    src: str | os.PathLike | io.TextIOBase,
    dims: Sequence[Dimension] | None = None,
) -> TypedTensor:
    """Inverse of :func:`write_coo`.

    Without ``dims`` each mode gets an integer dimension with keys ``1..size``.
    A missing ``value_type`` line means integer values with default 0, or real
    values if any value is not an integer literal.
    """
    if isinstance(src, (str, os.PathLike)):
        with open(src, encoding="utf-8") as fh:
            return read_coo(fh, dims)
    header = src.readline().split()
    if len(header) < 5 or header[:2] != ["#", "tensor"] or header[3] != "order":
        raise ValueError(f"bad COO header: {' '.join(header)!r}")
    name, order = header[2], int(header[4])
    specs = header[6:] if len(header) > 5 and header[5] == "dims" else []
    if len(specs) != order:
        raise ValueError(f"header declares order {order} but {len(specs)} dims")
    names, sizes = [], []
    for s in specs:
        dname, _, size = s.rpartition(":")
        names.append(dname)
        sizes.append(int(size))
    if dims is None:
        dims = [index_dimension(dn, sz) for dn, sz in zip(names, sizes)]
    else:
        dims = list(dims)
        if [d.size for d in dims] != sizes or [d.name for d in dims] != names:
            raise ShapeMismatch("supplied dimensions disagree with COO header")
    value_type = None
    default_text = None
    rows = []
    for line in src:
        line = line.rstrip("\n")
        if not line:
            continue
        if line.startswith("#"):
            parts = line.split()
            if len(parts) == 5 and parts[1] == "value_type" and parts[3] == "default":
                value_type, default_text = ValueType(parts[2]), parts[4]
            continue
        fields = line.split("\t")
        if len(fields) != order + 1:
            raise ShapeMismatch(f"COO line has {len(fields)} fields, expected {order + 1}")
        rows.append(fields)
    if value_type is None:
        value_type = ValueType.INTEGER
        if any(not f[-1].lstrip("-").isdigit() for f in rows):
            value_type = ValueType.REAL
        default_text = "0"
    default = _parse_value(value_type, default_text)
    data = {}
    for fields in rows:
        coord = tuple(int(x) - 1 for x in fields[:-1])
        data[coord] = _parse_value(value_type, fields[-1])
    return TypedTensor(name, dims, value_type, default, data)
