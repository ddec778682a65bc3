"""Manipulation operators: Boolean-mask projection, two-level selection and aggregation.

Selection never compacts dimensions: coordinates that fail a condition fall
back to the tensor default and the dimension maps are left untouched.
"""

from __future__ import annotations

import itertools
import math
import numbers
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Sequence

from .dimension import NULL, Dimension, KeyType
from .errors import (
    DuplicateCondition,
    ModeOutOfRange,
    NonNumericValueType,
    QuerySyntaxError,
    SchemaError,
    ShapeMismatch,
    TypeMismatch,
    UnknownDimension,
)
from .tensor import TypedTensor, ValueType, coerce_value

__all__ = [
    "Eq",
    "In",
    "Ne",
    "Range",
    "ANY",
    "DimCondition",
    "ValueCondition",
    "Reducer",
    "mask_from_conditions",
    "project",
    "select",
    "aggregate",
    "ParsedQuery",
    "parse_query",
    "compile_query",
    "run_query",
]


# predicates -------------------------------------------------------------------


@dataclass(frozen=True)
class Eq:
    value: Any


@dataclass(frozen=True)
class Ne:
    value: Any


@dataclass(frozen=True)
class In:
    values: tuple

    def __init__(self, values):
        object.__setattr__(self, "values", tuple(values))


@dataclass(frozen=True)
class Range:
    """``low <= x <= high`` with optional open ends (``None``) and strict flags."""

    low: Any = None
    high: Any = None
    low_inclusive: bool = True
    high_inclusive: bool = True

    def contains(self, x) -> bool:
        if self.low is not None:
            if x < self.low or (x == self.low and not self.low_inclusive):
                return False
        if self.high is not None:
            if x > self.high or (x == self.high and not self.high_inclusive):
                return False
        return True


class _Any:
    def __repr__(self):
        return "ANY"


ANY = _Any()


@dataclass(frozen=True)
class DimCondition:
    dimension: str
    predicate: Any = ANY


@dataclass(frozen=True)
class ValueCondition:
    predicate: Any = ANY


# dimension masks ---------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, numbers.Real) and not isinstance(v, bool)


def _range_bound(dim: Dimension, bound):
    if bound is None:
        return None
    if dim.key_type in (KeyType.INTEGER, KeyType.REAL):
        if not _is_number(bound):
            raise TypeMismatch(f"range bound {bound!r} is not numeric for {dim.name!r}")
        return bound
    if bound is NULL:
        raise TypeMismatch("the null key has no order")
    return dim.normalize_key(bound)


def _selected_indices(dim: Dimension, predicate) -> set[int] | None:
    """0-based indices of ``dim`` passing ``predicate``; ``None`` means all."""
    if predicate is ANY:
        return None
    if isinstance(predicate, Eq):
        key = dim.normalize_key(predicate.value)
        return {dim.index_of(key) - 1} if key in dim else set()
    if isinstance(predicate, In):
        keys = [dim.normalize_key(v) for v in predicate.values]
        return {dim.index_of(k) - 1 for k in keys if k in dim}
    if isinstance(predicate, Range):
        r = Range(
            _range_bound(dim, predicate.low),
            _range_bound(dim, predicate.high),
            predicate.low_inclusive,
            predicate.high_inclusive,
        )
        return {i for i, k in enumerate(dim) if k is not NULL and r.contains(k)}
    raise TypeMismatch(f"unsupported dimension predicate {predicate!r}")


def _mode_for(t: TypedTensor, name: str) -> int:
    try:
        return t.mode_of(name)
    except ModeOutOfRange:
        raise UnknownDimension(f"tensor {t.name!r} has no dimension {name!r}") from None


def _index_sets(t: TypedTensor, conds: Sequence[DimCondition]) -> list[set[int] | None]:
    sets: list[set[int] | None] = [None] * t.order
    seen = set()
    for cond in conds:
        n = _mode_for(t, cond.dimension)
        if n in seen:
            raise DuplicateCondition(f"more than one condition on dimension {t.dims[n].name!r}")
        seen.add(n)
        sets[n] = _selected_indices(t.dims[n], cond.predicate)
    return sets


def _passes(coord, sets) -> bool:
    return all(s is None or c in s for c, s in zip(coord, sets))


def mask_from_conditions(t: TypedTensor, conds: Sequence[DimCondition]) -> TypedTensor:
    """Boolean tensor shaped like ``t``: 1 where every coordinate meets its condition."""
    sets = _index_sets(t, conds)
    axes = [range(size) if s is None else sorted(s) for s, size in zip(sets, t.shape)]
    data = dict.fromkeys(itertools.product(*axes), True)
    return TypedTensor._trusted(f"{t.name}_mask", t.dims, ValueType.BOOLEAN, False, data)


def project(t: TypedTensor, mask: TypedTensor) -> TypedTensor:
    """Keep entries where ``mask`` is 1; every other coordinate becomes ``t.default``."""
    if mask.value_type is not ValueType.BOOLEAN:
        raise TypeMismatch("project expects a boolean mask")
    if mask.shape != t.shape:
        raise ShapeMismatch(f"mask shape {mask.shape} differs from tensor shape {t.shape}")
    md, mdef = mask._data, mask.default
    data = {c: v for c, v in t._data.items() if md.get(c, mdef)}
    return TypedTensor._trusted(t.name, t.dims, t.value_type, t.default, data)


def _value_operand(t: TypedTensor, v):
    try:
        return coerce_value(t.value_type, v)
    except TypeMismatch:
        if t.value_type is ValueType.INTEGER and _is_number(v):
            return v
        raise


def _value_test(t: TypedTensor, cond):
    pred = cond.predicate if isinstance(cond, ValueCondition) else cond
    if pred is ANY or pred is None:
        return None
    if isinstance(pred, Eq):
        v = _value_operand(t, pred.value)
        return lambda x: x == v
    if isinstance(pred, Ne):
        v = _value_operand(t, pred.value)
        return lambda x: x != v
    if isinstance(pred, Range):
        if t.value_type is ValueType.BOOLEAN:
            raise TypeMismatch("range conditions need a numeric tensor")
        r = Range(
            None if pred.low is None else _value_operand(t, pred.low),
            None if pred.high is None else _value_operand(t, pred.high),
            pred.low_inclusive,
            pred.high_inclusive,
        )
        return r.contains
    raise TypeMismatch(f"unsupported value predicate {pred!r}")


def select(
    t: TypedTensor,
    dim_conds: Sequence[DimCondition] = (),
    val_cond: ValueCondition | Any = ANY,
) -> TypedTensor:
    """Two-level selection ``σ[dim_conds][val_cond] t``.

    An entry survives when its coordinates satisfy every dimension condition
    and its value satisfies ``val_cond``.  Unlike :func:`mask_from_conditions`
    this never materializes the mask.
    """
    sets = _index_sets(t, dim_conds)
    test = _value_test(t, val_cond)
    data = {
        c: v
        for c, v in t._data.items()
        if _passes(c, sets) and (test is None or test(v))
    }
    return TypedTensor._trusted(t.name, t.dims, t.value_type, t.default, data)


# aggregation --------------------------------------------------------------------


class Reducer(str, Enum):
    SUM = "sum"
    COUNT = "count"
    MAX = "max"


def aggregate(t: TypedTensor, collapse_mode: int | str, reducer: Reducer | str = Reducer.SUM) -> TypedTensor:
    """Collapse one mode with ``sum``, ``count`` (stored entries) or ``max``.

    The result has order ``N - 1``; collapsing a vector gives a 0-order tensor.
    Absent coordinates contribute the default to ``sum`` and ``max``.
    """
    reducer = Reducer(reducer)
    n = t.mode_of(collapse_mode)
    if reducer is not Reducer.COUNT and not t.value_type.numeric:
        raise NonNumericValueType(f"{reducer.value} needs a numeric tensor")
    size = t.shape[n]
    groups: dict[tuple, list] = {}
    for c, v in t._data.items():
        groups.setdefault(c[:n] + c[n + 1:], []).append(v)
    dims = t.dims[:n] + t.dims[n + 1:]

    if reducer is Reducer.COUNT:
        value_type, default = ValueType.INTEGER, 0
        data = {k: len(vs) for k, vs in groups.items()}
    elif reducer is Reducer.SUM:
        value_type = t.value_type
        if value_type is ValueType.REAL:
            default = t.default * size
            data = {k: math.fsum(vs + [t.default] * (size - len(vs))) for k, vs in groups.items()}
        else:
            default = t.default * size
            data = {k: sum(vs) + t.default * (size - len(vs)) for k, vs in groups.items()}
    else:
        value_type, default = t.value_type, t.default
        data = {k: max(vs) if len(vs) == size else max(max(vs), t.default) for k, vs in groups.items()}
    default = coerce_value(value_type, default)
    data = {k: v for k, v in data.items() if v != default}
    return TypedTensor._trusted(t.name, dims, value_type, default, data)


# textual queries ------------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<str>'(?:[^'\\]|\\.)*'|"(?:[^"\\]|\\.)*")
  | (?P<num>-?\d+(?:\.\d*)?(?:[eE][-+]?\d+)?)
  | (?P<op>&&|∧|==|!=|>=|<=|=|>|<|\[|\]|\(|\)|,|\*)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.\-]*)
    """,
    re.VERBOSE,
)

_COMPARISONS = {"=", "==", "!=", ">=", "<=", ">", "<"}


@dataclass(frozen=True)
class ParsedQuery:
    """Syntax tree of ``select [dim conds] [value conds] tensor``."""

    dim_terms: tuple  # (identifier, op, operand, position)
    value_terms: tuple  # (op, operand, position)
    tensor: str
    tensor_position: int


def _tokenize(text: str):
    pos = 0
    tokens = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            value = m.group()
            if kind == "str":
                value = re.sub(r"\\(.)", r"\1", value[1:-1])
            elif kind == "num":
                value = float(value) if any(ch in value for ch in ".eE") else int(value)
            elif kind == "ident" and value in ("and", "AND"):
                kind, value = "op", "&&"
            tokens.append((kind, value, m.start()))
        pos = m.end()
    tokens.append(("eof", None, len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def next(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind, value=None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = "end of input" if tok[0] == "eof" else repr(tok[1])
            raise QuerySyntaxError(f"expected {want!r}, found {got}", tok[2])
        return tok

    def literal(self):
        tok = self.next()
        if tok[0] in ("str", "num"):
            return tok[1]
        got = "end of input" if tok[0] == "eof" else repr(tok[1])
        raise QuerySyntaxError(f"expected a literal, found {got}", tok[2])

    def is_any(self):
        tok = self.peek()
        if (tok[0] == "op" and tok[1] == "*") or (tok[0] == "ident" and tok[1] in ("any", "ANY")):
            self.next()
            return True
        return False

    def dim_block(self):
        self.expect("op", "[")
        terms = []
        if not self.is_any() and self.peek()[1] != "]":
            while True:
                _, ident, pos = self.expect("ident")
                tok = self.next()
                if tok[0] == "ident" and tok[1] == "in":
                    self.expect("op", "(")
                    values = [self.literal()]
                    while self.peek()[1] == ",":
                        self.next()
                        values.append(self.literal())
                    self.expect("op", ")")
                    terms.append((ident, "in", tuple(values), pos))
                elif tok[0] == "op" and tok[1] in _COMPARISONS:
                    terms.append((ident, tok[1], self.literal(), pos))
                else:
                    raise QuerySyntaxError(f"expected a comparison after {ident!r}", tok[2])
                if self.peek()[1] in ("&&", "∧"):
                    self.next()
                    continue
                break
        self.expect("op", "]")
        return tuple(terms)

    def value_block(self):
        self.expect("op", "[")
        terms = []
        if not self.is_any() and self.peek()[1] != "]":
            while True:
                tok = self.next()
                if tok[0] != "op" or tok[1] not in _COMPARISONS:
                    raise QuerySyntaxError("expected a value comparison", tok[2])
                terms.append((tok[1], self.literal(), tok[2]))
                if self.peek()[1] in ("&&", "∧"):
                    self.next()
                    continue
                break
        self.expect("op", "]")
        return tuple(terms)

    def query(self) -> ParsedQuery:
        self.expect("ident", "select")
        dims = self.dim_block()
        vals = self.value_block()
        _, name, pos = self.expect("ident")
        self.expect("eof")
        return ParsedQuery(dims, vals, name, pos)


def parse_query(text: str) -> ParsedQuery:
    """Parse ``select [U='u1' && T>='18-02-28'] [=1] publish``.

    Dimension comparisons use ``= == != > >= < <=`` or ``name in (a, b)``,
    joined by ``&&`` (also ``∧`` or ``and``).  ``[]``, ``[*]`` and ``[any]``
    mean no condition.  Raises :class:`QuerySyntaxError` with a position.
    """
    return _Parser(text).query()


def _merge_range(current: Range | None, op: str, bound, position: int) -> Range:
    r = current or Range()
    if op in (">", ">="):
        if r.low is not None:
            raise DuplicateCondition(f"two lower bounds on one dimension (position {position})")
        return Range(bound, r.high, op == ">=", r.high_inclusive)
    if r.high is not None:
        raise DuplicateCondition(f"two upper bounds on one dimension (position {position})")
    return Range(r.low, bound, r.low_inclusive, op == "<=")


def _dim_literal(dim: Dimension, value):
    if dim.key_type is KeyType.STRING:
        return str(value)
    if isinstance(value, str):
        return dim.parse_key(value)
    return value


def compile_query(parsed: ParsedQuery, t: TypedTensor) -> tuple[list[DimCondition], ValueCondition]:
    """Resolve a parsed query against ``t``; raises semantic errors."""
    if parsed.tensor != t.name:
        raise SchemaError(f"query targets tensor {parsed.tensor!r}, loaded tensor is {t.name!r}")
    by_dim: dict[int, Any] = {}
    for ident, op, operand, pos in parsed.dim_terms:
        n = _mode_for(t, ident)
        dim = t.dims[n]
        current = by_dim.get(n)
        if op in ("=", "==", "in", "!="):
            if current is not None:
                raise DuplicateCondition(f"conflicting conditions on {dim.name!r} (position {pos})")
            if op == "in":
                by_dim[n] = In(_dim_literal(dim, v) for v in operand)
            elif op == "!=":
                keep = {_dim_literal(dim, operand)}
                by_dim[n] = In(k for k in dim if k not in keep)
            else:
                by_dim[n] = Eq(_dim_literal(dim, operand))
        else:
            if current is not None and not isinstance(current, Range):
                raise DuplicateCondition(f"conflicting conditions on {dim.name!r} (position {pos})")
            by_dim[n] = _merge_range(current, op, _dim_literal(dim, operand), pos)
    conds = [DimCondition(t.dims[n].name, p) for n, p in sorted(by_dim.items())]

    pred: Any = ANY
    for op, operand, pos in parsed.value_terms:
        if op in ("=", "==", "!="):
            if pred is not ANY:
                raise DuplicateCondition(f"conflicting value conditions (position {pos})")
            if t.value_type is ValueType.BOOLEAN and operand in (0, 1):
                operand = bool(operand)
            pred = Eq(operand) if op != "!=" else Ne(operand)
        else:
            if pred is not ANY and not isinstance(pred, Range):
                raise DuplicateCondition(f"conflicting value conditions (position {pos})")
            pred = _merge_range(None if pred is ANY else pred, op, operand, pos)
    return conds, ValueCondition(pred)


def run_query(t: TypedTensor, text: str) -> TypedTensor:
    """Parse, resolve and evaluate a textual selection on ``t``."""
    conds, vcond = compile_query(parse_query(text), t)
    return select(t, conds, vcond)

