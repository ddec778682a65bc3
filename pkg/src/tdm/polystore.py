"""Source adapters and the tensor builder.

Every adapter answers the same small declarative query language and returns
plain tuples.  A *dimension* query yields one key per row; a *values* query
yields ``N + 1`` columns: ``N`` dimension keys followed by the value.
Dimensions are always materialized before the values query runs.

Query language (a JSON object)::

    {"explode": "entities.hashtags",            # optional, one record per list item
     "where": {"lang": "fr", "retweets": {">=": 1000}},
     "select": ["user", "tweet", "day", "n"],   # or:
     "group_by": ["user", "tweet", "day"],
     "aggregate": {"op": "count"},              # count | sum | min | max (+ "field")
     "having": {">=": 2}}

Field paths are dot separated; integer components index into lists.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import numbers
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, NamedTuple, Sequence

from .dimension import NULL, Dimension, KeyType
from .errors import (
    AdapterFailure,
    ArityMismatch,
    ConfigInvalid,
    DuplicateAdapterId,
    KeyNotFound,
    MergeConflict,
    SchemaError,
    TypeMismatch,
)
from .tensor import TypedTensor, ValueType, coerce_value

__all__ = [
    "AdapterRow",
    "SourceBinding",
    "DimensionSpec",
    "TensorEntry",
    "TensorSchema",
    "Adapter",
    "CsvAdapter",
    "JsonLinesAdapter",
    "MemTableAdapter",
    "Polystore",
    "evaluate_query",
    "load_schema",
]

logger = logging.getLogger(__name__)


class AdapterRow(NamedTuple):
    keys: tuple
    value: Any


@dataclass(frozen=True)
class SourceBinding:
    adapter_id: str
    native_query: Mapping[str, Any]
    role: str = "values"  # "values" or "dimension"
    dim_name: str | None = None


@dataclass(frozen=True)
class DimensionSpec:
    name: str
    key_type: KeyType
    binding: SourceBinding | None = None
    granularity: int | None = None
    alias: str | None = None
    null: bool = False
    unknown: str = "strict"  # strict | extend | null


@dataclass(frozen=True)
class TensorEntry:
    name: str
    dimensions: tuple[DimensionSpec, ...]
    value_type: ValueType
    default: Any
    values: SourceBinding
    merge: str = "sum"  # sum | count | last | error


# query evaluation ------------------------------------------------------------------

_MISSING = object()
_QUERY_KEYS = {"explode", "where", "select", "group_by", "aggregate", "having"}
_OPS = {"=", "==", "!=", ">", ">=", "<", "<=", "in"}


def get_path(record: Any, path: str) -> Any:
    cur = record
    for part in str(path).split("."):
        if isinstance(cur, Mapping):
            cur = cur.get(part, _MISSING)
        elif isinstance(cur, (list, tuple)) and part.lstrip("-").isdigit():
            i = int(part)
            cur = cur[i] if -len(cur) <= i < len(cur) else _MISSING
        else:
            cur = _MISSING
        if cur is _MISSING:
            return None
    return cur


def _set_path(record: Any, path: str, value: Any) -> Any:
    """Copy of ``record`` with the value at ``path`` replaced (dict paths only)."""
    head, _, rest = path.partition(".")
    out = dict(record)
    out[head] = value if not rest else _set_path(record.get(head) or {}, rest, value)
    return out


def _as_number(x):
    if isinstance(x, bool) or x is None:
        return None
    if isinstance(x, numbers.Real):
        return x
    try:
        text = str(x).strip()
        return int(text) if text.lstrip("-").isdigit() else float(text)
    except ValueError:
        return None


def _compare(x, op: str, operand) -> bool:
    if op == "in":
        return any(_compare(x, "=", o) for o in operand)
    if isinstance(operand, bool) or operand is None:
        a, b = x, operand
        if isinstance(a, str) and isinstance(b, bool):
            a = a.strip().lower() in ("true", "1", "yes")
    elif isinstance(operand, numbers.Real):
        a, b = _as_number(x), operand
        if a is None:
            return False
    else:
        if x is None:
            return False
        a, b = str(x), str(operand)
    if op in ("=", "=="):
        return a == b
    if op == "!=":
        return a != b
    try:
        return {">": a > b, ">=": a >= b, "<": a < b, "<=": a <= b}[op]
    except TypeError:
        return False


def _matches(record, where: Mapping[str, Any]) -> bool:
    for path, cond in where.items():
        x = get_path(record, path)
        if isinstance(cond, Mapping):
            if not all(_compare(x, op, v) for op, v in cond.items()):
                return False
        elif isinstance(cond, list):
            if not _compare(x, "in", cond):
                return False
        elif not _compare(x, "=", cond):
            return False
    return True


def _check_query(query: Mapping[str, Any]) -> None:
    if not isinstance(query, Mapping):
        raise ConfigInvalid("a native query must be a JSON object")
    unknown = set(query) - _QUERY_KEYS
    if unknown:
        raise ConfigInvalid(f"unknown query keys: {sorted(unknown)}")
    if ("select" in query) == ("group_by" in query):
        raise ConfigInvalid("a query needs exactly one of 'select' or 'group_by'")
    if "group_by" in query:
        agg = query.get("aggregate", {"op": "count"})
        if agg.get("op") not in ("count", "sum", "min", "max"):
            raise ConfigInvalid(f"unsupported aggregate {agg!r}")
        if agg["op"] != "count" and "field" not in agg:
            raise ConfigInvalid(f"aggregate {agg['op']!r} needs a 'field'")
    for cond in query.get("where", {}).values():
        if isinstance(cond, Mapping) and set(cond) - _OPS:
            raise ConfigInvalid(f"unsupported where operators: {sorted(set(cond) - _OPS)}")
    if "having" in query and "group_by" not in query:
        raise ConfigInvalid("'having' needs 'group_by'")


def evaluate_query(records: Iterable[Any], query: Mapping[str, Any]) -> list[tuple]:
    """Run the declarative query over raw records; groups keep first-seen order."""
    _check_query(query)
    explode = query.get("explode")
    where = query.get("where", {})

    def stream():
        for rec in records:
            if explode:
                items = get_path(rec, explode)
                if not isinstance(items, list):
                    continue
                for item in items:
                    yield _set_path(rec, explode, item)
            else:
                yield rec

    matching = (r for r in stream() if _matches(r, where))
    if "select" in query:
        fields = list(query["select"])
        return [tuple(get_path(r, f) for f in fields) for r in matching]

    fields = list(query["group_by"])
    agg = query.get("aggregate", {"op": "count"})
    op = agg["op"]
    groups: dict[tuple, list] = {}
    for r in matching:
        key = tuple(get_path(r, f) for f in fields)
        key = tuple(json.dumps(k, sort_keys=True) if isinstance(k, (dict, list)) else k for k in key)
        if op == "count":
            groups.setdefault(key, []).append(1)
        else:
            v = _as_number(get_path(r, agg["field"]))
            if v is None:
                continue
            groups.setdefault(key, []).append(v)
    out = []
    for key, vs in groups.items():
        if op == "count":
            value = len(vs)
        elif op == "sum":
            value = sum(vs) if all(isinstance(v, int) for v in vs) else math.fsum(vs)
        else:
            value = min(vs) if op == "min" else max(vs)
        having = query.get("having")
        if having and not all(_compare(value, o, v) for o, v in having.items()):
            continue
        out.append(key + (value,))
    return out


# adapters ---------------------------------------------------------------------------


class Adapter:
    """Common wrapper surface: stream raw records, answer native queries."""

    kind = "abstract"

    def __init__(self, adapter_id: str):
        self.adapter_id = adapter_id

    def records(self) -> Iterator[Any]:
        raise NotImplementedError

    def run(self, query: Mapping[str, Any]) -> list[tuple]:
        try:
            return evaluate_query(self.records(), query)
        except (ConfigInvalid, AdapterFailure):
            raise
        except (OSError, ValueError, UnicodeDecodeError) as exc:
            raise AdapterFailure(f"adapter {self.adapter_id!r}: {exc}") from exc

    def __repr__(self):
        return f"{type(self).__name__}({self.adapter_id!r})"


def _require_path(config: Mapping[str, Any], base_dir: Path | None) -> Path:
    if "path" not in config:
        raise ConfigInvalid("adapter config needs a 'path'")
    p = Path(config["path"])
    return p if p.is_absolute() or base_dir is None else base_dir / p


def _reject_unknown(config: Mapping[str, Any], allowed: set[str], kind: str) -> None:
    extra = set(config) - allowed
    if extra:
        raise ConfigInvalid(f"unknown {kind} config keys: {sorted(extra)}")


class CsvAdapter(Adapter):
    """Delimited text source.  Empty fields read as missing values."""

    kind = "csv"

    def __init__(self, adapter_id, config, base_dir=None):
        super().__init__(adapter_id)
        _reject_unknown(config, {"path", "delimiter", "header", "columns", "encoding", "null_values"}, "csv")
        self.path = _require_path(config, base_dir)
        self.delimiter = config.get("delimiter", ",")
        if not isinstance(self.delimiter, str) or len(self.delimiter) != 1:
            raise ConfigInvalid("csv delimiter must be a single character")
        self.header = bool(config.get("header", True))
        self.columns = config.get("columns")
        self.encoding = config.get("encoding", "utf-8")
        self.null_values = set(config.get("null_values", [""]))

    def records(self):
        try:
            fh = open(self.path, newline="", encoding=self.encoding)
        except OSError as exc:
            raise AdapterFailure(f"adapter {self.adapter_id!r}: cannot open {self.path}: {exc}") from exc
        with fh:
            reader = csv.reader(fh, delimiter=self.delimiter)
            names = self.columns
            if self.header:
                head = next(reader, None)
                if head is None:
                    return
                names = names or head
            for lineno, row in enumerate(reader, start=2 if self.header else 1):
                if not row:
                    continue
                cols = names or [str(i) for i in range(len(row))]
                if len(row) != len(cols):
                    raise AdapterFailure(
                        f"{self.path}:{lineno}: expected {len(cols)} fields, got {len(row)}"
                    )
                yield {c: (None if v in self.null_values else v) for c, v in zip(cols, row)}


class JsonLinesAdapter(Adapter):
    """One JSON object per line."""

    kind = "jsonlines"

    def __init__(self, adapter_id, config, base_dir=None):
        super().__init__(adapter_id)
        _reject_unknown(config, {"path", "encoding"}, "jsonlines")
        self.path = _require_path(config, base_dir)
        self.encoding = config.get("encoding", "utf-8")

    def records(self):
        try:
            fh = open(self.path, encoding=self.encoding)
        except OSError as exc:
            raise AdapterFailure(f"adapter {self.adapter_id!r}: cannot open {self.path}: {exc}") from exc
        with fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    yield json.loads(line)
                except json.JSONDecodeError as exc:
                    raise AdapterFailure(f"{self.path}:{lineno}: invalid JSON ({exc.msg})") from exc


class MemTableAdapter(Adapter):
    """In-process rows: a list of mappings, or lists with a ``columns`` header."""

    kind = "memtable"

    def __init__(self, adapter_id, config, base_dir=None):
        super().__init__(adapter_id)
        _reject_unknown(config, {"rows", "columns"}, "memtable")
        rows = config.get("rows")
        if not isinstance(rows, list):
            raise ConfigInvalid("memtable config needs a 'rows' list")
        columns = config.get("columns")
        if columns is not None:
            rows = [dict(zip(columns, r)) for r in rows]
        elif any(not isinstance(r, Mapping) for r in rows):
            raise ConfigInvalid("memtable rows must be mappings unless 'columns' is given")
        self.rows = rows

    def records(self):
        return iter(self.rows)


ADAPTER_KINDS = {cls.kind: cls for cls in (CsvAdapter, JsonLinesAdapter, MemTableAdapter)}


# schema ----------------------------------------------------------------------------


@dataclass
class TensorSchema:
    """Tensor signatures plus the adapters and pipelines they refer to."""

    adapters: list[dict] = field(default_factory=list)
    dimensions: dict[str, DimensionSpec] = field(default_factory=dict)
    entries: dict[str, TensorEntry] = field(default_factory=dict)
    pipelines: dict[str, dict] = field(default_factory=dict)
    base_dir: Path | None = None

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: str | os.PathLike | None = None) -> TensorSchema:
        try:
            return _parse_schema(data, Path(base_dir) if base_dir is not None else None)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, SchemaError):
                raise
            raise SchemaError(f"invalid schema: {exc}") from exc

    def polystore(self) -> Polystore:
        store = Polystore()
        for a in self.adapters:
            store.register_adapter(a["id"], a["kind"], a.get("config", {}), base_dir=self.base_dir)
        return store


def _binding(raw: Mapping[str, Any], role: str, dim_name: str | None = None) -> SourceBinding:
    if not isinstance(raw, Mapping) or "adapter" not in raw or "query" not in raw:
        raise SchemaError(f"binding needs 'adapter' and 'query': {raw!r}")
    _check_query(raw["query"])
    return SourceBinding(raw["adapter"], raw["query"], role, dim_name)


def _parse_dimension(raw: Mapping[str, Any]) -> DimensionSpec:
    name = raw["name"]
    unknown = raw.get("unknown", "strict")
    if unknown not in ("strict", "extend", "null"):
        raise SchemaError(f"dimension {name!r}: unknown-key policy must be strict, extend or null")
    binding = raw.get("binding")
    if binding is None and unknown != "extend":
        raise SchemaError(f"dimension {name!r} needs a binding unless its unknown policy is 'extend'")
    key_type = KeyType(raw.get("key_type", "string"))
    granularity = raw.get("granularity")
    if isinstance(granularity, str):
        granularity = {"second": 1, "minute": 60, "hour": 3600, "day": 86400}[granularity]
    return DimensionSpec(
        name=name,
        key_type=key_type,
        binding=None if binding is None else _binding(binding, "dimension", name),
        granularity=granularity,
        alias=raw.get("alias"),
        null=bool(raw.get("null", False)) or unknown == "null",
        unknown=unknown,
    )


def _parse_schema(data: Mapping[str, Any], base_dir: Path | None) -> TensorSchema:
    schema = TensorSchema(base_dir=base_dir)
    ids = set()
    for a in data.get("adapters", []):
        if a["id"] in ids:
            raise SchemaError(f"duplicate adapter id {a['id']!r}")
        if a["kind"] not in ADAPTER_KINDS:
            raise SchemaError(f"unknown adapter kind {a['kind']!r}")
        ids.add(a["id"])
        schema.adapters.append(dict(a))
    for raw in data.get("dimensions", []):
        spec = _parse_dimension(raw)
        if spec.name in schema.dimensions:
            raise SchemaError(f"duplicate dimension {spec.name!r}")
        schema.dimensions[spec.name] = spec
    for raw in data.get("tensors", []):
        name = raw["name"]
        if name in schema.entries:
            raise SchemaError(f"duplicate tensor {name!r}")
        dims = []
        for d in raw["dimensions"]:
            if isinstance(d, Mapping):
                dims.append(_parse_dimension(d))
            elif d in schema.dimensions:
                dims.append(schema.dimensions[d])
            else:
                raise SchemaError(f"tensor {name!r} refers to undeclared dimension {d!r}")
        if len({d.name for d in dims}) != len(dims):
            raise SchemaError(f"tensor {name!r} binds a dimension twice")
        value_type = ValueType(raw.get("value_type", "integer"))
        default = raw.get("default", False if value_type is ValueType.BOOLEAN else 0)
        merge = raw.get("merge", "sum")
        if merge not in ("sum", "count", "last", "error"):
            raise SchemaError(f"tensor {name!r}: merge policy must be sum, count, last or error")
        values = _binding(raw["values"], "values")
        for b in [values] + [d.binding for d in dims if d.binding]:
            if b.adapter_id not in ids:
                raise SchemaError(f"tensor {name!r} uses unregistered adapter {b.adapter_id!r}")
        schema.entries[name] = TensorEntry(
            name, tuple(dims), value_type, coerce_value(value_type, default), values, merge
        )
    for raw in data.get("pipelines", []):
        if raw["name"] in schema.pipelines:
            raise SchemaError(f"duplicate pipeline {raw['name']!r}")
        if raw.get("tensor") not in schema.entries:
            raise SchemaError(f"pipeline {raw['name']!r} refers to unknown tensor {raw.get('tensor')!r}")
        schema.pipelines[raw["name"]] = dict(raw)
    return schema


def load_schema(path: str | os.PathLike) -> TensorSchema:
    """Read a JSON schema file; relative adapter paths resolve against its directory."""
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise SchemaError(f"cannot read schema {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema {path} is not valid JSON: {exc}") from exc
    return TensorSchema.from_dict(data, path.parent)


# building ---------------------------------------------------------------------------


class _GrowingDimension:
    """Single-writer dimension accumulator used during one build."""

    def __init__(self, dim: Dimension, policy: str):
        self.proto = dim
        self.keys = list(dim.keys)
        self.index = {k: i for i, k in enumerate(self.keys)}
        self.policy = policy

    def resolve(self, raw) -> int:
        key = self.proto.parse_key(raw)
        i = self.index.get(key)
        if i is not None:
            return i
        if key is not NULL and self.policy == "extend":
            self.keys.append(key)
            self.index[key] = len(self.keys) - 1
            return len(self.keys) - 1
        if self.policy == "null" and NULL in self.index:
            return self.index[NULL]
        raise KeyNotFound(f"key {raw!r} not found in dimension {self.proto.name!r}")

    def freeze(self) -> Dimension:
        if len(self.keys) == self.proto.size:
            return self.proto
        d = Dimension(
            self.proto.name,
            self.proto.key_type,
            granularity=self.proto.granularity,
            alias=self.proto.alias,
        )
        for k in self.keys:
            d._append(k)
        return d


def _parse_value(value_type: ValueType, raw):
    if value_type is ValueType.BOOLEAN:
        if isinstance(raw, str):
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise TypeMismatch(f"cannot parse {raw!r} as boolean")
        if isinstance(raw, numbers.Integral) and raw in (0, 1):
            return bool(raw)
        return coerce_value(value_type, raw)
    num = _as_number(raw) if isinstance(raw, str) else raw
    if num is None:
        raise TypeMismatch(f"cannot parse {raw!r} as {value_type.value}")
    if value_type is ValueType.INTEGER and isinstance(num, float) and num.is_integer():
        num = int(num)
    return coerce_value(value_type, num)


def _merge(policy: str, value_type: ValueType, values: list, coord):
    if len(values) == 1 and policy != "count":
        return values[0]
    if policy == "error":
        raise MergeConflict(f"duplicate coordinate {coord} under the 'error' merge policy")
    if policy == "last":
        return values[-1]
    if policy == "count":
        return coerce_value(value_type, len(values)) if value_type.numeric else True
    if not value_type.numeric:
        raise MergeConflict(f"cannot sum duplicate boolean values at {coord}")
    if value_type is ValueType.REAL:
        return math.fsum(values)
    return sum(values)


class Polystore:
    """Registry of adapters plus the dimension-first tensor builder."""

    def __init__(self):
        self.adapters: dict[str, Adapter] = {}

    def register_adapter(self, adapter_id: str, kind: str, config: Mapping[str, Any], base_dir=None) -> Adapter:
        """Create and register an adapter of ``kind`` (csv, jsonlines or memtable)."""
        if adapter_id in self.adapters:
            raise DuplicateAdapterId(f"adapter id {adapter_id!r} already registered")
        if kind not in ADAPTER_KINDS:
            raise ConfigInvalid(f"unknown adapter kind {kind!r}")
        if not isinstance(config, Mapping):
            raise ConfigInvalid("adapter config must be a mapping")
        base = Path(base_dir) if base_dir is not None else None
        adapter = ADAPTER_KINDS[kind](adapter_id, config, base)
        self.adapters[adapter_id] = adapter
        return adapter

    def _adapter(self, binding: SourceBinding) -> Adapter:
        try:
            return self.adapters[binding.adapter_id]
        except KeyError:
            raise AdapterFailure(f"no adapter registered under {binding.adapter_id!r}") from None

    def run_dimension_query(self, spec: DimensionSpec) -> Dimension:
        """Materialize one dimension: distinct keys in first-seen order."""
        dim = Dimension(spec.name, spec.key_type, granularity=spec.granularity, alias=spec.alias)
        if spec.binding is not None:
            rows = self._adapter(spec.binding).run(spec.binding.native_query)
            for row in rows:
                if len(row) != 1:
                    raise ArityMismatch(f"dimension query for {spec.name!r} returned {len(row)} columns")
                key = dim.parse_key(row[0])
                if key is NULL and not spec.null:
                    continue
                if key not in dim._index:
                    dim._append(key)
        if spec.null and not dim.has_null:
            dim = dim.with_null()
        return dim

    def run_value_query(self, binding: SourceBinding, dims: Sequence[Dimension]) -> Iterator[AdapterRow]:
        """Stream ``N + 1``-column rows; arity is checked on every row."""
        arity = len(dims) + 1
        for row in self._adapter(binding).run(binding.native_query):
            if len(row) != arity:
                raise ArityMismatch(f"values query returned {len(row)} columns, expected {arity}")
            yield AdapterRow(tuple(row[:-1]), row[-1])

    def build_tensor(self, entry: TensorEntry) -> TypedTensor:
        """Materialize dimensions, then resolve and merge the values rows."""
        dims = [self.run_dimension_query(spec) for spec in entry.dimensions]
        growing = [_GrowingDimension(d, s.unknown) for d, s in zip(dims, entry.dimensions)]
        cells: dict[tuple, list] = {}
        count = 0
        for row in self.run_value_query(entry.values, dims):
            coord = tuple(g.resolve(k) for g, k in zip(growing, row.keys))
            value = 1 if entry.merge == "count" else _parse_value(entry.value_type, row.value)
            cells.setdefault(coord, []).append(value)
            count += 1
        logger.info("tensor %s: %d rows into %d cells", entry.name, count, len(cells))
        default = entry.default
        data = {}
        for coord, values in cells.items():
            v = _merge(entry.merge, entry.value_type, values, coord)
            if v != default:
                data[coord] = v
        final_dims = [g.freeze() for g in growing]
        return TypedTensor._trusted(entry.name, final_dims, entry.value_type, default, data)
