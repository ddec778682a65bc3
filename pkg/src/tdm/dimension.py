"""Named typed associative arrays used as tensor dimensions.

A :class:`Dimension` is a bijection between a set of typed keys and the
contiguous indices ``1..size`` (insertion order).  Dimensions are immutable;
:meth:`Dimension.extend` and :meth:`Dimension.with_null` return new values.
"""

from __future__ import annotations

import csv
import io
import math
import numbers
import os
from datetime import date, datetime, timezone
from enum import Enum
from typing import Any, Iterable, Iterator, Sequence

from .errors import (
    DuplicateKey,
    IndexOutOfRange,
    KeyNotFound,
    NullAlreadyPresent,
    TypeMismatch,
)

__all__ = [
    "NULL",
    "KeyType",
    "Dimension",
    "create_dimension",
    "parse_timestamp",
    "format_timestamp",
    "HOUR",
    "DAY",
]

HOUR = 3600
DAY = 86400

NULL_TEXT = "\\N"


class _Null:
    """Out-of-band null key.  Compares equal only to itself."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "⊥"

    __str__ = __repr__

    def __reduce__(self):
        return (_Null, ())

    def __hash__(self):
        return hash("tdm.NULL")

    def __bool__(self):
        return False


NULL = _Null()


class KeyType(str, Enum):
    STRING = "string"
    INTEGER = "integer"
    REAL = "real"
    TIMESTAMP = "timestamp"


_TIMESTAMP_FORMATS = (
    "%y-%m-%d",
    "%y-%m-%d %H:%M",
    "%y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    "%a %b %d %H:%M:%S %z %Y",  # Twitter created_at
)


def parse_timestamp(value: Any) -> int:
    """Convert ``value`` to integer epoch seconds (UTC).

    Accepts :class:`datetime` (naive values are taken as UTC), :class:`date`,
    numbers (already epoch seconds) and strings in ISO 8601, ``YY-MM-DD``
    (optionally followed by a time) or Twitter's ``created_at`` layout.
    """
    if isinstance(value, bool):
        raise TypeMismatch(f"boolean {value!r} is not a timestamp")
    if isinstance(value, datetime):
        if value.tzinfo is None:
            value = value.replace(tzinfo=timezone.utc)
        return math.floor(value.timestamp())
    if isinstance(value, date):
        return parse_timestamp(datetime(value.year, value.month, value.day))
    if isinstance(value, numbers.Real):
        if not math.isfinite(value):
            raise TypeMismatch(f"{value!r} is not a timestamp")
        return math.floor(value)
    if isinstance(value, str):
        text = value.strip()
        if text.lstrip("-").isdigit():
            return int(text)
        iso = text[:-1] + "+00:00" if text.endswith("Z") else text
        try:
            return parse_timestamp(datetime.fromisoformat(iso))
        except ValueError:
            pass
        for fmt in _TIMESTAMP_FORMATS:
            try:
                return parse_timestamp(datetime.strptime(text, fmt))
            except ValueError:
                continue
    raise TypeMismatch(f"cannot interpret {value!r} as a timestamp")


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _normalize(key_type: KeyType, granularity: int, key: Any) -> Any:
    """Strict normalization of an in-process key value to its storage form."""
    if key is NULL:
        return NULL
    if key_type is KeyType.STRING:
        if not isinstance(key, str):
            raise TypeMismatch(f"expected a string key, got {key!r}")
        return key
    if key_type is KeyType.INTEGER:
        if isinstance(key, bool) or not isinstance(key, numbers.Integral):
            raise TypeMismatch(f"expected an integer key, got {key!r}")
        return int(key)
    if key_type is KeyType.REAL:
        if isinstance(key, bool) or not isinstance(key, numbers.Real):
            raise TypeMismatch(f"expected a real key, got {key!r}")
        return float(key)
    epoch = parse_timestamp(key)
    return epoch - epoch % granularity


def _parse_text(key_type: KeyType, granularity: int, text: Any) -> Any:
    """Lenient conversion of source data (usually text) to a key."""
    if text is None or text is NULL or text == NULL_TEXT:
        return NULL
    if key_type is KeyType.STRING:
        return text if isinstance(text, str) else str(text)
    if isinstance(text, str):
        try:
            if key_type is KeyType.INTEGER:
                return int(text.strip())
            if key_type is KeyType.REAL:
                return float(text.strip())
        except ValueError:
            raise TypeMismatch(f"cannot parse {text!r} as {key_type.value}") from None
    if key_type is KeyType.INTEGER and isinstance(text, float) and text.is_integer():
        text = int(text)
    return _normalize(key_type, granularity, text)


class Dimension:
    """Named typed associative array ``name : K -> {1..size}``.

    Parameters
    ----------
    name : str
        Non-empty dimension name.
    key_type : KeyType or str
        One of ``string``, ``integer``, ``real``, ``timestamp``.
    keys : iterable
        Keys in index order; key ``p`` (0-based) receives index ``p + 1``.
    granularity : int, optional
        Bucket width in seconds for timestamp keys (default one hour).
    alias : str, optional
        Short name usable in queries (``U`` for ``user``).
    """

    __slots__ = ("name", "key_type", "granularity", "alias", "_keys", "_index", "_hash")

    def __init__(
        self,
        name: str,
        key_type: KeyType | str,
        keys: Iterable[Any] = (),
        *,
        granularity: int | None = None,
        alias: str | None = None,
    ):
        if not isinstance(name, str) or not name:
            raise ValueError("dimension name must be a non-empty string")
        key_type = KeyType(key_type)
        if key_type is KeyType.TIMESTAMP:
            granularity = HOUR if granularity is None else int(granularity)
            if granularity <= 0:
                raise ValueError("granularity must be positive")
        elif granularity is not None:
            raise ValueError("granularity only applies to timestamp dimensions")
        self.name = name
        self.key_type = key_type
        self.granularity = granularity
        self.alias = alias
        self._keys: list = []
        self._index: dict = {}
        self._hash = None
        for key in keys:
            self._append(self._normalize(key))

    # construction helpers -------------------------------------------------

    def _normalize(self, key):
        return _normalize(self.key_type, self.granularity, key)

    def _append(self, key):
        if key in self._index:
            raise DuplicateKey(f"key {key!r} already present in dimension {self.name!r}")
        self._keys.append(key)
        self._index[key] = len(self._keys)
        return len(self._keys)

    def _copy(self) -> Dimension:
        new = Dimension.__new__(Dimension)
        new.name = self.name
        new.key_type = self.key_type
        new.granularity = self.granularity
        new.alias = self.alias
        new._keys = list(self._keys)
        new._index = dict(self._index)
        new._hash = None
        return new

    def parse_key(self, raw: Any) -> Any:
        """Convert raw source data (text, numbers, None) into a key of this dimension."""
        return _parse_text(self.key_type, self.granularity, raw)

    def normalize_key(self, key: Any) -> Any:
        return self._normalize(key)

    # lookups --------------------------------------------------------------

    @property
    def size(self) -> int:
        return len(self._keys)

    @property
    def keys(self) -> tuple:
        return tuple(self._keys)

    @property
    def has_null(self) -> bool:
        return NULL in self._index

    def index_of(self, key: Any) -> int:
        """Return the 1-based index of ``key``."""
        try:
            norm = self._normalize(key)
        except TypeMismatch:
            raise KeyNotFound(f"{key!r} is not a key of dimension {self.name!r}") from None
        try:
            return self._index[norm]
        except KeyError:
            raise KeyNotFound(f"{key!r} is not a key of dimension {self.name!r}") from None

    def key_of(self, index: int) -> Any:
        """Return the key stored at 1-based ``index``."""
        if isinstance(index, bool) or not isinstance(index, numbers.Integral):
            raise IndexOutOfRange(f"index must be an integer, got {index!r}")
        if not 1 <= index <= len(self._keys):
            raise IndexOutOfRange(
                f"index {index} outside 1..{len(self._keys)} for dimension {self.name!r}"
            )
        return self._keys[index - 1]

    def extend(self, key: Any) -> tuple[Dimension, int]:
        """Return ``(new_dimension, index)`` with ``key`` appended."""
        new = self._copy()
        return new, new._append(self._normalize(key))

    def with_null(self) -> Dimension:
        if self.has_null:
            raise NullAlreadyPresent(f"dimension {self.name!r} already has a null key")
        new = self._copy()
        new._append(NULL)
        return new

    def renamed(self, name: str, alias: str | None = None) -> Dimension:
        new = self._copy()
        new.name = name
        new.alias = alias
        return new

    def __len__(self):
        return len(self._keys)

    def __iter__(self) -> Iterator:
        return iter(self._keys)

    def __contains__(self, key):
        try:
            return self._normalize(key) in self._index
        except TypeMismatch:
            return False

    def __eq__(self, other):
        if not isinstance(other, Dimension):
            return NotImplemented
        return (
            self.name == other.name
            and self.key_type is other.key_type
            and self.granularity == other.granularity
            and self._keys == other._keys
        )

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.name, self.key_type, self.granularity, tuple(self._keys)))
        return self._hash

    def __repr__(self):
        preview = ", ".join(self.render_key(k) for k in self._keys[:4])
        more = ", ..." if len(self._keys) > 4 else ""
        return f"Dimension({self.name!r}, {self.key_type.value}, [{preview}{more}])"

    # text forms -------------------------------------------------------------

    def render_key(self, key: Any) -> str:
        if key is NULL:
            return NULL_TEXT
        if self.key_type is KeyType.TIMESTAMP:
            return format_timestamp(key)
        if self.key_type is KeyType.REAL:
            return repr(key)
        return str(key)

    def to_csv(self, dest: str | os.PathLike | io.TextIOBase) -> None:
        """Write the two-column ``key,index`` form."""
        if isinstance(dest, (str, os.PathLike)):
            with open(dest, "w", newline="", encoding="utf-8") as fh:
                self.to_csv(fh)
            return
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(["key", "index"])
        for i, key in enumerate(self._keys, start=1):
            writer.writerow([self.render_key(key), i])

    @classmethod
    def from_csv(
        cls,
        src: str | os.PathLike | io.TextIOBase,
        name: str,
        key_type: KeyType | str,
        *,
        granularity: int | None = None,
        alias: str | None = None,
    ) -> Dimension:
        """Inverse of :meth:`to_csv`; validates the index column is ``1..n``."""
        if isinstance(src, (str, os.PathLike)):
            with open(src, newline="", encoding="utf-8") as fh:
                return cls.from_csv(fh, name, key_type, granularity=granularity, alias=alias)
        dim = cls(name, key_type, granularity=granularity, alias=alias)
        reader = csv.reader(src)
        header = next(reader, None)
        if header != ["key", "index"]:
            raise ValueError(f"expected header 'key,index', got {header!r}")
        for expected, row in enumerate(reader, start=1):
            if len(row) != 2:
                raise ValueError(f"malformed dimension row {row!r}")
            if int(row[1]) != expected:
                raise ValueError(f"non-contiguous index {row[1]} (expected {expected})")
            dim._append(dim.parse_key(row[0]))
        return dim


def create_dimension(
    name: str,
    key_type: KeyType | str,
    keys: Sequence[Any] = (),
    *,
    granularity: int | None = None,
    alias: str | None = None,
) -> Dimension:
    """Build a dimension whose ``p``-th key (1-based) maps to index ``p``."""
    return Dimension(name, key_type, keys, granularity=granularity, alias=alias)
