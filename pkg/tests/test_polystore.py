import csv
import json
import math
from collections import Counter, defaultdict

import pytest

from conftest import TOY_DAYS, TOY_POSTS, TOY_TWEETS, TOY_USERS
from tdm.dimension import DAY, NULL, KeyType, create_dimension
from tdm.errors import (
    AdapterFailure,
    ArityMismatch,
    ConfigInvalid,
    DuplicateAdapterId,
    KeyNotFound,
    MergeConflict,
    SchemaError,
    TypeMismatch,
)
from tdm.polystore import (
    AdapterRow,
    DimensionSpec,
    Polystore,
    SourceBinding,
    TensorSchema,
    evaluate_query,
    get_path,
    load_schema,
)
from tdm.tensor import ValueType

COLUMNS = ["user", "tweet", "day", "n"]


def build(schema_dict, name, base_dir=None):
    schema = TensorSchema.from_dict(schema_dict, base_dir)
    return schema.polystore().build_tensor(schema.entries[name])


def posts_schema(adapter, merge="sum", value_query=None, unknown="strict", value_type="integer"):
    """Three dimensions and one tensor, all fed by the single adapter ``src``."""
    dims = []
    for name, kt, field in (("user", "string", "user"), ("tweet", "string", "tweet"), ("time", "timestamp", "day")):
        d = {"name": name, "key_type": kt, "binding": {"adapter": "src", "query": {"select": [field]}}}
        if kt == "timestamp":
            d["granularity"] = "day"
        dims.append(d)
    dims[0]["unknown"] = unknown
    if unknown != "strict":
        dims[0]["binding"]["query"]["where"] = {"user": {"!=": "u3"}}
    return {
        "adapters": [dict(adapter, id="src")],
        "dimensions": dims,
        "tensors": [{
            "name": "x", "dimensions": ["user", "tweet", "time"], "value_type": value_type,
            "merge": merge,
            "values": {"adapter": "src", "query": value_query or {"group_by": ["user", "tweet", "day"],
                                                                  "aggregate": {"op": "sum", "field": "n"}}},
        }],
    }


def write_rows(tmp_path, rows, kind):
    if kind == "csv":
        p = tmp_path / "rows.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            w.writerows(rows)
        return {"kind": "csv", "config": {"path": str(p)}}
    if kind == "jsonlines":
        p = tmp_path / "rows.jsonl"
        p.write_text("".join(json.dumps(dict(zip(COLUMNS, r))) + "\n" for r in rows))
        return {"kind": "jsonlines", "config": {"path": str(p)}}
    return {"kind": "memtable", "config": {"columns": COLUMNS, "rows": [list(r) for r in rows]}}


def random_rows(rng, n=300, real=False):
    rows = []
    for _ in range(n):
        v = round(float(rng.normal()), 6) if real else int(rng.integers(1, 5))
        rows.append((f"u{rng.integers(1, 9)}", f"t{rng.integers(1, 15)}",
                     f"18-03-{rng.integers(1, 10):02d}", v))
    return rows


# toy fixture ---------------------------------------------------------------------


def test_toy_fixture_reproduces_named_arrays(toy_dir):
    schema = load_schema(toy_dir / "schema.json")
    t = schema.polystore().build_tensor(schema.entries["publish"])
    user, tweet, time = t.dims
    assert [user.index_of(u) for u in TOY_USERS] == [1, 2, 3]
    assert list(user.keys) == TOY_USERS and list(tweet.keys) == TOY_TWEETS
    assert [time.index_of(d) for d in TOY_DAYS] == [1, 2, 3, 4]
    assert time.granularity == DAY and user.alias == "U" and time.alias == "T"
    assert t.shape == (3, 8, 4) and t.nnz == len(TOY_POSTS)
    assert t.get_index(3, 1, 1) == 1  # (u3, t1, 18-03-08)
    assert sorted(k for k, _ in t.keyed_entries()) == sorted(
        (u, tw, time.normalize_key(d)) for u, tw, d in TOY_POSTS
    )


def test_toy_csv_and_jsonlines_sources_agree(toy_dir):
    data = json.loads((toy_dir / "schema.json").read_text())
    t1 = build(data, "publish", toy_dir)
    data["adapters"][1] = {"id": "tweets", "kind": "csv", "config": {"path": "tweets.csv"}}
    assert build(data, "publish", toy_dir) == t1


# dimension queries -----------------------------------------------------------------


def test_dimension_dedup_first_seen(tmp_path):
    p = tmp_path / "u.csv"
    p.write_text("user\nu1\nu2\nu3\nu2\n")
    store = Polystore()
    store.register_adapter("u", "csv", {"path": str(p)})
    spec = DimensionSpec("user", KeyType.STRING, SourceBinding("u", {"select": ["user"]}, "dimension", "user"))
    d = store.run_dimension_query(spec)
    assert [d.index_of(k) for k in ("u1", "u2", "u3")] == [1, 2, 3] and d.size == 3


def test_dimension_empty_result(tmp_path):
    p = tmp_path / "u.csv"
    p.write_text("user\n")
    store = Polystore()
    store.register_adapter("u", "csv", {"path": str(p)})
    spec = DimensionSpec("user", KeyType.STRING, SourceBinding("u", {"select": ["user"]}, "dimension"))
    assert store.run_dimension_query(spec).size == 0


def test_dimension_10k_rows_dedup_oracle(tmp_path, rng):
    keys = [f"k{int(i)}" for i in rng.integers(0, 700, size=10_000)]
    p = tmp_path / "k.csv"
    p.write_text("key\n" + "\n".join(keys) + "\n")
    store = Polystore()
    store.register_adapter("k", "csv", {"path": str(p)})
    d = store.run_dimension_query(
        DimensionSpec("k", KeyType.STRING, SourceBinding("k", {"select": ["key"]}, "dimension"))
    )
    assert d == create_dimension("k", "string", list(dict.fromkeys(keys)))


def test_dimension_arity_and_type_errors():
    store = Polystore()
    store.register_adapter("m", "memtable", {"rows": [{"a": 1, "b": 2}, {"a": "x", "b": 3}]})
    with pytest.raises(ArityMismatch):
        store.run_dimension_query(DimensionSpec("a", KeyType.STRING, SourceBinding("m", {"select": ["a", "b"]})))
    with pytest.raises(TypeMismatch):
        store.run_dimension_query(DimensionSpec("a", KeyType.INTEGER, SourceBinding("m", {"select": ["a"]})))


def test_dimension_null_handling():
    store = Polystore()
    store.register_adapter("m", "memtable", {"rows": [{"h": "a"}, {"h": None}, {"h": "b"}]})
    b = SourceBinding("m", {"select": ["h"]})
    plain = store.run_dimension_query(DimensionSpec("h", KeyType.STRING, b))
    assert plain.keys == ("a", "b")
    nullable = store.run_dimension_query(DimensionSpec("h", KeyType.STRING, b, null=True))
    assert nullable.keys == ("a", NULL, "b")


# value queries ---------------------------------------------------------------------


def test_group_by_matches_hash_aggregation(tmp_path, rng):
    rows = random_rows(rng, 2000)
    adapter = write_rows(tmp_path, rows, "csv")
    store = Polystore()
    store.register_adapter("src", adapter["kind"], adapter["config"])
    query = {"group_by": ["user", "tweet", "day"], "aggregate": {"op": "sum", "field": "n"}}
    got = {r.keys: r.value for r in store.run_value_query(SourceBinding("src", query), [None] * 3)}
    oracle = defaultdict(int)
    for u, t, d, n in rows:
        oracle[(u, t, d)] += n
    assert got == dict(oracle)
    counts = store.adapters["src"].run({"group_by": ["user"], "aggregate": {"op": "count"}})
    assert dict((u, c) for u, c in counts) == Counter(r[0] for r in rows)


def test_value_query_arity_checked_per_row():
    store = Polystore()
    store.register_adapter("m", "memtable", {"rows": [{"a": 1}]})
    rows = list(store.run_value_query(SourceBinding("m", {"select": ["a", "a"]}), [None]))
    assert rows == [AdapterRow((1,), 1)]
    with pytest.raises(ArityMismatch):
        list(store.run_value_query(SourceBinding("m", {"select": ["a", "a"]}), [None, None]))


def test_query_features():
    recs = [
        {"u": "a", "tags": ["x", "y"], "rt": 5000, "meta": {"lang": "en"}},
        {"u": "b", "tags": ["x"], "rt": 10, "meta": {"lang": "fr"}},
        {"u": "a", "tags": [], "rt": 3000, "meta": {"lang": "en"}},
        {"u": "c", "rt": 2000},
    ]
    assert get_path(recs[0], "meta.lang") == "en" and get_path(recs[0], "tags.1") == "y"
    assert get_path(recs[3], "meta.lang") is None
    assert evaluate_query(recs, {"explode": "tags", "select": ["u", "tags"]}) == [("a", "x"), ("a", "y"), ("b", "x")]
    assert evaluate_query(recs, {"where": {"rt": {">=": 1000}}, "select": ["u"]}) == [("a",), ("a",), ("c",)]
    assert evaluate_query(recs, {"where": {"meta.lang": ["en", "de"]}, "group_by": ["u"]}) == [("a", 2)]
    assert evaluate_query(recs, {"group_by": ["u"], "aggregate": {"op": "max", "field": "rt"},
                                 "having": {">": 2500}}) == [("a", 5000)]
    assert evaluate_query(recs, {"group_by": ["u"], "aggregate": {"op": "min", "field": "rt"}}) == [
        ("a", 3000), ("b", 10), ("c", 2000)]
    for bad in ({}, {"select": ["u"], "group_by": ["u"]}, {"select": ["u"], "order": 1},
                {"group_by": ["u"], "aggregate": {"op": "mean", "field": "rt"}},
                {"group_by": ["u"], "aggregate": {"op": "sum"}},
                {"select": ["u"], "where": {"rt": {"~": 1}}}, {"select": ["u"], "having": {">": 1}}):
        with pytest.raises(ConfigInvalid):
            evaluate_query(recs, bad)


# building --------------------------------------------------------------------------


def test_empty_values_give_all_default_tensor():
    schema = posts_schema({"kind": "memtable", "config": {"columns": COLUMNS, "rows": []}})
    t = build(schema, "x")
    assert t.nnz == 0 and t.shape == (0, 0, 0)


def test_duplicates_summed_against_oracle():
    rows = [("u1", "t2", "18-03-07", 2), ("u1", "t2", "18-03-07", 3), ("u2", "t1", "18-03-07", 1)]
    adapter = {"kind": "memtable", "config": {"columns": COLUMNS, "rows": rows}}
    t = build(posts_schema(adapter, value_query={"select": ["user", "tweet", "day", "n"]}), "x")
    assert t.get(("u1", "t2", "18-03-07")) == 5
    oracle = defaultdict(int)
    for u, tw, d, n in rows:
        oracle[(u, tw, t.dims[2].normalize_key(d))] += n
    assert dict(t.keyed_entries()) == dict(oracle)


def test_merge_policies():
    rows = [("u1", "t1", "18-03-07", 2), ("u1", "t1", "18-03-07", 3), ("u2", "t1", "18-03-07", 4)]
    adapter = {"kind": "memtable", "config": {"columns": COLUMNS, "rows": rows}}
    q = {"select": ["user", "tweet", "day", "n"]}
    got = {m: build(posts_schema(adapter, merge=m, value_query=q), "x").get_index(1, 1, 1)
           for m in ("sum", "count", "last")}
    assert got == {"sum": 5, "count": 2, "last": 3}
    with pytest.raises(MergeConflict):
        build(posts_schema(adapter, merge="error", value_query=q), "x")
    flags = {"kind": "memtable", "config": {"columns": COLUMNS, "rows": [r[:3] + ("true",) for r in rows]}}
    with pytest.raises(MergeConflict):
        build(posts_schema(flags, value_query=q, value_type="boolean"), "x")
    b = build(posts_schema(flags, merge="last", value_query=q, value_type="boolean"), "x")
    assert b.value_type is ValueType.BOOLEAN and b.nnz == 2


@pytest.mark.parametrize("policy", ["strict", "extend", "null"])
def test_unknown_key_policy_outcomes(policy):
    rows = [("u1", "t1", "18-03-07", 1), ("u3", "t1", "18-03-07", 2)]
    adapter = {"kind": "memtable", "config": {"columns": COLUMNS, "rows": rows}}
    schema = posts_schema(adapter, unknown="extend")  # the user binding filters out u3
    schema["dimensions"][0]["unknown"] = policy
    if policy == "strict":
        with pytest.raises(KeyNotFound):
            build(schema, "x")
        return
    t = build(schema, "x")
    user = t.dims[0]
    if policy == "extend":
        assert user.keys == ("u1", "u3") and t.get(("u3", "t1", "18-03-07")) == 2
    else:
        assert user.keys == ("u1", NULL) and t.get((NULL, "t1", "18-03-07")) == 2


def test_extend_without_binding():
    rows = [("u2", "t1", "18-03-07", 1), ("u1", "t1", "18-03-07", 2)]
    schema = posts_schema({"kind": "memtable", "config": {"columns": COLUMNS, "rows": rows}})
    schema["dimensions"][0] = {"name": "user", "key_type": "string", "unknown": "extend"}
    t = build(schema, "x")
    assert t.dims[0].keys == ("u2", "u1")


@pytest.mark.parametrize("real", [False, True])
def test_cross_adapter_equivalence(tmp_path, rng, real):
    rows = random_rows(rng, 400, real=real)
    vt = "real" if real else "integer"
    tensors = []
    for kind in ("csv", "memtable", "jsonlines"):
        tensors.append(build(posts_schema(write_rows(tmp_path, rows, kind), value_type=vt), "x"))
    assert tensors[0] == tensors[1] == tensors[2]
    assert tensors[0].nnz > 0


@pytest.mark.parametrize("real", [False, True])
def test_build_order_independent(rng, real):
    rows = random_rows(rng, 500, real=real)
    vt = "real" if real else "integer"
    q = {"select": ["user", "tweet", "day", "n"]}
    base = build(posts_schema(write_rows(None, rows, "memtable"), value_query=q, value_type=vt), "x")
    for _ in range(5):
        perm = [rows[i] for i in rng.permutation(len(rows))]
        other = build(posts_schema(write_rows(None, perm, "memtable"), value_query=q, value_type=vt), "x")
        a, b = dict(base.keyed_entries()), dict(other.keyed_entries())
        assert a.keys() == b.keys()
        for k in a:
            if real:
                assert math.isclose(a[k], b[k], rel_tol=1e-12, abs_tol=1e-12)
            else:
                assert a[k] == b[k]


def test_stored_coordinates_resolve_to_source_keys(rng):
    rows = random_rows(rng, 300)
    t = build(posts_schema(write_rows(None, rows, "memtable")), "x")
    source = {(u, tw, d) for u, tw, d, _ in rows}
    time = t.dims[2]
    source = {(u, tw, time.normalize_key(d)) for u, tw, d in source}
    for idx, _ in t.entries():
        key = tuple(d.key_of(i) for d, i in zip(t.dims, idx))
        assert key in source


def test_multi_source_join(tmp_path):
    (tmp_path / "users.csv").write_text("id;name\nu2;bob\nu1;alice\n")
    schema = {
        "adapters": [
            {"id": "users", "kind": "csv", "config": {"path": "users.csv", "delimiter": ";"}},
            {"id": "posts", "kind": "memtable", "config": {"rows": [{"u": "u1", "h": "a"}, {"u": "u2", "h": "a"}]}},
        ],
        "dimensions": [
            {"name": "user", "binding": {"adapter": "users", "query": {"select": ["id"]}}},
            {"name": "tag", "binding": {"adapter": "posts", "query": {"select": ["h"]}}},
        ],
        "tensors": [{"name": "uses", "dimensions": ["user", "tag"],
                     "values": {"adapter": "posts", "query": {"group_by": ["u", "h"]}}}],
    }
    t = build(schema, "uses", tmp_path)
    assert t.dims[0].keys == ("u2", "u1")
    assert dict(t.keyed_entries()) == {("u1", "a"): 1, ("u2", "a"): 1}


# adapters and schema errors ---------------------------------------------------------


def test_register_adapter_errors(tmp_path):
    store = Polystore()
    store.register_adapter("a", "memtable", {"rows": []})
    with pytest.raises(DuplicateAdapterId):
        store.register_adapter("a", "memtable", {"rows": []})
    for kind, config in (("sql", {}), ("csv", {}), ("csv", {"path": "x", "delimiter": ";;"}),
                         ("csv", {"path": "x", "bogus": 1}), ("memtable", {"rows": 3}),
                         ("memtable", {"rows": [[1, 2]]}), ("jsonlines", []), ("jsonlines", {"path": "x", "fields": 1})):
        with pytest.raises(ConfigInvalid):
            store.register_adapter(f"b{len(store.adapters)}", kind, config)


def test_adapter_failures(tmp_path):
    store = Polystore()
    store.register_adapter("missing", "csv", {"path": str(tmp_path / "nope.csv")})
    with pytest.raises(AdapterFailure):
        store.adapters["missing"].run({"select": ["a"]})
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"a": 1}\n{"a": \n')
    store.register_adapter("bad", "jsonlines", {"path": str(bad)})
    with pytest.raises(AdapterFailure, match=":2:"):
        store.adapters["bad"].run({"select": ["a"]})
    ragged = tmp_path / "ragged.csv"
    ragged.write_text("a,b\n1,2\n3\n")
    store.register_adapter("ragged", "csv", {"path": str(ragged)})
    with pytest.raises(AdapterFailure):
        store.adapters["ragged"].run({"select": ["a"]})
    with pytest.raises(AdapterFailure):
        list(store.run_value_query(SourceBinding("nobody", {"select": ["a"]}), []))


def test_csv_without_header(tmp_path):
    p = tmp_path / "h.csv"
    p.write_text("u1\t3\nu2\t\n")
    store = Polystore()
    store.register_adapter("h", "csv", {"path": str(p), "delimiter": "\t", "header": False})
    assert store.adapters["h"].run({"select": ["0", "1"]}) == [("u1", "3"), ("u2", None)]
    store.register_adapter("n", "csv", {"path": str(p), "delimiter": "\t", "header": False, "columns": ["u", "v"]})
    assert store.adapters["n"].run({"select": ["u"]}) == [("u1",), ("u2",)]


def test_schema_errors(tmp_path):
    good = posts_schema({"kind": "memtable", "config": {"rows": []}})
    TensorSchema.from_dict(good)
    mutations = [
        lambda s: s["adapters"].append(dict(s["adapters"][0])),
        lambda s: s["adapters"][0].update(kind="sql"),
        lambda s: s["dimensions"].append(dict(s["dimensions"][0])),
        lambda s: s["tensors"].append(dict(s["tensors"][0])),
        lambda s: s["tensors"][0].update(dimensions=["user", "nope"]),
        lambda s: s["tensors"][0].update(dimensions=["user", "user"]),
        lambda s: s["tensors"][0].update(merge="avg"),
        lambda s: s["tensors"][0]["values"].update(adapter="other"),
        lambda s: s["tensors"][0].update(value_type="complex"),
        lambda s: s["dimensions"][0].update(unknown="ignore"),
        lambda s: s["dimensions"][0].pop("binding"),
        lambda s: s["tensors"][0].pop("values"),
        lambda s: s.update(pipelines=[{"name": "p", "tensor": "y"}]),
    ]
    for mutate in mutations:
        s = json.loads(json.dumps(good))
        mutate(s)
        with pytest.raises((SchemaError, ConfigInvalid)):
            TensorSchema.from_dict(s)
    with pytest.raises(SchemaError):
        load_schema(tmp_path / "none.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(SchemaError):
        load_schema(tmp_path / "broken.json")
