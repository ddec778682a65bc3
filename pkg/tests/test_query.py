import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_sparse, string_dims
from oracles import brute_mask, brute_select, dense_aggregate, random_query_instance
from tdm.algebra import hadamard
from tdm.dimension import Dimension, KeyType
from tdm.errors import (
    DuplicateCondition,
    ModeOutOfRange,
    NonNumericValueType,
    QuerySyntaxError,
    SchemaError,
    ShapeMismatch,
    UnknownDimension,
)
from tdm.query import (
    ANY,
    DimCondition,
    Eq,
    In,
    Range,
    ValueCondition,
    aggregate,
    mask_from_conditions,
    parse_query,
    project,
    run_query,
    select,
)
from tdm.tensor import Index, TypedTensor, ValueType

U1_WINDOW_QUERY = "select [U='u1' && T>='18-02-28' && T<='18-03-08'] [=1] publish"


def test_empty_conditions_give_all_ones_mask(publish):
    m = mask_from_conditions(publish, [])
    assert m.value_type is ValueType.BOOLEAN and m.nnz == math.prod(publish.shape)


def test_user_slice_mask():
    dims = [
        Dimension("user", KeyType.STRING, ["u1", "u2", "u3"]),
        Dimension("hashtag", KeyType.STRING, ["h1", "h2"]),
        Dimension("time", KeyType.INTEGER, [1, 2, 3, 4]),
    ]
    t = TypedTensor("x1", dims, "integer", 0)
    b1 = mask_from_conditions(t, [DimCondition("user", Eq("u2"))])
    dense = b1.to_dense()
    assert dense[1].all() and not dense[0].any() and not dense[2].any()


def test_mask_matches_enumeration_3x4x5(rng):
    t, _ = random_sparse(rng, (3, 4, 5))
    conds = [
        DimCondition("d1", In(["k1_1", "k1_3"])),
        DimCondition("d3", Range("k3_2", "k3_4", True, False)),
    ]
    np.testing.assert_array_equal(mask_from_conditions(t, conds).to_dense(), brute_mask(t, conds))


def test_project_identity_and_toy_example(rng):
    t, dense = random_sparse(rng, (3, 2, 4))
    assert project(t, mask_from_conditions(t, [])) == t
    b1 = mask_from_conditions(t, [DimCondition("d1", Eq("k1_2"))])
    x2 = project(t, b1)
    assert x2 == hadamard(t, b1).renamed(t.name)
    hashtags_used = {idx[1] for idx, _ in x2.entries()}
    assert hashtags_used == {j + 1 for j in range(2) if dense[1, j].any()}


def test_project_shape_mismatch(rng):
    t, _ = random_sparse(rng, (3, 2))
    other, _ = random_sparse(rng, (2, 3), value_type="boolean", default=False)
    with pytest.raises(ShapeMismatch):
        project(t, other)


def test_u1_window_select(publish):
    r = run_query(publish, U1_WINDOW_QUERY)
    assert r.shape == publish.shape  # no compaction
    assert sorted(k for k, _ in r.keyed_entries()) == sorted(
        [("u1", "t2", r.dims[2].normalize_key("18-03-07")),
         ("u1", "t3", r.dims[2].normalize_key("18-02-28")),
         ("u1", "t8", r.dims[2].normalize_key("18-03-08"))]
    )
    conds = [
        DimCondition("user", Eq("u1")),
        DimCondition("time", Range("18-02-28", "18-03-08")),
    ]
    assert select(publish, conds, ValueCondition(Eq(1))) == r
    assert dict(r.entries()) == brute_select(publish, conds, ValueCondition(Eq(1)))


def test_select_identity(publish):
    assert select(publish) == publish
    assert select(publish, [DimCondition("user", ANY)], ValueCondition(ANY)) == publish
    assert run_query(publish, "select [] [] publish") == publish
    assert run_query(publish, "select [*] [any] publish") == publish


def test_select_errors(publish):
    with pytest.raises(UnknownDimension):
        select(publish, [DimCondition("hashtag", Eq("h1"))])
    with pytest.raises(DuplicateCondition):
        select(publish, [DimCondition("user", Eq("u1")), DimCondition("U", Eq("u2"))])


def test_select_oracle_random(rng):
    for _ in range(150):
        t, conds, vcond = random_query_instance(rng)
        got = select(t, conds, vcond)
        assert dict(got.entries()) == brute_select(t, conds, vcond)
        mask = mask_from_conditions(t, conds)
        np.testing.assert_array_equal(mask.to_dense(), brute_mask(t, conds))
        assert select(t, conds) == project(t, mask)


def test_project_idempotent_and_monotone(rng):
    for _ in range(30):
        t, conds, _ = random_query_instance(rng)
        m = mask_from_conditions(t, conds)
        once = project(t, m)
        assert project(once, m) == once
        d = t.dims[0]
        wide = select(t, [DimCondition(d.name, In(d.keys))])
        narrow = select(t, [DimCondition(d.name, In(d.keys[: len(d.keys) // 2]))])
        assert set(dict(narrow.entries())) <= set(dict(wide.entries()))


def test_aggregate_examples(rng):
    # hashtag usage over time for one user: select, slice, collapse hashtags
    t, dense = random_sparse(rng, (3, 4, 5))
    user_slice = select(t, [DimCondition("d1", Eq("k1_2"))]).slice((2, 3), (Index(2),))
    series = aggregate(user_slice, 1, "sum")
    assert series.order == 1
    np.testing.assert_array_equal(series.to_dense(), dense[1].sum(axis=0))
    empty = TypedTensor("e", t.dims, "integer", 0)
    assert aggregate(empty, 2, "sum").nnz == 0


def test_aggregate_against_dense(rng):
    for _ in range(20):
        t, dense = random_sparse(rng, (4, 5, 6), density=float(rng.uniform(0.05, 0.9)))
        for mode in (1, 2, 3):
            for reducer in ("sum", "count", "max"):
                got = aggregate(t, mode, reducer).to_dense()
                np.testing.assert_array_equal(got, dense_aggregate(dense, mode - 1, reducer, 0))


def test_aggregate_real_and_nonzero_default(rng):
    t, dense = random_sparse(rng, (3, 4), value_type="real")
    np.testing.assert_allclose(aggregate(t, 2).to_dense(), dense.sum(axis=1), rtol=1e-12)
    s = TypedTensor("s", string_dims((2, 3)), "integer", 2, {(0, 1): 7})
    np.testing.assert_array_equal(aggregate(s, 2, "sum").to_dense(), s.to_dense().sum(axis=1))
    np.testing.assert_array_equal(aggregate(s, 1, "max").to_dense(), s.to_dense().max(axis=0))


def test_aggregate_vector_to_scalar(rng):
    t, dense = random_sparse(rng, (5,))
    s = aggregate(t, 1)
    assert s.order == 0 and s.item() == dense.sum()


def test_aggregate_errors(rng):
    t, _ = random_sparse(rng, (2, 2))
    with pytest.raises(ModeOutOfRange):
        aggregate(t, 3)
    b, _ = random_sparse(rng, (2, 2), value_type="boolean", default=False)
    with pytest.raises(NonNumericValueType):
        aggregate(b, 1, "sum")
    assert aggregate(b, 1, "count").value_type is ValueType.INTEGER


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_aggregate_commutes(seed):
    rng = np.random.default_rng(seed)
    t, _ = random_sparse(rng, (3, 4, 2), value_type="real")
    ab = aggregate(aggregate(t, 1), 1).to_dense()  # drop mode 1, then (old) mode 2
    ba = aggregate(aggregate(t, 2), 1).to_dense()
    np.testing.assert_allclose(ab, ba, rtol=1e-12, atol=1e-12)


# textual syntax -----------------------------------------------------------------


def test_parse_u1_window_query():
    q = parse_query(U1_WINDOW_QUERY)
    assert q.tensor == "publish"
    assert [(d, op, v) for d, op, v, _ in q.dim_terms] == [
        ("U", "=", "u1"), ("T", ">=", "18-02-28"), ("T", "<=", "18-03-08"),
    ]
    assert [(op, v) for op, v, _ in q.value_terms] == [("=", 1)]


def test_parse_alternatives(publish):
    a = run_query(publish, "select [U='u1' ∧ T>='18-02-28' ∧ T<='18-03-08'] [=1] publish")
    b = run_query(publish, "select [user = 'u1' and time >= '18-02-28' and time <= '18-03-08'] [= 1] publish")
    assert a == b == run_query(publish, U1_WINDOW_QUERY)
    c = run_query(publish, "select [U in ('u1', 'u2')] [] publish")
    assert {k[0] for k, _ in c.keyed_entries()} == {"u1", "u2"}
    d = run_query(publish, "select [U != 'u1'] [] publish")
    assert {k[0] for k, _ in d.keyed_entries()} == {"u2", "u3"}


@pytest.mark.parametrize(
    "text, position",
    [
        ("select [U='u1' && ] [] publish", 18),
        ("select U='u1' [] publish", 7),
        ("select [U='u1'] [] ", 19),
        ("select [U='u1'] [] publish extra", 27),
        ("select [U 'u1'] [] publish", 10),
    ],
)
def test_syntax_errors_carry_position(text, position):
    with pytest.raises(QuerySyntaxError) as info:
        parse_query(text)
    assert info.value.position == position


def test_semantic_errors(publish):
    with pytest.raises(UnknownDimension):
        run_query(publish, "select [X='u1'] [] publish")
    with pytest.raises(DuplicateCondition):
        run_query(publish, "select [U='u1' && U='u2'] [] publish")
    with pytest.raises(SchemaError):
        run_query(publish, "select [] [] other")


def test_boolean_tensor_query():
    dims = string_dims((2, 2))
    t = TypedTensor("b", dims, "boolean", False, {(0, 0): True, (1, 1): True})
    r = run_query(t, "select [d1='k1_1'] [=1] b")
    assert dict(r.entries()) == {(1, 1): True}
