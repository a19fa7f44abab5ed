import math
import random

import pytest

from a3d.algebra import (
    Aggregate,
    AggSpec,
    ArrayFilter,
    ArrayJoin,
    Derive,
    Filter,
    Join,
    Project,
    RelVar,
    Relation,
    Schema,
)
from a3d.functions import ScalarFn
from a3d.predicates import And, Apply, Cmp, Col, Lit, Not, Or
from a3d.stats import (
    ArrayInfo,
    ArrayStats,
    CostModel,
    DEFAULT_EQ_SELECTIVITY,
    DEFAULT_RANGE_SELECTIVITY,
    PlanState,
    ScalarStats,
    StatsResolver,
    TableStats,
    build_scalar_stats,
    build_table_stats,
    pred_selectivity,
)


############################################################
# statistics construction
############################################################

def test_exact_stats_small_domain():
    st = build_scalar_stats([1, 1, 2, None, 3, 1], 6)
    assert st.kind == "exact"
    assert st.ndv == 3
    assert st.null_fraction == pytest.approx(1 / 6)
    freqs = dict(st.freqs)
    assert freqs[1] == pytest.approx(3 / 6)
    assert sum(freqs.values()) == pytest.approx(1 - st.null_fraction)


def test_uniform_stats_flat_frequencies():
    values = list(range(100)) * 2  # 100 distinct, all with count 2, CV = 0
    st = build_scalar_stats(values, len(values))
    assert st.kind == "uniform"
    assert st.ndv == 100
    assert (st.lo, st.hi) == (0, 99)


def test_text_high_ndv_falls_back_to_uniform():
    rng = random.Random(3)
    values = ["w%d" % i for i in range(80) for _ in range(rng.randint(1, 6))]
    st = build_scalar_stats(values, len(values))
    assert st.kind == "uniform"
    assert not st.numeric
    assert st.lo is None


def test_clustered_stats_deterministic_and_sane():
    rng = random.Random(11)
    values = []
    for _ in range(500):
        if rng.random() < 0.7:
            values.append(rng.randrange(0, 80))
        else:
            values.append(rng.randrange(900, 1000))
    st1 = build_scalar_stats(values, len(values))
    st2 = build_scalar_stats(list(values), len(values))
    assert st1 == st2  # byte-for-byte deterministic
    assert st1.kind == "clustered"
    assert 1 <= len(st1.clusters) <= 16
    total_weight = sum(w for _, _, w, _ in st1.clusters)
    assert total_weight == pytest.approx(1.0)
    assert sum(n for _, _, _, n in st1.clusters) == st1.ndv
    # the two modes end up in disjoint clusters
    assert all(hi <= 80 or lo >= 900 for lo, hi, _, _ in st1.clusters)


def test_array_stats_average_over_all_rows():
    rel = Relation.build(
        Schema.of((), ("a",)),
        [{"a": (1, 2, 3, 4)}, {"a": ()}, {"a": (5, 6)}, {"a": ()}],
    )
    ts = build_table_stats(rel)
    ast = ts.arrays["a"]
    assert ast.avg_len == pytest.approx(6 / 4)   # empties included
    assert ast.empty_fraction == pytest.approx(0.5)
    assert ast.elem is not None and ast.elem.ndv == 6


############################################################
# selectivity
############################################################

def _resolver(**scalars):
    return StatsResolver(scalars, {})


def test_exact_eq_and_range_selectivity():
    st = build_scalar_stats([1, 1, 2, 3], 4)
    r = _resolver(x=st)
    assert pred_selectivity(Cmp("=", Col("x"), Lit(1)), r) == pytest.approx(0.5)
    assert pred_selectivity(Cmp("=", Col("x"), Lit(9)), r) == 0.0
    assert pred_selectivity(Cmp("<", Col("x"), Lit(3)), r) == pytest.approx(0.75)
    assert pred_selectivity(Cmp("!=", Col("x"), Lit(2)), r) == pytest.approx(0.75)


def test_uniform_range_interpolation():
    st = ScalarStats("uniform", 100, 0.0, lo=0, hi=100)
    r = _resolver(x=st)
    assert pred_selectivity(Cmp("<", Col("x"), Lit(25)), r) == pytest.approx(0.25)
    assert pred_selectivity(Cmp(">=", Col("x"), Lit(25)), r) == pytest.approx(0.75)
    assert pred_selectivity(Cmp("=", Col("x"), Lit(7)), r) == pytest.approx(0.01)


def test_null_literal_matches_nothing():
    st = build_scalar_stats([1, 2], 2)
    r = _resolver(x=st)
    assert pred_selectivity(Cmp("=", Col("x"), Lit(None)), r) == 0.0


def test_boolean_combinators():
    st = ScalarStats("uniform", 10, 0.0, lo=0, hi=10)
    r = _resolver(x=st, y=st)
    p = Cmp("=", Col("x"), Lit(1))     # 0.1
    q = Cmp("<", Col("y"), Lit(5))     # 0.5
    assert pred_selectivity(And((p, q)), r) == pytest.approx(0.05)
    assert pred_selectivity(Or((p, q)), r) == pytest.approx(1 - 0.9 * 0.5)
    assert pred_selectivity(Not(q), r) == pytest.approx(0.5)


def test_defaults_when_stats_missing():
    r = _resolver()
    assert pred_selectivity(Cmp("=", Col("x"), Lit(1)), r) == DEFAULT_EQ_SELECTIVITY
    assert pred_selectivity(Cmp("<", Col("x"), Lit(1)), r) == DEFAULT_RANGE_SELECTIVITY
    assert pred_selectivity(Cmp("=", Col("x"), Col("y")), r) == DEFAULT_EQ_SELECTIVITY


def test_empty_array_comparison_uses_empty_fraction():
    info = {"a": ArrayInfo(0.3, None)}
    r = StatsResolver({}, info)
    assert pred_selectivity(Cmp("!=", Col("a"), Lit(())), r) == pytest.approx(0.7)
    assert pred_selectivity(Cmp("=", Col("a"), Lit(())), r) == pytest.approx(0.3)


def test_affine_comparison_estimated_through_inverse():
    st = ScalarStats("uniform", 100, 0.0, lo=-50, hi=50)
    r = _resolver(x=st)
    # 3 - x < 15  <=>  x > -12
    fn = ScalarFn.of("affine", a=-1, b=3)
    sel = pred_selectivity(Cmp("<", Apply(fn, (Col("x"),)), Lit(15)), r)
    direct = pred_selectivity(Cmp(">", Col("x"), Lit(-12)), r)
    assert sel == pytest.approx(direct)
    assert sel == pytest.approx(62 / 100)


############################################################
# cost model pins (hand-derived)
############################################################

def _fixture_model():
    schema = Schema.of(scalars=("x", "k"), arrays=("a",))
    elem = ScalarStats("uniform", 20, 0.0, lo=0, hi=20)
    ts = TableStats(
        rows=100,
        scalars={
            "x": ScalarStats("uniform", 50, 0.0, lo=0, hi=50),
            "k": ScalarStats("uniform", 10, 0.0, lo=0, hi=10),
        },
        arrays={"a": ArrayStats(4.0, 0.25, elem)},
    )
    return CostModel({"R": ts}, {"R": schema})


def test_base_and_filter_cost():
    cm = _fixture_model()
    res = cm.term_cost(Filter(Cmp("<", Col("x"), Lit(25)), RelVar("R")))
    # scan 100 + filter 100; selectivity 0.5
    assert res.cost == pytest.approx(200.0)
    assert res.state.rows == pytest.approx(50.0)


def test_array_join_cost_and_expansion():
    cm = _fixture_model()
    res = cm.term_cost(ArrayJoin((("a", "e"),), RelVar("R")))
    assert res.cost == pytest.approx(100 + 4.0 * 100)
    assert res.state.rows == pytest.approx(400.0)
    # unnested alias inherits element statistics
    assert res.state.scalar_stats["e"].ndv == 20


def test_array_filter_thins_lengths_not_rows():
    cm = _fixture_model()
    pred = Cmp("<", Col("e"), Lit(5))  # elements uniform over [0,20): 0.25
    res = cm.term_cost(ArrayFilter((("a", "e"),), pred, RelVar("R")))
    assert res.cost == pytest.approx(100 + 4.0 * 100)
    assert res.state.rows == pytest.approx(100.0)
    assert res.state.lens["e"] == pytest.approx(1.0)


def test_empty_prune_filter_keeps_length():
    # the a != [] guard: rows scale by 1 - ef, lengths are left alone
    cm = _fixture_model()
    res = cm.term_cost(Filter(Cmp("!=", Col("a"), Lit(())), RelVar("R")))
    assert res.state.rows == pytest.approx(75.0)
    assert res.state.lens["a"] == pytest.approx(4.0)


def test_join_cost_formula():
    cm_schema = Schema.of(scalars=("k", "u"), arrays=())
    cm_schema2 = Schema.of(scalars=("k", "v"), arrays=())
    ts1 = TableStats(100, {"k": ScalarStats("uniform", 20, 0.0, lo=0, hi=20),
                           "u": ScalarStats("uniform", 5, 0.0, lo=0, hi=5)}, {})
    ts2 = TableStats(50, {"k": ScalarStats("uniform", 10, 0.0, lo=0, hi=10),
                          "v": ScalarStats("uniform", 5, 0.0, lo=0, hi=5)}, {})
    cm = CostModel({"A": ts1, "B": ts2}, {"A": cm_schema, "B": cm_schema2})
    res = cm.term_cost(Join(RelVar("A"), RelVar("B")))
    out_rows = 100 * 50 / 20  # divisor: max ndv over the shared key
    assert res.state.rows == pytest.approx(out_rows)
    assert res.cost == pytest.approx(100 + 50 + (100 + 50 + out_rows))


def test_aggregate_selectivity_is_position_independent():
    cm = _fixture_model()
    agg = Aggregate(("k",), (AggSpec("sum", "x", "s"),), RelVar("R"))
    direct = cm.term_cost(agg)
    # rows_unf stays 100 whether or not a filter ran first
    assert direct.state.rows == pytest.approx(100 * (10 / 100))
    filtered = cm.term_cost(
        Aggregate(("k",), (AggSpec("sum", "x", "s"),),
                  Filter(Cmp("<", Col("x"), Lit(25)), RelVar("R"))))
    assert filtered.state.rows == pytest.approx(50 * (10 / 100))


def test_state_is_order_independent_costs_are_not():
    cm = _fixture_model()
    f = Cmp("<", Col("x"), Lit(25))
    phi = (("a", "e"),)
    ep = Cmp("<", Col("e"), Lit(5))
    t1 = ArrayFilter(phi, ep, Filter(f, RelVar("R")))
    t2 = Filter(f, ArrayFilter(phi, ep, RelVar("R")))
    r1, r2 = cm.term_cost(t1), cm.term_cost(t2)
    assert r1.state == r2.state
    assert r1.cost < r2.cost  # filter first: the arrayFilter scans fewer rows


def test_project_is_free_and_trims_state():
    cm = _fixture_model()
    res = cm.term_cost(Project(("x",), RelVar("R")))
    assert res.cost == pytest.approx(100.0)
    assert "a" not in res.state.lens and "k" not in res.state.scalar_stats


def test_map_derive_cost_and_new_array():
    cm = _fixture_model()
    res = cm.term_cost(Derive("b", ScalarFn.of("neg"), ("a",), RelVar("R"),
                              is_map=True))
    assert res.cost == pytest.approx(100 + 4.0 * 100)
    assert res.state.lens["b"] == pytest.approx(4.0)
    # identity map copies element stats; other functions do not
    res2 = cm.term_cost(Derive("b", ScalarFn.of("identity"), ("a",),
                               RelVar("R"), is_map=True))
    assert res2.state.array_info["b"].elem is not None
    assert res.state.array_info["b"].elem is None


def test_scalar_derive_costs_one_per_row():
    cm = _fixture_model()
    res = cm.term_cost(Derive("y", ScalarFn.of("neg"), ("x",), RelVar("R")))
    assert res.cost == pytest.approx(200.0)
    assert "y" in res.state.scalar_stats


def test_fold_derive_costs_array_length():
    cm = _fixture_model()
    res = cm.term_cost(Derive("s", ScalarFn.of("arraySum"), ("a",), RelVar("R")))
    assert res.cost == pytest.approx(100 + 4.0 * 100)
    assert "s" in res.state.scalar_stats and "s" not in res.state.lens
