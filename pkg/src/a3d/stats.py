"""Column statistics, selectivity estimation, and the plan cost model.

The cost model is deliberately simple and *order-independent*: every operator
is a multiplicative machine over a small plan state (row estimate plus
per-array average lengths).  Filters scale rows; arrayFilters scale target
lengths; arrayJoins multiply rows by a length; aggregates scale rows by a
constant group selectivity derived from base statistics.  Because each
effect is a constant factor, the state after applying a set of operators does
not depend on the order they were applied in — which is exactly what makes
memoized enumeration over (relation set, operator set) sound, and what lets
the enumerator, the exhaustive oracle, and ``term_cost`` share one model.

Statistics kinds per scalar column:

exact       value -> fraction-of-rows table (low distinct counts)
uniform     lo/hi plus distinct count, frequencies near-constant
clustered   1-D weighted k-means histogram (numeric, skewed)

Array columns carry an average length over *all* rows, the fraction of empty
arrays, and element statistics over the flattened elements.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .algebra import (
    Aggregate,
    ArrayFilter,
    ArrayJoin,
    Derive,
    Filter,
    Join,
    Project,
    RelVar,
    Relation,
    Schema,
    SchemaError,
    Term,
    output_schema,
    with_children,
)
from .functions import ARRAY_ARG_FNS, affine_form, agg_output_kind, is_array
from .predicates import And, Apply, Cmp, Col, Lit, Not, Or, Pred, invert_comparison

DEFAULT_EQ_SELECTIVITY = 0.1
DEFAULT_RANGE_SELECTIVITY = 1.0 / 3.0
DEFAULT_JOIN_NDV = 10.0
DEFAULT_GROUP_NDV = 10.0
DEFAULT_ARRAY_LEN = 4.0

EXACT_NDV_LIMIT = 64
UNIFORM_CV_LIMIT = 0.1
MAX_CLUSTERS = 16


############################################################
# statistics containers
############################################################

@dataclass(frozen=True)
class ScalarStats:
    kind: str                  # "exact" | "uniform" | "clustered"
    ndv: int
    null_fraction: float
    freqs: tuple = ()          # exact: ((value, fraction_of_all_rows), ...)
    lo: object = None          # uniform/clustered bounds (numeric only)
    hi: object = None
    clusters: tuple = ()       # clustered: ((lo, hi, weight, ndv), ...)
    numeric: bool = True


@dataclass(frozen=True)
class ArrayStats:
    avg_len: float
    empty_fraction: float
    elem: Optional[ScalarStats] = None


@dataclass(frozen=True)
class TableStats:
    rows: int
    scalars: Mapping[str, ScalarStats]
    arrays: Mapping[str, ArrayStats]


############################################################
# building statistics from data
############################################################

def _weighted_kmeans_1d(values: np.ndarray, weights: np.ndarray, k: int,
                        iters: int = 50):
    """Deterministic 1-D weighted k-means: quantile init + Lloyd sweeps."""
    order = np.argsort(values, kind="stable")
    values = values[order]
    weights = weights[order]
    qs = (np.arange(k) + 0.5) / k
    cum = np.cumsum(weights)
    cum = cum / cum[-1]
    centers = np.interp(qs, cum, values)
    for _ in range(iters):
        # assign to nearest center (ties to the lower index)
        idx = np.abs(values[:, None] - centers[None, :]).argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            mask = idx == j
            if mask.any():
                w = weights[mask]
                new_centers[j] = float(np.average(values[mask], weights=w))
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    idx = np.abs(values[:, None] - centers[None, :]).argmin(axis=1)
    return idx


def build_scalar_stats(values: list, total_rows: int) -> ScalarStats:
    """Summarize one scalar column (counting `values`' nulls against rows)."""
    total = max(total_rows, 1)
    live = [v for v in values if v is not None]
    null_fraction = 1.0 - len(live) / total
    counts: dict = {}
    for v in live:
        counts[v] = counts.get(v, 0) + 1
    ndv = len(counts)
    numeric = all(isinstance(v, (int, float)) and not isinstance(v, bool)
                  for v in counts)
    if ndv == 0:
        return ScalarStats("exact", 0, null_fraction, numeric=numeric)

    if ndv <= EXACT_NDV_LIMIT:
        freqs = tuple(sorted(((v, c / total) for v, c in counts.items()),
                             key=lambda p: repr(p[0])))
        lo = min(counts) if numeric else None
        hi = max(counts) if numeric else None
        return ScalarStats("exact", ndv, null_fraction, freqs=freqs,
                           lo=lo, hi=hi, numeric=numeric)

    freq_arr = np.array(sorted(counts.values()), dtype=float)
    cv = freq_arr.std() / freq_arr.mean() if freq_arr.mean() else 0.0
    if not numeric or cv < UNIFORM_CV_LIMIT:
        # near-constant frequencies (or text): uniform summary
        lo = min(counts) if numeric else None
        hi = max(counts) if numeric else None
        return ScalarStats("uniform", ndv, null_fraction, lo=lo, hi=hi,
                           numeric=numeric)

    k = min(MAX_CLUSTERS, ndv)
    vals = np.array(sorted(counts), dtype=float)
    wts = np.array([counts[v] for v in sorted(counts)], dtype=float)
    idx = _weighted_kmeans_1d(vals, wts, k)
    clusters = []
    for j in range(k):
        mask = idx == j
        if not mask.any():
            continue
        member_vals = vals[mask]
        member_wts = wts[mask]
        clusters.append((
            float(member_vals.min()),
            float(member_vals.max()),
            float(member_wts.sum() / total),
            int(mask.sum()),
        ))
    clusters.sort()
    return ScalarStats("clustered", ndv, null_fraction,
                       lo=float(vals.min()), hi=float(vals.max()),
                       clusters=tuple(clusters), numeric=True)


def build_table_stats(relation: Relation) -> TableStats:
    rows = len(relation.rows)
    scalars = {}
    arrays = {}
    for c in relation.schema.scalars:
        scalars[c] = build_scalar_stats([r[c] for r in relation.rows], rows)
    for c in relation.schema.arrays:
        vals = [r[c] for r in relation.rows]
        if rows:
            avg_len = sum(len(v) for v in vals) / rows
            empty_fraction = sum(1 for v in vals if not v) / rows
        else:
            avg_len, empty_fraction = 0.0, 0.0
        flat = [e for v in vals for e in v]
        elem = build_scalar_stats(flat, len(flat)) if flat else None
        arrays[c] = ArrayStats(avg_len, empty_fraction, elem)
    return TableStats(rows, scalars, arrays)


############################################################
# selectivity
############################################################

def _clamp(x: float) -> float:
    return min(1.0, max(0.0, x))


def _eq_selectivity(st: Optional[ScalarStats], value) -> float:
    if value is None:
        return 0.0
    if st is None or st.ndv == 0:
        return DEFAULT_EQ_SELECTIVITY
    live = 1.0 - st.null_fraction
    if st.kind == "exact":
        for v, f in st.freqs:
            if v == value:
                return _clamp(f)
        return 0.0
    if st.kind == "uniform":
        return _clamp(live / st.ndv)
    for lo, hi, weight, ndv in st.clusters:
        if lo <= value <= hi:
            return _clamp(weight / max(ndv, 1))
    return 0.0


def _range_selectivity(st: Optional[ScalarStats], op: str, value) -> float:
    """Selectivity of  col op value  for an ordered comparison."""
    if value is None:
        return 0.0
    if st is None or st.ndv == 0 or not st.numeric or \
            not isinstance(value, (int, float)) or isinstance(value, bool):
        return DEFAULT_RANGE_SELECTIVITY
    live = 1.0 - st.null_fraction

    if st.kind == "exact":
        total = 0.0
        for v, f in st.freqs:
            if (op == "<" and v < value) or (op == "<=" and v <= value) or \
                    (op == ">" and v > value) or (op == ">=" and v >= value):
                total += f
        return _clamp(total)

    if st.kind == "uniform":
        lo, hi = st.lo, st.hi
        if lo is None or hi is None or hi == lo:
            return DEFAULT_RANGE_SELECTIVITY
        if op in ("<", "<="):
            frac = (value - lo) / (hi - lo)
        else:
            frac = (hi - value) / (hi - lo)
        return _clamp(frac) * live

    total = 0.0
    for lo, hi, weight, _ in st.clusters:
        if op in ("<", "<="):
            if hi < value or (op == "<=" and hi == value):
                total += weight
            elif lo < value < hi:
                total += weight * (value - lo) / (hi - lo)
        else:
            if lo > value or (op == ">=" and lo == value):
                total += weight
            elif lo < value < hi:
                total += weight * (hi - value) / (hi - lo)
    return _clamp(total)


class StatsResolver:
    """Column -> statistics lookup used during selectivity estimation."""

    def __init__(self, scalar_stats: Mapping[str, Optional[ScalarStats]],
                 array_info: Mapping[str, "ArrayInfo"]):
        self.scalar_stats = scalar_stats
        self.array_info = array_info

    def scalar(self, col: str) -> Optional[ScalarStats]:
        return self.scalar_stats.get(col)

    def empty_fraction(self, col: str) -> Optional[float]:
        info = self.array_info.get(col)
        return None if info is None else info.empty_fraction


def _cmp_selectivity(cmp: Cmp, resolver: StatsResolver) -> float:
    op, lhs, rhs = cmp.op, cmp.lhs, cmp.rhs
    if isinstance(rhs, Col) and isinstance(lhs, Lit):
        flip = {"<": ">", "<=": ">=", ">": "<", ">=": "<="}
        op, lhs, rhs = flip.get(op, op), rhs, lhs

    # column vs literal
    if isinstance(lhs, Col) and isinstance(rhs, Lit):
        value = rhs.value
        if is_array(value):
            ef = resolver.empty_fraction(lhs.name)
            if value == ():
                if ef is None:
                    ef = 0.0
                return _clamp(ef if op == "=" else 1.0 - ef)
            return DEFAULT_EQ_SELECTIVITY if op == "=" \
                else 1.0 - DEFAULT_EQ_SELECTIVITY
        st = resolver.scalar(lhs.name)
        if op == "=":
            return _eq_selectivity(st, value)
        if op == "!=":
            return _clamp(1.0 - _eq_selectivity(st, value))
        return _range_selectivity(st, op, value)

    # affine function of a column vs literal: estimate through the inverse
    if isinstance(lhs, Apply) and isinstance(rhs, Lit) and len(lhs.args) == 1 \
            and isinstance(lhs.args[0], Col) and not is_array(rhs.value):
        form = affine_form(lhs.fn)
        if form is not None and rhs.value is not None:
            solved = invert_comparison(op, rhs.value, form[0], form[1])
            if solved is not None:
                return _cmp_selectivity(
                    Cmp(solved[0], lhs.args[0], Lit(solved[1])), resolver)

    # anything else: defaults by operator shape
    if op == "=":
        return DEFAULT_EQ_SELECTIVITY
    if op == "!=":
        return 1.0 - DEFAULT_EQ_SELECTIVITY
    return DEFAULT_RANGE_SELECTIVITY


def pred_selectivity(pred: Pred, resolver: StatsResolver) -> float:
    """Estimated fraction of rows satisfying `pred` (independence assumed)."""
    if isinstance(pred, Cmp):
        return _clamp(_cmp_selectivity(pred, resolver))
    if isinstance(pred, And):
        s = 1.0
        for p in pred.parts:
            s *= pred_selectivity(p, resolver)
        return _clamp(s)
    if isinstance(pred, Or):
        miss = 1.0
        for p in pred.parts:
            miss *= 1.0 - pred_selectivity(p, resolver)
        return _clamp(1.0 - miss)
    if isinstance(pred, Not):
        return _clamp(1.0 - pred_selectivity(pred.part, resolver))
    raise SchemaError(f"not a predicate: {pred!r}")


############################################################
# plan state and operator effects
############################################################

@dataclass(frozen=True)
class ArrayInfo:
    """Static facts about an array column (lengths live in PlanState)."""
    empty_fraction: float
    elem: Optional[ScalarStats]


@dataclass(frozen=True)
class PlanState:
    """Order-independent cost state: row estimates and array lengths.

    rows_unf / lens_unf track the same quantities with every filter
    selectivity forced to 1; aggregate selectivities are derived from them so
    they stay constant no matter where filters sit.
    """

    rows: float
    rows_unf: float
    lens: Mapping[str, float]
    lens_unf: Mapping[str, float]
    scalar_stats: Mapping[str, Optional[ScalarStats]]
    array_info: Mapping[str, ArrayInfo]

    def resolver(self) -> StatsResolver:
        return StatsResolver(self.scalar_stats, self.array_info)

    def length(self, col: str) -> float:
        return self.lens.get(col, DEFAULT_ARRAY_LEN)


@dataclass(frozen=True)
class CostResult:
    cost: float
    state: PlanState
    schema: Schema


class CostModel:
    """Cost/cardinality model bound to base-table statistics and schemas."""

    def __init__(self, stats: Mapping[str, TableStats],
                 schemas: Mapping[str, Schema]):
        self.stats = stats
        self.schemas = schemas

    # -- base relations ---------------------------------------------------

    def base_state(self, name: str) -> PlanState:
        if name not in self.schemas:
            raise SchemaError(f"unknown relation {name!r}")
        schema = self.schemas[name]
        ts = self.stats.get(name)
        rows = float(ts.rows) if ts is not None else 1000.0
        lens, scalar_stats, array_info = {}, {}, {}
        for c in schema.scalars:
            scalar_stats[c] = ts.scalars.get(c) if ts else None
        for c in schema.arrays:
            ast = ts.arrays.get(c) if ts else None
            lens[c] = ast.avg_len if ast is not None else DEFAULT_ARRAY_LEN
            array_info[c] = ArrayInfo(
                ast.empty_fraction if ast is not None else 0.0,
                ast.elem if ast is not None else None,
            )
        return PlanState(rows, rows, lens, dict(lens), scalar_stats, array_info)

    def base_cost(self, state: PlanState) -> float:
        return state.rows  # scanning is charged once per plan

    # -- selectivity helpers ----------------------------------------------

    def filter_selectivity(self, pred: Pred, state: PlanState) -> float:
        return pred_selectivity(pred, state.resolver())

    def element_selectivity(self, pred: Pred, targets, state: PlanState) -> float:
        """Selectivity of an arrayFilter predicate over element aliases."""
        alias_stats = {}
        alias_info = {}
        for src, alias in targets:
            info = state.array_info.get(src)
            alias_stats[alias] = info.elem if info is not None else None
        return pred_selectivity(pred, StatsResolver(alias_stats, alias_info))

    def group_selectivity(self, keys, state: PlanState) -> float:
        """Constant aggregate selectivity: base key ndv product over the
        unfiltered cardinality of the aggregate's own subtree."""
        ndv_product = 1.0
        for k in keys:
            st = state.scalar_stats.get(k)
            if st is not None and st.ndv > 0:
                ndv_product *= float(st.ndv)
            else:
                ndv_product *= DEFAULT_GROUP_NDV
        if state.rows_unf <= 0:
            return 1.0
        return _clamp(ndv_product / state.rows_unf)

    def _join_divisor(self, shared, left: PlanState, right: PlanState) -> float:
        div = 1.0
        for c in shared:
            candidates = []
            for st in (left.scalar_stats.get(c), right.scalar_stats.get(c)):
                if st is not None and st.ndv > 0:
                    candidates.append(float(st.ndv))
            div *= max(candidates) if candidates else DEFAULT_JOIN_NDV
        return max(div, 1e-9)

    # -- operator effects ---------------------------------------------------

    def op_effect(self, node: Term, state: PlanState):
        """Apply one unary operator's effect.  Returns (cost, new_state).

        Only the node's own fields are consulted (its child is ignored), so
        callers may pass template nodes.
        """
        if isinstance(node, Filter):
            s = self.filter_selectivity(node.pred, state)
            cost = state.rows
            return cost, replace(state, rows=state.rows * s)

        if isinstance(node, Project):
            keep = set(node.cols)
            return 0.0, replace(
                state,
                lens={c: v for c, v in state.lens.items() if c in keep},
                lens_unf={c: v for c, v in state.lens_unf.items() if c in keep},
                scalar_stats={c: v for c, v in state.scalar_stats.items()
                              if c in keep},
                array_info={c: v for c, v in state.array_info.items()
                            if c in keep},
            )

        if isinstance(node, ArrayFilter):
            first = node.targets[0][0]
            cost = state.rows * state.length(first)
            s = self.element_selectivity(node.pred, node.targets, state)
            sources = {src for src, _ in node.targets}
            lens = {c: v for c, v in state.lens.items() if c not in sources}
            lens_unf = {c: v for c, v in state.lens_unf.items()
                        if c not in sources}
            array_info = {c: v for c, v in state.array_info.items()
                          if c not in sources}
            for src, alias in node.targets:
                lens[alias] = state.length(src) * s
                lens_unf[alias] = state.lens_unf.get(src, DEFAULT_ARRAY_LEN)
                array_info[alias] = state.array_info.get(src,
                                                         ArrayInfo(0.0, None))
            return cost, replace(state, lens=lens, lens_unf=lens_unf,
                                 array_info=array_info)

        if isinstance(node, ArrayJoin):
            first = node.targets[0][0]
            length = state.length(first)
            cost = state.rows * length
            lens = dict(state.lens)
            lens_unf = dict(state.lens_unf)
            array_info = dict(state.array_info)
            scalar_stats = dict(state.scalar_stats)
            rows_unf_factor = state.lens_unf.get(first, DEFAULT_ARRAY_LEN)
            for src, alias in node.targets:
                info = state.array_info.get(src)
                scalar_stats[alias] = info.elem if info is not None else None
            for src, _ in node.targets:
                lens.pop(src, None)
                lens_unf.pop(src, None)
                array_info.pop(src, None)
            return cost, replace(
                state,
                rows=state.rows * length,
                rows_unf=state.rows_unf * rows_unf_factor,
                lens=lens, lens_unf=lens_unf,
                scalar_stats=scalar_stats, array_info=array_info,
            )

        if isinstance(node, Derive):
            arr_args = [c for c in node.args if c in state.lens]
            if node.is_map:
                cost = state.rows * sum(state.length(c) for c in arr_args)
                src = arr_args[0]
                lens = dict(state.lens)
                lens_unf = dict(state.lens_unf)
                array_info = dict(state.array_info)
                lens[node.output] = state.length(src)
                lens_unf[node.output] = state.lens_unf.get(
                    src, DEFAULT_ARRAY_LEN)
                if node.fn.name == "identity":
                    array_info[node.output] = state.array_info.get(
                        src, ArrayInfo(0.0, None))
                else:
                    base = state.array_info.get(src)
                    array_info[node.output] = ArrayInfo(
                        base.empty_fraction if base else 0.0, None)
                return cost, replace(state, lens=lens, lens_unf=lens_unf,
                                     array_info=array_info)
            if arr_args and (node.fn.name in ARRAY_ARG_FNS
                             or node.fn.name == "identity"):
                cost = state.rows * sum(state.length(c) for c in arr_args)
            else:
                cost = state.rows
            scalar_stats = dict(state.scalar_stats)
            lens = dict(state.lens)
            lens_unf = dict(state.lens_unf)
            array_info = dict(state.array_info)
            if node.fn.name == "identity" and node.args[0] in state.lens:
                # array copy: result is an array column
                src = node.args[0]
                lens[node.output] = state.length(src)
                lens_unf[node.output] = state.lens_unf.get(src, DEFAULT_ARRAY_LEN)
                array_info[node.output] = state.array_info.get(
                    src, ArrayInfo(0.0, None))
                scalar_stats.pop(node.output, None)
            elif node.fn.name == "arrayEnumerate":
                src = node.args[0]
                lens[node.output] = state.length(src)
                lens_unf[node.output] = state.lens_unf.get(src, DEFAULT_ARRAY_LEN)
                array_info[node.output] = ArrayInfo(
                    state.array_info.get(src, ArrayInfo(0.0, None)).empty_fraction,
                    None)
                scalar_stats.pop(node.output, None)
            else:
                if node.fn.name == "identity":
                    scalar_stats[node.output] = state.scalar_stats.get(node.args[0])
                else:
                    scalar_stats[node.output] = None
                lens.pop(node.output, None)
                lens_unf.pop(node.output, None)
                array_info.pop(node.output, None)
            return cost, replace(state, lens=lens, lens_unf=lens_unf,
                                 scalar_stats=scalar_stats,
                                 array_info=array_info)

        if isinstance(node, Aggregate):
            arr_cols = [s.arg for s in node.aggs if s.arg in state.lens]
            arr_cols += [k for k in node.keys if k in state.lens]
            cost = state.rows * (1.0 + sum(state.length(c) for c in arr_cols))
            s = self.group_selectivity(node.keys, state)
            lens, lens_unf, array_info, scalar_stats = {}, {}, {}, {}
            for k in node.keys:
                if k in state.lens:
                    lens[k] = state.lens[k]
                    lens_unf[k] = state.lens_unf.get(k, DEFAULT_ARRAY_LEN)
                    array_info[k] = state.array_info.get(k, ArrayInfo(0.0, None))
                else:
                    scalar_stats[k] = state.scalar_stats.get(k)
            for spec in node.aggs:
                if agg_output_kind(spec.fn) == "array":
                    lens[spec.alias] = state.length(spec.arg) \
                        if spec.arg in state.lens else DEFAULT_ARRAY_LEN
                    lens_unf[spec.alias] = lens[spec.alias]
                    array_info[spec.alias] = ArrayInfo(0.0, None)
                else:
                    scalar_stats[spec.alias] = None
            return cost, replace(
                state,
                rows=state.rows * s,
                rows_unf=state.rows_unf * s,
                lens=lens, lens_unf=lens_unf,
                scalar_stats=scalar_stats, array_info=array_info,
            )

        raise SchemaError(f"op_effect: not a unary operator: {node!r}")

    def join_effect(self, left: PlanState, right: PlanState, shared):
        """Natural-join effect.  Returns (cost, new_state)."""
        div = self._join_divisor(shared, left, right)
        rows = left.rows * right.rows / div
        rows_unf = left.rows_unf * right.rows_unf / div
        cost = left.rows + right.rows + rows
        scalar_stats = dict(left.scalar_stats)
        scalar_stats.update(right.scalar_stats)
        lens = dict(left.lens)
        lens.update(right.lens)
        lens_unf = dict(left.lens_unf)
        lens_unf.update(right.lens_unf)
        array_info = dict(left.array_info)
        array_info.update(right.array_info)
        return cost, PlanState(rows, rows_unf, lens, lens_unf,
                               scalar_stats, array_info)

    # -- whole-term costing -------------------------------------------------

    def term_cost(self, term: Term) -> CostResult:
        """Walk a term, returning total cost and the final state/schema."""

        def go(t: Term):
            if isinstance(t, RelVar):
                state = self.base_state(t.name)
                return self.base_cost(state), state, self.schemas[t.name]
            if isinstance(t, Join):
                lc, ls, lsch = go(t.left)
                rc, rs, rsch = go(t.right)
                shared = sorted(lsch.columns & rsch.columns)
                cost, state = self.join_effect(ls, rs, shared)
                schema = output_schema(Join(RelVar("_l"), RelVar("_r")),
                                       {"_l": lsch, "_r": rsch})
                return lc + rc + cost, state, schema
            kid_cost, kid_state, kid_schema = go(t.child)
            cost, state = self.op_effect(t, kid_state)
            schema = output_schema(
                _rewire(t, RelVar("_x")), {"_x": kid_schema})
            return kid_cost + cost, state, schema

        total, state, schema = go(term)
        return CostResult(total, state, schema)


def _rewire(node: Term, child: Term) -> Term:
    return with_children(node, (child,))
