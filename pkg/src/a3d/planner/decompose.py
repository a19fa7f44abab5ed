"""Query decomposition: split a term into base relations, join edges and
rankable unary operators.

The decomposition is the normal form the join enumerator consumes.  Each
unary operator (filter, arrayFilter, arrayJoin, derive, aggregate) becomes a
``RankableOp`` carrying its column footprint and a cost profile measured at
its original position; joins become edges of a join graph whose nodes are the
base relations; the top projection is stripped and remembered.  Ordering
constraints between operators (read-after-write, write-after-read) are
collected as raw precedence edges while walking the tree.
"""

from dataclasses import dataclass, replace
from typing import Mapping, Optional

from ..algebra import (
    A3DError, Aggregate, ArrayFilter, ArrayJoin, Derive, Filter, Join,
    Project, RelVar, Schema, Term, output_schema, with_children,
)
from ..predicates import pred_columns
from ..stats import CostModel, PlanState


class DecomposeError(A3DError):
    """The term has no join-enumerable shape (not produced by preprocess)."""


############################################################
# operator records
############################################################

@dataclass(frozen=True)
class OpProfile:
    """Cost profile of one operator, frozen at its original position.

    s_row  -- output rows / input rows (above 1 for arrayJoin)
    c_t    -- cost per input row
    h_sel  -- horizontal (element) selectivity; 1.0 for row-level operators
    """

    s_row: float
    c_t: float
    h_sel: float


@dataclass(frozen=True)
class RankableOp:
    """One movable unary operator extracted from the query."""

    idx: int                  # stable numbering; bit position in op sets
    node: Term                # template node (its child is ignored)
    kind: str                 # filter | arrayFilter | arrayJoin | derive | aggregate
    requires: frozenset       # columns read
    produces: frozenset       # columns created
    destroys: frozenset       # columns removed (or overwritten in place)
    base_rels: frozenset      # leaf indices transitively feeding `requires`
    min_rels: frozenset       # leaves that must be joined before this op runs
    profile: OpProfile

    def apply(self, child: Term) -> Term:
        return with_children(self.node, (child,))


@dataclass(frozen=True)
class JoinEdge:
    """One join-graph edge: `left` and `right` are leaf indices, `col` the
    shared column, `producers` the operators that synthesize it (empty for
    plain base columns)."""

    left: int
    right: int
    col: str
    producers: frozenset


@dataclass(frozen=True)
class QueryDecomposition:
    source: Term
    leaves: tuple             # of (name, Term)
    edges: tuple              # of JoinEdge
    ops: tuple                # of RankableOp, ops[i].idx == i
    prec_edges: frozenset     # of (i, j): op i must run before op j
    out_cols: tuple           # output columns of the whole query
    had_top_project: bool

    def recompose(self) -> Term:
        return self.source


_OP_KINDS = {
    Filter: "filter",
    ArrayFilter: "arrayFilter",
    ArrayJoin: "arrayJoin",
    Derive: "derive",
    Aggregate: "aggregate",
}


def op_requires(node: Term) -> frozenset:
    if isinstance(node, Filter):
        return pred_columns(node.pred)
    if isinstance(node, ArrayFilter):
        aliases = {alias for _, alias in node.targets}
        sources = frozenset(src for src, _ in node.targets)
        return (pred_columns(node.pred) - aliases) | sources
    if isinstance(node, ArrayJoin):
        return frozenset(src for src, _ in node.targets)
    if isinstance(node, Derive):
        return frozenset(node.args)
    if isinstance(node, Aggregate):
        return frozenset(node.keys) | {s.arg for s in node.aggs}
    raise DecomposeError(f"not a rankable operator: {node!r}")


def op_produces(node: Term) -> frozenset:
    if isinstance(node, Filter):
        return frozenset()
    if isinstance(node, (ArrayFilter, ArrayJoin)):
        return frozenset(alias for _, alias in node.targets)
    if isinstance(node, Derive):
        return frozenset((node.output,))
    if isinstance(node, Aggregate):
        return frozenset(s.alias for s in node.aggs)
    raise DecomposeError(f"not a rankable operator: {node!r}")


############################################################
# tree walk
############################################################

@dataclass
class _Branch:
    """Mutable walk state for one subtree."""

    rels: frozenset           # leaf indices
    schema: Schema
    state: PlanState
    support: dict             # col -> frozenset of leaf indices
    producers: dict           # col -> frozenset of op idxs (current version)
    readers: dict             # col -> set of op idxs reading current version


def _merge_col_maps(a: dict, b: dict) -> dict:
    out = dict(a)
    for col, val in b.items():
        out[col] = (out[col] | val) if col in out else val
    return out


def _node_schema(node: Term, child_schema: Schema,
                 schemas: Mapping[str, Schema]) -> Schema:
    probe = with_children(node, (RelVar("_x"),))
    return output_schema(probe, {**schemas, "_x": child_schema})


def decompose(term: Term, cost_model: CostModel) -> QueryDecomposition:
    """Break `term` into the enumerator's normal form."""

    schemas = cost_model.schemas
    leaves: list = []
    ops: list = []
    edges: list = []
    prec: set = set()
    seen_rel_names: set = set()

    def leaf(name: str, sub: Term, schema: Schema, state: PlanState) -> _Branch:
        i = len(leaves)
        leaves.append((name, sub))
        support = {c: frozenset((i,)) for c in schema.columns}
        return _Branch(frozenset((i,)), schema, state, support, {}, {})

    def opaque(sub: Term) -> _Branch:
        res = cost_model.term_cost(sub)
        return leaf(f"~v{len(leaves)}", sub, res.schema, res.state)

    def go(sub: Term) -> _Branch:
        if isinstance(sub, RelVar):
            if sub.name in seen_rel_names:
                return opaque(sub)  # self-join: second occurrence kept opaque
            seen_rel_names.add(sub.name)
            return leaf(sub.name, sub, schemas[sub.name],
                        cost_model.base_state(sub.name))

        if isinstance(sub, Join):
            left = go(sub.left)
            right = go(sub.right)
            shared = left.schema.columns & right.schema.columns
            for col in sorted(shared):
                prods = (left.producers.get(col, frozenset())
                         | right.producers.get(col, frozenset()))
                for li in sorted(left.support.get(col, left.rels)):
                    for ri in sorted(right.support.get(col, right.rels)):
                        edges.append(JoinEdge(li, ri, col, prods))
            _, state = cost_model.join_effect(left.state, right.state,
                                              sorted(shared))
            schema = output_schema(Join(RelVar("_l"), RelVar("_r")),
                                   {"_l": left.schema, "_r": right.schema})
            return _Branch(
                left.rels | right.rels, schema, state,
                _merge_col_maps(left.support, right.support),
                _merge_col_maps(left.producers, right.producers),
                _merge_col_maps(left.readers, right.readers),
            )

        kind = _OP_KINDS.get(type(sub))
        if kind is None:
            return opaque(sub)  # e.g. an inner projection the pull-up kept

        br = go(sub.child)
        idx = len(ops)
        requires = op_requires(sub)
        produces = op_produces(sub)
        schema_after = _node_schema(sub, br.schema, schemas)
        destroys = (br.schema.columns - schema_after.columns) \
            | (produces & br.schema.columns)

        # precedence: read-after-write, then write-after-read
        for col in sorted(requires):
            for p in sorted(br.producers.get(col, ())):
                prec.add((p, idx))
        for col in sorted(destroys):
            for r in sorted(br.readers.get(col, ())):
                if r != idx:
                    prec.add((r, idx))
            for p in sorted(br.producers.get(col, ())):
                prec.add((p, idx))

        support = frozenset()
        for col in requires:
            support |= br.support.get(col, frozenset())
        min_rels = br.rels if kind == "aggregate" else (support or br.rels)

        cost, state_after = cost_model.op_effect(sub, br.state)
        # Profiles are per input row; a zero-row state (contradictory
        # filters upstream) would make every ratio degenerate, so measure
        # on a copy with rows floored at one.
        mstate = br.state
        if mstate.rows < 1.0:
            mstate = replace(mstate, rows=1.0,
                             rows_unf=max(mstate.rows_unf, 1.0))
        mcost, mafter = cost_model.op_effect(sub, mstate)
        h_sel = 1.0
        if isinstance(sub, ArrayFilter):
            h_sel = cost_model.element_selectivity(sub.pred, sub.targets,
                                                   mstate)
        profile = OpProfile(s_row=max(mafter.rows, 0.0) / mstate.rows,
                            c_t=mcost / mstate.rows, h_sel=h_sel)

        ops.append(RankableOp(idx, with_children(sub, (RelVar("_x"),)), kind,
                              requires, produces, destroys,
                              support or frozenset(), min_rels, profile))

        # update version maps
        new_support = {c: s for c, s in br.support.items() if c not in destroys}
        new_producers = {c: p for c, p in br.producers.items()
                         if c not in destroys}
        new_readers = {c: set(r) for c, r in br.readers.items()
                       if c not in destroys}
        for col in requires:
            if col in schema_after.columns:
                new_readers.setdefault(col, set()).add(idx)
        for col in produces:
            new_producers[col] = frozenset((idx,))
            new_readers[col] = set()
            new_support[col] = support or br.rels
        if isinstance(sub, Aggregate):
            keep = set(sub.keys) | produces
            new_support = {c: s for c, s in new_support.items() if c in keep}
            new_producers = {c: p for c, p in new_producers.items()
                             if c in keep}
            new_readers = {c: r for c, r in new_readers.items() if c in keep}
        return _Branch(br.rels, schema_after, state_after,
                       new_support, new_producers, new_readers)

    # strip top projections into out_cols
    body = term
    top_cols: Optional[tuple] = None
    while isinstance(body, Project):
        if top_cols is None:
            top_cols = body.cols
        body = body.child

    root = go(body)
    if top_cols is None:
        top_cols = tuple(sorted(root.schema.columns))
    return QueryDecomposition(
        source=term, leaves=tuple(leaves), edges=tuple(edges),
        ops=tuple(ops), prec_edges=frozenset(prec), out_cols=top_cols,
        had_top_project=isinstance(term, Project),
    )
