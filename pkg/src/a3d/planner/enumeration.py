"""Memoized top-down join enumeration with rank-sorted operator prefixes.

The enumerator works over a QueryDecomposition.  Plans for a relation subset
are memoized per applied-operator set: ``memo[rels][ops] -> entry``.  Each
join candidate combines two memoized subplans with a prefix of their sorted
applicable operators; an operator producing one of the join's key columns is
mandatory and forces the prefix to reach it.  Both masks are int bitsets.

The same applicability/validity helpers drive the exhaustive oracle, so the
two searches agree on which plans are legal and differ only in coverage.
"""

from dataclasses import dataclass

from ..algebra import (
    A3DError, Aggregate, ArrayFilter, ArrayJoin, Derive, Join, Project,
    RelVar, Schema, Term, output_schema,
)
from ..stats import CostModel, PlanState
from .decompose import QueryDecomposition, RankableOp
from .precedence import PrecedenceGraph


class DisconnectedJoinGraphError(A3DError):
    """The join graph needs a cross product; pass allow_cross_products."""


class InfeasibleQueryError(A3DError):
    def __init__(self, msg: str, blocking_op: str = ""):
        super().__init__(msg)
        self.blocking_op = blocking_op


@dataclass
class MemoEntry:
    term: Term
    rels: int          # bitmask of leaf indices
    ops: int           # bitmask of applied operator indices
    cost: float
    state: PlanState
    schema: Schema


def _bits(mask: int):
    while mask:
        low = mask & -mask
        yield low.bit_length() - 1
        mask &= mask - 1


def _popcount(mask: int) -> int:
    return bin(mask).count("1")


def describe_op(op: RankableOp) -> str:
    return f"{op.kind}#{op.idx}"


def _cols_after(op: RankableOp, cols: set) -> set:
    """Column set after applying `op` to a plan with columns `cols`."""
    node = op.node
    if isinstance(node, (ArrayFilter, ArrayJoin)):
        return (cols - {s for s, _ in node.targets}) \
            | {a for _, a in node.targets}
    if isinstance(node, Derive):
        return cols | {node.output}
    if isinstance(node, Aggregate):
        return set(node.keys) | {s.alias for s in node.aggs}
    return cols


############################################################
# shared plan-space semantics (used by the oracle too)
############################################################

def op_applicable(op: RankableOp, entry: MemoEntry,
                  graph: PrecedenceGraph) -> bool:
    if entry.ops >> op.idx & 1:
        return False
    if not op.requires <= entry.schema.columns:
        return False
    if graph.pred[op.idx] & ~entry.ops:
        return False
    if op.kind == "aggregate":
        mine = 0
        for r in op.min_rels:
            mine |= 1 << r
        if entry.rels != mine:
            return False
    return True


def apply_op(op: RankableOp, entry: MemoEntry,
             cost_model: CostModel, schemas) -> MemoEntry:
    term = op.apply(entry.term)
    cost, state = cost_model.op_effect(op.node, entry.state)
    schema = output_schema(op.node, {**schemas, "_x": entry.schema})
    return MemoEntry(term, entry.rels, entry.ops | (1 << op.idx),
                     entry.cost + cost, state, schema)


def base_entry(decomp: QueryDecomposition, i: int,
               cost_model: CostModel) -> MemoEntry:
    _, term = decomp.leaves[i]
    if isinstance(term, RelVar) and term.name in cost_model.schemas:
        state = cost_model.base_state(term.name)
        cost = cost_model.base_cost(state)
        schema = cost_model.schemas[term.name]
    else:
        res = cost_model.term_cost(term)
        cost, state, schema = res.cost, res.state, res.schema
    return MemoEntry(term, 1 << i, 0, cost, state, schema)


def join_entries(left: MemoEntry, right: MemoEntry, expected_keys,
                 cost_model: CostModel):
    """Join two plans naturally; None when the shared columns are not
    exactly the join keys this cut calls for (a column was consumed below,
    or an operator introduced an accidental overlap)."""
    shared = left.schema.columns & right.schema.columns
    if shared != expected_keys:
        return None
    cost, state = cost_model.join_effect(left.state, right.state,
                                         sorted(shared))
    schema = output_schema(Join(RelVar("_l"), RelVar("_r")),
                           {"_l": left.schema, "_r": right.schema})
    return MemoEntry(Join(left.term, right.term), left.rels | right.rels,
                     left.ops | right.ops, left.cost + right.cost + cost,
                     state, schema)


############################################################
# the enumerator
############################################################

class Enumerator:
    def __init__(self, decomp: QueryDecomposition, graph: PrecedenceGraph,
                 order, cost_model: CostModel,
                 allow_cross_products: bool = False):
        self.q = decomp
        self.graph = graph
        self.order = list(order)           # RankableOps, globally sorted
        self.cm = cost_model
        self.allow_cross = allow_cross_products
        self.memo: dict = {}               # rels mask -> {ops mask: entry}
        self.counters = {"entries": 0, "partitions": 0, "candidates": 0,
                         "capture_skips": 0}
        self.blockers: list = []

        m = len(decomp.leaves)
        self.full = (1 << m) - 1
        self.adj = [0] * m
        self.cut_edges: dict = {}
        for e in decomp.edges:
            self.adj[e.left] |= 1 << e.right
            self.adj[e.right] |= 1 << e.left

    # -- join graph helpers -------------------------------------------------

    def connected(self, mask: int) -> bool:
        if mask == 0:
            return False
        if self.allow_cross:
            return True
        start = mask & -mask
        seen = start
        frontier = start
        while frontier:
            nxt = 0
            for i in _bits(frontier):
                nxt |= self.adj[i] & mask
            frontier = nxt & ~seen
            seen |= nxt
        return seen & mask == mask

    def crossing(self, p1: int, p2: int):
        """(key column set, mandatory producer op indices) for the cut."""
        key = (min(p1, p2), max(p1, p2))
        hit = self.cut_edges.get(key)
        if hit is None:
            cols, prods = set(), set()
            for e in self.q.edges:
                li, ri = 1 << e.left, 1 << e.right
                if (li & p1 and ri & p2) or (li & p2 and ri & p1):
                    cols.add(e.col)
                    prods |= e.producers
            hit = (frozenset(cols), frozenset(prods))
            self.cut_edges[key] = hit
        return hit

    # -- algorithm ----------------------------------------------------------

    def base_entry(self, i: int) -> MemoEntry:
        return base_entry(self.q, i, self.cm)

    def applicable(self, entry: MemoEntry, banned=frozenset()):
        """Ops from the sorted order applicable on `entry`, closed under
        the productions of earlier list members (an arrayFilter's output
        array may be unnested by a later arrayJoin in the same prefix).

        `banned` drops operators from consideration entirely; anything
        that needed a banned operator's output column, or had it as a
        precedence predecessor, falls out of the closure with it."""
        out = []
        ops_mask = entry.ops
        cols = set(entry.schema.columns)
        for op in self.order:
            if ops_mask >> op.idx & 1:
                continue
            if op.idx in banned:
                continue
            if not op.requires <= cols:
                continue
            if self.graph.pred[op.idx] & ~ops_mask:
                continue
            if op.kind == "aggregate":
                mine = 0
                for r in op.min_rels:
                    mine |= 1 << r
                if entry.rels != mine:
                    continue
            out.append(op)
            ops_mask |= 1 << op.idx
            cols = _cols_after(op, cols)
        return out

    def insert(self, table: dict, entry: MemoEntry) -> None:
        old = table.get(entry.ops)
        if old is None or entry.cost < old.cost:
            table[entry.ops] = entry
            self.counters["entries"] += 1

    def enumerate_mask(self, mask: int) -> dict:
        hit = self.memo.get(mask)
        if hit is not None:
            return hit
        table: dict = {}
        self.memo[mask] = table
        if _popcount(mask) == 1:
            self.insert(table, self.base_entry(mask.bit_length() - 1))
            return table

        low = mask & -mask
        sub = (mask - 1) & mask
        while sub:
            p1, p2 = sub, mask ^ sub
            sub = (sub - 1) & mask
            if not (p1 & low):
                continue
            if not (self.connected(p1) and self.connected(p2)):
                continue
            keys, producers = self.crossing(p1, p2)
            if not keys and not self.allow_cross:
                continue
            if not self.valid(p1, p2, producers):
                continue
            self.counters["partitions"] += 1
            for s in list(self.enumerate_mask(p1).values()):
                for t in list(self.enumerate_mask(p2).values()):
                    self.combine(table, s, t, keys, producers)
        return table

    def valid(self, p1: int, p2: int, producers) -> bool:
        """Every operator that must precede the join fits on one side."""
        for oi in sorted(producers):
            op = self.q.ops[oi]
            support = 0
            for r in op.base_rels:
                support |= 1 << r
            if not (support & ~p1 == 0 or support & ~p2 == 0):
                self.blockers.append(describe_op(op))
                return False
        return True

    def combine(self, table: dict, s: MemoEntry, t: MemoEntry,
                keys, producers) -> None:
        o1 = self.applicable(s)
        o2 = self.applicable(t)
        shared = {op.idx for op in o1} & {op.idx for op in o2}
        variants = [(o1, o2, True)]
        if shared:
            # An operator runnable on either side (its inputs are join
            # keys present in both schemas) sits in the middle of both
            # sorted lists and blocks the prefixes of whichever side it
            # does not end up on.  Re-enumerate with those operators
            # pinned to one side at a time so "all on the left" and
            # "all on the right" splits stay reachable.
            variants.append((o1, self.applicable(t, shared), False))
            variants.append((self.applicable(s, shared), o2, False))
        done = s.ops | t.ops
        seen = set()
        for v1, v2, strict in variants:
            oi1 = oi2 = 0
            feasible = True
            for m in sorted(producers):
                if done >> m & 1:
                    continue
                pos1 = next((k for k, op in enumerate(v1) if op.idx == m),
                            None)
                if pos1 is not None:
                    oi1 = max(oi1, pos1 + 1)
                    continue
                pos2 = next((k for k, op in enumerate(v2) if op.idx == m),
                            None)
                if pos2 is not None:
                    oi2 = max(oi2, pos2 + 1)
                else:
                    if strict:
                        # unapplicable on either side, full lists
                        self.blockers.append(describe_op(self.q.ops[m]))
                    feasible = False
                    break
            if not feasible:
                continue
            for left in self.prefixes(s, v1, oi1):
                for right in self.prefixes(t, v2, oi2):
                    pair = (left.ops, right.ops)
                    if pair in seen:
                        continue
                    seen.add(pair)
                    self.counters["candidates"] += 1
                    joined = join_entries(left, right, keys, self.cm)
                    if joined is None:
                        self.counters["capture_skips"] += 1
                        continue
                    self.insert(table, joined)

    def prefixes(self, entry: MemoEntry, ops: list, start: int) -> list:
        out = []
        cur = entry
        if start == 0:
            out.append(cur)
        for k, op in enumerate(ops):
            cur = apply_op(op, cur, self.cm, self.cm.schemas)
            if k + 1 >= start:
                out.append(cur)
        return out

    # -- final assembly -----------------------------------------------------

    def finish(self, entry: MemoEntry):
        """Append remaining operators in sorted order and re-project."""
        cur = entry
        for op in self.order:
            if cur.ops >> op.idx & 1:
                continue
            if not op_applicable(op, cur, self.graph):
                return None, describe_op(op)
            cur = apply_op(op, cur, self.cm, self.cm.schemas)
        term = cur.term
        out_cols = self.q.out_cols
        if set(out_cols) != cur.schema.columns or self.q.had_top_project:
            if not set(out_cols) <= cur.schema.columns:
                return None, "projection"
            term = Project(tuple(out_cols), term)
        return MemoEntry(term, cur.rels, cur.ops, cur.cost, cur.state,
                         cur.schema), None

    def run(self) -> MemoEntry:
        if not self.connected(self.full):
            raise DisconnectedJoinGraphError(
                "join graph is disconnected; a cross product is required "
                "(pass allow_cross_products to permit it)")
        table = self.enumerate_mask(self.full)
        best = None
        blocked: list = []
        for ops_mask in sorted(table):
            finished, blocker = self.finish(table[ops_mask])
            if finished is None:
                blocked.append(blocker)
                continue
            if best is None or finished.cost < best.cost:
                best = finished
        if best is None:
            names = blocked or self.blockers or ["join graph"]
            raise InfeasibleQueryError(
                f"no valid plan: blocked by {names[0]}", names[0])
        return best


def enumerate_plans(decomp: QueryDecomposition, graph: PrecedenceGraph,
                    order, cost_model: CostModel,
                    allow_cross_products: bool = False,
                    with_diagnostics: bool = False):
    """Run Algorithm-style enumeration; returns the best MemoEntry.

    With `with_diagnostics`, returns (entry, enumerator) so tests can audit
    the memo and counters.
    """
    enum = Enumerator(decomp, graph, order, cost_model, allow_cross_products)
    best = enum.run()
    if with_diagnostics:
        return best, enum
    return best
