"""Exhaustive plan-space search used as the optimality baseline in tests.

States are (relation set, applied operator set) pairs; transitions apply any
legal operator anywhere (not just rank-sorted prefixes) or join any two
disjoint states connected in the join graph.  Plans with equal state are
interchangeable below any context (the cost state is order-independent), so
keeping the cheapest plan per state is exact.  States are expanded strictly
by level (relations + operators applied) so every state is final before
anything builds on it.  Deliberately small: refuses queries beyond
4 relations / 8 rankable operators.
"""

from ..algebra import A3DError, Project
from ..stats import CostModel
from .decompose import QueryDecomposition
from .enumeration import (
    InfeasibleQueryError, MemoEntry, _popcount, apply_op, base_entry,
    join_entries, op_applicable,
)
from .precedence import PrecedenceGraph

MAX_ORACLE_RELATIONS = 4
MAX_ORACLE_OPS = 8


class OracleLimitError(A3DError):
    """The query is too large for exhaustive search."""


def oracle_enumerate(decomp: QueryDecomposition, graph: PrecedenceGraph,
                     cost_model: CostModel, allow_cross_products: bool = False,
                     max_relations: int = MAX_ORACLE_RELATIONS,
                     with_diagnostics: bool = False):
    """Minimum-cost plan over the full reorder space; returns a MemoEntry
    (or (entry, stats) with diagnostics)."""
    nrel = len(decomp.leaves)
    nops = len(decomp.ops)
    if nrel > max_relations:
        raise OracleLimitError(
            f"{nrel} relations exceed the oracle limit of {max_relations}")
    if nops > MAX_ORACLE_OPS:
        raise OracleLimitError(
            f"{nops} rankable operators exceed the oracle limit of "
            f"{MAX_ORACLE_OPS}")

    cut_cache: dict = {}

    def crossing(p1: int, p2: int):
        key = (min(p1, p2), max(p1, p2))
        hit = cut_cache.get(key)
        if hit is None:
            cols = set()
            for e in decomp.edges:
                li, ri = 1 << e.left, 1 << e.right
                if (li & p1 and ri & p2) or (li & p2 and ri & p1):
                    cols.add(e.col)
            hit = frozenset(cols)
            cut_cache[key] = hit
        return hit

    best: dict = {}      # (rels, ops) -> MemoEntry (cheapest)
    npaths: dict = {}    # (rels, ops) -> number of distinct build orders
    levels: dict = {}    # level -> sorted-insertable list of keys

    def consider(entry: MemoEntry, paths: int) -> None:
        key = (entry.rels, entry.ops)
        old = best.get(key)
        if old is None:
            best[key] = entry
            npaths[key] = paths
            lvl = _popcount(entry.rels) + _popcount(entry.ops)
            levels.setdefault(lvl, []).append(key)
        else:
            if entry.cost < old.cost:
                best[key] = entry
            npaths[key] += paths

    for i in range(nrel):
        consider(base_entry(decomp, i, cost_model), 1)

    done: list = []      # keys already expanded, in processing order
    level = 1
    max_level = nrel + nops
    while level <= max_level:
        todo = sorted(levels.get(level, []))
        for key in todo:
            entry = best[key]
            paths = npaths[key]

            for op in decomp.ops:
                if op_applicable(op, entry, graph):
                    consider(apply_op(op, entry, cost_model,
                                      cost_model.schemas), paths)

            for pkey in done:
                if pkey[0] & key[0] or pkey[1] & key[1]:
                    continue
                cols = crossing(key[0], pkey[0])
                if not cols and not allow_cross_products:
                    continue
                joined = join_entries(entry, best[pkey], cols, cost_model)
                if joined is not None:
                    consider(joined, paths * npaths[pkey])

            done.append(key)
        level += 1

    full = ((1 << nrel) - 1, (1 << nops) - 1)
    final = best.get(full)
    if final is None:
        raise InfeasibleQueryError("oracle found no complete plan", "oracle")

    term = final.term
    out_cols = decomp.out_cols
    if set(out_cols) != final.schema.columns or decomp.had_top_project:
        term = Project(tuple(out_cols), term)
    result = MemoEntry(term, final.rels, final.ops, final.cost, final.state,
                       final.schema)
    if with_diagnostics:
        return result, {"states": len(best), "orderings": npaths.get(full, 0)}
    return result
