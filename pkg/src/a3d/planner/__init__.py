"""The optimizer pipeline: preprocess -> place joins/operators -> pre-aggregate.

:func:`optimize` is the package's front door.  It validates the input term,
normalizes it (`preprocess`), picks operator and join positions in the chosen
mode, then layers pre-aggregation on top (`postprocess`).  Modes:

``enumerate``  rank- and precedence-aware memoized join enumeration; the
               default, and the mode with the optimality claim.
``greedy``     local rewriting to a fixpoint; keeps the written join shape.
``oracle``     exhaustive search over the full reorder space; only for small
               queries, used as the optimality baseline in tests.

Every stage preserves semantics; `OptimizeResult` carries the final term, its
modelled cost, per-stage timings and mode-specific counters.
"""

import time
from dataclasses import dataclass, field
from typing import Mapping, Optional

from ..algebra import Schema, Term, output_schema
from ..rewrite import RuleContext
from ..stats import CostModel, TableStats
from .decompose import (
    DecomposeError, JoinEdge, OpProfile, QueryDecomposition, RankableOp,
    decompose,
)
from .enumeration import (
    DisconnectedJoinGraphError, InfeasibleQueryError, MemoEntry, Enumerator,
    enumerate_plans,
)
from .greedy import GreedyIterationCapError, optimize_greedy
from .oracle import (
    MAX_ORACLE_OPS, MAX_ORACLE_RELATIONS, OracleLimitError, oracle_enumerate,
)
from .postprocess import (
    PostprocessCapError, collapse_idempotent_reaggregation, postprocess,
)
from .precedence import MalformedQueryError, PrecedenceGraph, build_precedence
from .preprocess import preprocess
from .schedule import leq, rank, sequence_cost, sort_key, sort_ops

__all__ = [
    "DecomposeError", "DisconnectedJoinGraphError", "Enumerator",
    "GreedyIterationCapError", "InfeasibleQueryError", "JoinEdge",
    "MAX_ORACLE_OPS", "MAX_ORACLE_RELATIONS", "MalformedQueryError",
    "MemoEntry", "OpProfile", "OptimizeResult", "OracleLimitError",
    "PostprocessCapError", "PrecedenceGraph", "QueryDecomposition",
    "RankableOp", "build_precedence", "collapse_idempotent_reaggregation",
    "decompose", "enumerate_plans", "leq", "optimize", "optimize_greedy",
    "oracle_enumerate", "postprocess", "preprocess", "rank", "sequence_cost",
    "sort_key", "sort_ops",
]

MODES = ("greedy", "enumerate", "oracle")


@dataclass
class OptimizeResult:
    term: Term
    cost: float
    mode: str
    timings_ms: dict = field(default_factory=dict)
    counters: dict = field(default_factory=dict)
    trace: Optional[list] = None


def precedence_for(decomp: QueryDecomposition) -> PrecedenceGraph:
    """Build and repair the precedence graph for a decomposition."""
    ops = decomp.ops
    return build_precedence(
        len(ops), decomp.prec_edges,
        leq=lambda i, j: leq(ops[i], ops[j]))


def optimize(term: Term, schemas: Mapping[str, Schema],
             stats: Optional[Mapping[str, TableStats]] = None,
             correspondences=None, mode: str = "enumerate",
             alpha: float = 1.0, allow_cross_products: bool = False,
             max_oracle_relations: int = MAX_ORACLE_RELATIONS,
             trace: bool = False) -> OptimizeResult:
    """Optimize `term` end to end; raises on malformed/infeasible queries."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    output_schema(term, schemas)  # schema check; raises SchemaError

    ctx = RuleContext(dict(schemas), correspondences or {})
    cost_model = CostModel(dict(stats or {}), dict(schemas))
    records: Optional[list] = [] if trace else None
    timings: dict = {}
    counters: dict = {}

    t0 = time.perf_counter()
    pre = preprocess(term, ctx, cost_model, trace=records)
    timings["preprocess"] = (time.perf_counter() - t0) * 1000.0

    t1 = time.perf_counter()
    if mode == "greedy":
        placed = optimize_greedy(pre, ctx, cost_model, trace=records)
    else:
        decomp = decompose(pre, cost_model)
        graph = precedence_for(decomp)
        counters["relations"] = len(decomp.leaves)
        counters["rankable_ops"] = len(decomp.ops)
        if mode == "enumerate":
            order = sort_ops(decomp.ops, graph)
            entry, enum = enumerate_plans(
                decomp, graph, order, cost_model,
                allow_cross_products=allow_cross_products,
                with_diagnostics=True)
            counters.update(enum.counters)
        else:
            entry, info = oracle_enumerate(
                decomp, graph, cost_model,
                allow_cross_products=allow_cross_products,
                max_relations=max_oracle_relations,
                with_diagnostics=True)
            counters.update(info)
        placed = entry.term
    timings[mode] = (time.perf_counter() - t1) * 1000.0

    t2 = time.perf_counter()
    final = placed
    if mode != "oracle":  # the oracle is a baseline: no pre-aggregation
        final = postprocess(placed, ctx, cost_model, alpha=alpha,
                            trace=records)
    timings["postprocess"] = (time.perf_counter() - t2) * 1000.0

    cost = cost_model.term_cost(final).cost
    timings["total"] = sum(timings.values())
    return OptimizeResult(final, cost, mode, timings, counters, records)
