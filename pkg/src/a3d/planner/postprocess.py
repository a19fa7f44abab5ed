"""Pipeline stage three: cost-guarded pre-aggregation.

After join/operator placement is fixed, aggregates can still be split into a
partial pass that runs early (below a join or without unnesting) and a final
pass that combines partials.  These reshapes are applied top-down to a
fixpoint, each one accepted only when

* the cost model says the whole term gets strictly cheaper, and
* the aggregate actually condenses: estimated output groups stay below
  ``alpha`` times its input rows.  The default ``alpha=1.0`` only rules out
  degenerate non-reducing aggregates; lower values make pre-aggregation more
  reluctant.

A run is bounded by ``cap`` successful applications; exceeding it raises
:class:`PostprocessCapError` so a cycling guard surfaces as a diagnostic
instead of a hang.
"""

from ..algebra import Aggregate, AggSpec, Term, children, walk, with_children
from ..rewrite import RULES_BY_ID, RuleContext, guard_cost_improves
from ..stats import CostModel

# Order matters only for ties; the list is scanned first-match per node.
PRE_AGG_RULES = ("R17.1", "R17.2", "R17.3", "R18", "R19", "R20", "R21")

# Outer aggregates that return the value itself when a group has one row.
_SINGLETON_IDENTITY = {"min", "max", "sum", "avg"}


class PostprocessCapError(Exception):
    """Pre-aggregation did not reach a fixpoint within the iteration cap."""


def _condenses(agg: Aggregate, cost_model: CostModel, alpha: float) -> bool:
    groups = cost_model.term_cost(agg).state.rows
    rows_in = cost_model.term_cost(agg.child).state.rows
    return groups < alpha * rows_in


def collapse_idempotent_reaggregation(term: Term) -> Term:
    """Fuse Γ_K(Γ_K(X)) into one aggregate.

    When an aggregate's child is another aggregate over the same key set,
    every inner group reaches the outer aggregate as exactly one row, so an
    outer min/max/sum/avg over an inner alias just passes the value through.
    The pair collapses to the inner aggregate with the outer's aliases.
    """
    kids = tuple(collapse_idempotent_reaggregation(k) for k in children(term))
    if kids:
        term = with_children(term, kids)
    if not (isinstance(term, Aggregate) and isinstance(term.child, Aggregate)):
        return term
    outer, inner = term, term.child
    if set(outer.keys) != set(inner.keys):
        return term
    by_alias = {s.alias: s for s in inner.aggs}
    fused = []
    for spec in outer.aggs:
        src = by_alias.get(spec.arg)
        if src is None or spec.fn not in _SINGLETON_IDENTITY:
            return term
        fused.append(AggSpec(src.fn, src.arg, spec.alias))
    return Aggregate(outer.keys, tuple(fused), inner.child)


def postprocess(term: Term, ctx: RuleContext, cost_model: CostModel,
                alpha: float = 1.0, cap: int = 32, trace=None) -> Term:
    """Apply pre-aggregation rules top-down to a cost-guarded fixpoint."""
    applied = 0
    changed = True
    while changed:
        changed = False
        for path, sub in walk(term):
            if not isinstance(sub, Aggregate):
                continue
            if not _condenses(sub, cost_model, alpha):
                continue
            for rule_id in PRE_AGG_RULES:
                new = guard_cost_improves(RULES_BY_ID[rule_id], term, path,
                                          ctx, cost_model)
                if new is None:
                    continue
                applied += 1
                if applied > cap:
                    raise PostprocessCapError(
                        f"pre-aggregation exceeded {cap} applications "
                        f"without reaching a fixpoint (last rule {rule_id})")
                if trace is not None:
                    trace.append({
                        "stage": "postprocess", "rule": rule_id,
                        "path": list(path),
                        "before_cost": cost_model.term_cost(term).cost,
                        "after_cost": cost_model.term_cost(new).cost,
                    })
                term = new
                changed = True
                break
            if changed:
                break
    return collapse_idempotent_reaggregation(term)
