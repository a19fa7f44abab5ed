"""Pipeline stage one: normalize a term for decomposition.

Five sub-passes, each semantics-preserving:

1. projection pull-up  -- inner projections bubble to the root so column
   pruning never hides operators from the enumerator; blocked only where
   removing the projection would change a join's key set or capture an
   alias, in which case the projection stays put.
2. conjunct split      -- σ(p ∧ q) becomes σ(p)(σ(q)) so each conjunct ranks
   and moves independently.
3. invert + descend    -- filters over derived columns are rewritten onto
   their source columns where the function is invertible, then pushed down
   through derives/arrayJoins until a filter sits directly on unnest aliases
   and converts into an arrayFilter.
4. emptiness guards    -- a filter dropping empty arrays is inserted under an
   arrayJoin when the cost model says it pays.
5. dead derive removal -- derives whose output nothing consumes are dropped.
"""

from ..algebra import (
    Aggregate, ArrayFilter, ArrayJoin, Derive, Filter, Join, Project, RelVar,
    Term, children, replace_at, walk, with_children,
)
from ..predicates import pred_columns, split_conjuncts
from ..rewrite import RULES_BY_ID, RuleContext, guard_cost_improves, try_apply
from ..stats import CostModel


############################################################
# 1. projection pull-up
############################################################

def _hoist_once(term: Term, ctx: RuleContext):
    """Move a Project one level up through `term` if legal; None otherwise."""
    kids = children(term)
    if isinstance(term, Project) and kids and isinstance(kids[0], Project):
        inner = kids[0]
        return Project(term.cols, inner.child)

    if isinstance(term, Filter) and isinstance(term.child, Project):
        proj = term.child
        return Project(proj.cols, Filter(term.pred, proj.child))

    if isinstance(term, Join):
        for side in (0, 1):
            sub = kids[side]
            if not isinstance(sub, Project):
                continue
            other = kids[1 - side]
            inner_cols = ctx.schema_of(sub.child).columns
            other_cols = ctx.schema_of(other).columns
            if inner_cols & other_cols != set(sub.cols) & other_cols:
                continue  # dropping the projection would change the join key
            out = tuple(sorted(set(sub.cols) | other_cols))
            joined = Join(sub.child, other) if side == 0 \
                else Join(other, sub.child)
            return Project(out, joined)

    if isinstance(term, (ArrayJoin, ArrayFilter)) \
            and isinstance(term.child, Project):
        proj = term.child
        hidden = ctx.schema_of(proj.child).columns - set(proj.cols)
        aliases = {alias for _, alias in term.targets}
        if aliases & hidden:
            return None
        sources = {src for src, _ in term.targets}
        out = tuple(sorted((set(proj.cols) - sources) | aliases))
        return Project(out, with_children(term, (proj.child,)))

    if isinstance(term, Derive) and isinstance(term.child, Project):
        proj = term.child
        hidden = ctx.schema_of(proj.child).columns - set(proj.cols)
        if term.output in hidden:
            return None
        out = tuple(sorted(set(proj.cols) | {term.output}))
        return Project(out, with_children(term, (proj.child,)))

    if isinstance(term, Aggregate) and isinstance(term.child, Project):
        return with_children(term, (term.child.child,))

    return None


def _note(trace, stage: str, rule: str, path: tuple,
          cost_model=None, old=None, new=None) -> None:
    if trace is None:
        return
    rec = {"stage": stage, "rule": rule, "path": list(path)}
    if cost_model is not None:
        rec["before_cost"] = cost_model.term_cost(old).cost
        rec["after_cost"] = cost_model.term_cost(new).cost
    trace.append(rec)


def pull_projections_up(term: Term, ctx: RuleContext, trace=None,
                        cost_model=None) -> Term:
    changed = True
    while changed:
        changed = False
        for path, sub in walk(term):
            lifted = _hoist_once(sub, ctx)
            if lifted is not None:
                new = replace_at(term, path, lifted)
                _note(trace, "preprocess", "project-pull", path,
                      cost_model, term, new)
                term = new
                changed = True
                break
    return term


############################################################
# 2. conjunct split
############################################################

def split_filter_conjuncts(term: Term) -> Term:
    kids = tuple(split_filter_conjuncts(k) for k in children(term))
    term = with_children(term, kids) if kids else term
    if isinstance(term, Filter):
        parts = split_conjuncts(term.pred)
        if len(parts) > 1:
            out = term.child
            for pred in reversed(parts):
                out = Filter(pred, out)
            return out
    return term


############################################################
# 3. filter inversion and descent
############################################################

_INVERT_RULES = ("R13.2", "R11.2")
_DESCEND_RULES = ("R13.1", "R2.1")


def _commute_filter_past_array_filter(sub: Term):
    """σθ(φ(X)) -> φ(σθ(X)) when θ does not read the filtered aliases."""
    if not (isinstance(sub, Filter) and isinstance(sub.child, ArrayFilter)):
        return None
    phi = sub.child
    aliases = {alias for _, alias in phi.targets}
    if pred_columns(sub.pred) & aliases:
        return None
    return ArrayFilter(phi.targets, phi.pred, Filter(sub.pred, phi.child))


def descend_filters(term: Term, ctx: RuleContext, trace=None,
                    cost_model=None) -> Term:
    """Push filters toward arrayJoins; convert to arrayFilter on contact."""
    changed = True
    while changed:
        changed = False
        for path, sub in walk(term):
            if not isinstance(sub, Filter):
                continue
            new, used = None, None
            for rule_id in ("R2.2",) + _INVERT_RULES + _DESCEND_RULES:
                new = try_apply(RULES_BY_ID[rule_id], term, path, ctx)
                if new is not None:
                    used = rule_id
                    break
            if new is None:
                swapped = _commute_filter_past_array_filter(sub)
                if swapped is not None:
                    new = replace_at(term, path, swapped)
                    used = "filter-past-arrayFilter"
            if new is not None:
                _note(trace, "preprocess", used, path,
                      cost_model, term, new)
                term = new
                changed = True
                break
    return term


############################################################
# 4. emptiness guards before unnesting
############################################################

def insert_empty_guards(term: Term, ctx: RuleContext,
                        cost_model: CostModel, trace=None) -> Term:
    rule = RULES_BY_ID["R2.3"]
    changed = True
    while changed:
        changed = False
        for path, sub in walk(term):
            if not isinstance(sub, ArrayJoin):
                continue
            new = guard_cost_improves(rule, term, path, ctx, cost_model)
            if new is not None:
                _note(trace, "preprocess", "R2.3", path,
                      cost_model, term, new)
                term = new
                changed = True
                break
    return term


############################################################
# 5. dead derive removal
############################################################

def drop_dead_derives(term: Term, ctx: RuleContext) -> Term:
    def prune(t: Term, needed: set) -> Term:
        if isinstance(t, RelVar):
            return t
        if isinstance(t, Project):
            return Project(t.cols, prune(t.child, set(t.cols)))
        if isinstance(t, Filter):
            return Filter(t.pred, prune(t.child,
                                        needed | pred_columns(t.pred)))
        if isinstance(t, Join):
            lcols = ctx.schema_of(t.left).columns
            rcols = ctx.schema_of(t.right).columns
            shared = lcols & rcols
            want = needed | shared
            return Join(prune(t.left, want & lcols),
                        prune(t.right, want & rcols))
        if isinstance(t, (ArrayJoin, ArrayFilter)):
            aliases = {alias for _, alias in t.targets}
            sources = {src for src, _ in t.targets}
            return with_children(
                t, (prune(t.child, (needed - aliases) | sources),))
        if isinstance(t, Derive):
            if t.output not in needed:
                return prune(t.child, needed)
            return with_children(
                t, (prune(t.child, (needed - {t.output}) | set(t.args)),))
        if isinstance(t, Aggregate):
            want = set(t.keys) | {s.arg for s in t.aggs}
            return with_children(t, (prune(t.child, want),))
        return t

    return prune(term, set(ctx.schema_of(term).columns))


############################################################
# the stage
############################################################

def preprocess(term: Term, ctx: RuleContext, cost_model: CostModel,
               trace=None) -> Term:
    """Normalize `term` for decomposition; semantics are preserved."""
    term = pull_projections_up(term, ctx, trace, cost_model)
    term = split_filter_conjuncts(term)
    term = descend_filters(term, ctx, trace, cost_model)
    # inversions re-project
    term = pull_projections_up(term, ctx, trace, cost_model)
    term = insert_empty_guards(term, ctx, cost_model, trace)
    pruned = drop_dead_derives(term, ctx)
    if pruned != term:
        _note(trace, "preprocess", "dead-derive", (), cost_model, term, pruned)
    return pruned
