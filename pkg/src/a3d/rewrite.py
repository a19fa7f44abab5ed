"""The rewrite-rule catalog and its application engine.

Every rule is a pure function from a subterm (plus context) to a rewritten
subterm or None.  Rules never change the output schema: ``try_apply``
verifies schema preservation on every hit and raises if a rule breaks it.

Rules come in two kinds:

``rule``  equivalence-preserving reshapes that are always worth doing in a
          bottom-up pass (pushdowns, fission into element form, inversions);
``cost``  reshapes that can help or hurt (commutations, expansion placement,
          pre-aggregation) and therefore apply only under
          ``guard_cost_improves``.

Naming: R<n> identifiers are stable API surface; sub-variants share a family
number.  Fresh internal columns use the ``__idx_<k>`` / ``__inv_<k>`` /
``__p<k>`` gensym pools and are always projected away by the same rule that
introduced them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator, Mapping, Optional

from .algebra import (
    Aggregate,
    AggSpec,
    ArrayFilter,
    ArrayJoin,
    Derive,
    Filter,
    Join,
    Project,
    RelVar,
    Schema,
    SchemaError,
    Term,
    output_schema,
    replace_at,
    subterm_at,
    walk,
)
from .functions import ARRAY_ARG_FNS, REAGGREGATE, ScalarFn, affine_form
from .predicates import (
    Cmp,
    Col,
    Lit,
    Pred,
    invert_pred_through_fn,
    pred_columns,
)


class RewriteError(Exception):
    """A rule produced a term with a different schema (engine bug guard)."""


############################################################
# context and rule records
############################################################

@dataclass(frozen=True)
class Rule:
    rule_id: str
    kind: str            # "rule" | "cost"
    title: str
    fn: Callable         # (sub: Term, ctx: RuleContext) -> Optional[Term]


class RuleContext:
    """Schemas, declared correspondences, and a gensym pool for one term."""

    def __init__(self, schemas: Mapping[str, Schema], correspondences=(),
                 root: Optional[Term] = None):
        self.schemas = dict(schemas)
        self.correspondences = [frozenset(g) for g in correspondences]
        self._used: set = set()
        if root is not None:
            self.bind_root(root)

    def bind_root(self, root: Term) -> "RuleContext":
        self._used = collect_names(root, self.schemas)
        return self

    def schema_of(self, term: Term) -> Schema:
        return output_schema(term, self.schemas)

    def corresponding(self, cols) -> bool:
        cols = frozenset(cols)
        return any(cols <= g for g in self.correspondences)

    def fresh(self, prefix: str) -> str:
        k = 0
        while f"{prefix}{k}" in self._used:
            k += 1
        name = f"{prefix}{k}"
        self._used.add(name)
        return name


def collect_names(term: Term, schemas: Mapping[str, Schema]) -> set:
    names: set = set()
    for _, node in walk(term):
        if isinstance(node, RelVar):
            if node.name in schemas:
                names |= schemas[node.name].columns
        elif isinstance(node, Filter):
            names |= pred_columns(node.pred)
        elif isinstance(node, Project):
            names |= set(node.cols)
        elif isinstance(node, (ArrayJoin, ArrayFilter)):
            for s, a in node.targets:
                names.add(s)
                names.add(a)
            if isinstance(node, ArrayFilter):
                names |= pred_columns(node.pred)
        elif isinstance(node, Derive):
            names.add(node.output)
            names |= set(node.args)
        elif isinstance(node, Aggregate):
            names |= set(node.keys)
            for spec in node.aggs:
                names.add(spec.arg)
                names.add(spec.alias)
    return names


CATALOG: list = []
RULES_BY_ID: dict = {}


def _rule(rule_id: str, kind: str, title: str):
    def register(fn):
        r = Rule(rule_id, kind, title, fn)
        CATALOG.append(r)
        RULES_BY_ID[rule_id] = r
        return fn
    return register


def _aliases(targets):
    return frozenset(a for _, a in targets)


def _sources(targets):
    return frozenset(s for s, _ in targets)


def _not_empty(col: str) -> Pred:
    return Cmp("!=", Col(col), Lit(()))


############################################################
# filters vs array operators (R1, R2.x)
############################################################

@_rule("R1", "cost", "commute adjacent filters")
def r1(sub, ctx):
    if isinstance(sub, Filter) and isinstance(sub.child, Filter):
        inner = sub.child
        return Filter(inner.pred, Filter(sub.pred, inner.child))
    return None


@_rule("R2.1", "rule", "push filter below arrayJoin (alias-independent)")
def r2_1(sub, ctx):
    if not (isinstance(sub, Filter) and isinstance(sub.child, ArrayJoin)):
        return None
    mu = sub.child
    if pred_columns(sub.pred) & _aliases(mu.targets):
        return None
    return ArrayJoin(mu.targets, Filter(sub.pred, mu.child))


@_rule("R2.2", "rule", "filter on unnested elements becomes arrayFilter")
def r2_2(sub, ctx):
    if not (isinstance(sub, Filter) and isinstance(sub.child, ArrayJoin)):
        return None
    mu = sub.child
    aliases = _aliases(mu.targets)
    if not pred_columns(sub.pred) <= aliases:
        return None
    phi = ArrayFilter(mu.targets, sub.pred, mu.child)
    return ArrayJoin(tuple((a, a) for _, a in mu.targets), phi)


@_rule("R2.3", "cost", "prune empty arrays before arrayJoin")
def r2_3(sub, ctx):
    if not isinstance(sub, ArrayJoin):
        return None
    guard = _not_empty(sub.targets[0][0])
    probe = sub.child
    while isinstance(probe, Filter):
        if probe.pred == guard:
            return None  # already guarded
        probe = probe.child
    return ArrayJoin(sub.targets, Filter(guard, sub.child))


############################################################
# projections (R3, R9, R14)
############################################################

@_rule("R3", "rule", "push projection below filter")
def r3(sub, ctx):
    if not (isinstance(sub, Project) and isinstance(sub.child, Filter)):
        return None
    f = sub.child
    if not pred_columns(f.pred) <= set(sub.cols):
        return None
    return Filter(f.pred, Project(sub.cols, f.child))


@_rule("R9", "rule", "split projection across a join")
def r9(sub, ctx):
    if not (isinstance(sub, Project) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch = ctx.schema_of(join.left)
    rsch = ctx.schema_of(join.right)
    shared = lsch.columns & rsch.columns
    keep = frozenset(sub.cols)
    if not shared <= keep:
        return None
    lcols = tuple(sorted(keep & lsch.columns))
    rcols = tuple(sorted(keep & rsch.columns))
    if frozenset(lcols) == lsch.columns and frozenset(rcols) == rsch.columns:
        return None  # nothing to trim
    return Join(Project(lcols, join.left), Project(rcols, join.right))


@_rule("R14", "rule", "push projection below derive / drop dead derive")
def r14(sub, ctx):
    if not (isinstance(sub, Project) and isinstance(sub.child, Derive)):
        return None
    d = sub.child
    keep = frozenset(sub.cols)
    if d.output not in keep:
        return Project(sub.cols, d.child)           # derive result unused
    if not set(d.args) <= keep:
        return None
    inner = tuple(sorted((keep - {d.output}) | set(d.args)))
    if frozenset(inner) >= ctx.schema_of(d.child).columns:
        return None  # nothing to trim: inserting would be a no-op forever
    return Project(sub.cols,
                   Derive(d.output, d.fn, d.args, Project(inner, d.child),
                          d.is_map))


############################################################
# operators vs join (R4.x, R6, R7, R8, R10.x)
############################################################

def _side_schemas(ctx, join):
    return ctx.schema_of(join.left), ctx.schema_of(join.right)


@_rule("R4.1", "cost", "push arrayJoin below join (one-sided targets)")
def r4_1(sub, ctx):
    if not (isinstance(sub, ArrayJoin) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    shared = lsch.columns & rsch.columns
    srcs, als = _sources(sub.targets), _aliases(sub.targets)
    if srcs & shared:
        return None  # unnesting a join key changes the join
    if srcs <= lsch.arrays and not als & rsch.columns:
        return Join(ArrayJoin(sub.targets, join.left), join.right)
    if srcs <= rsch.arrays and not als & lsch.columns:
        return Join(join.left, ArrayJoin(sub.targets, join.right))
    return None


@_rule("R4.2", "cost", "split cross-relation coordinated arrayJoin by index")
def r4_2(sub, ctx):
    if not (isinstance(sub, ArrayJoin) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    shared = lsch.columns & rsch.columns
    srcs = _sources(sub.targets)
    if srcs & shared:
        return None
    left_t = tuple(t for t in sub.targets if t[0] in lsch.arrays)
    right_t = tuple(t for t in sub.targets if t[0] in rsch.arrays)
    if not left_t or not right_t:
        return None                        # single-sided: R4.1 territory
    if not ctx.corresponding(srcs):
        return None                        # lengths not promised equal
    if _aliases(left_t) & rsch.columns or _aliases(right_t) & lsch.columns:
        return None
    out_schema = ctx.schema_of(sub)
    idx = ctx.fresh("__idx_")

    def indexed(side_term, side_targets):
        first_src = side_targets[0][0]
        enum = Derive(idx, ScalarFn.of("arrayEnumerate"), (first_src,),
                      side_term)
        return ArrayJoin(side_targets + ((idx, idx),), enum)

    joined = Join(indexed(join.left, left_t), indexed(join.right, right_t))
    return Project(tuple(sorted(out_schema.columns)), joined)


@_rule("R6", "rule", "push filter below join")
def r6(sub, ctx):
    if not (isinstance(sub, Filter) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    cols = pred_columns(sub.pred)
    if cols <= lsch.columns:
        return Join(Filter(sub.pred, join.left), join.right)
    if cols <= rsch.columns:
        return Join(join.left, Filter(sub.pred, join.right))
    return None


@_rule("R7", "cost", "pull filter above join")
def r7(sub, ctx):
    if not isinstance(sub, Join):
        return None
    if isinstance(sub.left, Filter):
        return Filter(sub.left.pred, Join(sub.left.child, sub.right))
    if isinstance(sub.right, Filter):
        return Filter(sub.right.pred, Join(sub.left, sub.right.child))
    return None


@_rule("R8", "rule", "push derive below join")
def r8(sub, ctx):
    if not (isinstance(sub, Derive) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    args = set(sub.args)
    if args <= lsch.columns and sub.output not in rsch.columns:
        return Join(Derive(sub.output, sub.fn, sub.args, join.left,
                           sub.is_map), join.right)
    if args <= rsch.columns and sub.output not in lsch.columns:
        return Join(join.left,
                    Derive(sub.output, sub.fn, sub.args, join.right,
                           sub.is_map))
    return None


@_rule("R10.1", "cost", "push arrayFilter below join")
def r10_1(sub, ctx):
    if not (isinstance(sub, ArrayFilter) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    shared = lsch.columns & rsch.columns
    srcs, als = _sources(sub.targets), _aliases(sub.targets)
    if srcs & shared:
        return None
    if srcs <= lsch.arrays and not als & rsch.columns:
        return Join(ArrayFilter(sub.targets, sub.pred, join.left), join.right)
    if srcs <= rsch.arrays and not als & lsch.columns:
        return Join(join.left, ArrayFilter(sub.targets, sub.pred, join.right))
    return None


@_rule("R10.2", "cost", "pull arrayFilter above join")
def r10_2(sub, ctx):
    if not isinstance(sub, Join):
        return None
    for side, other_schema in (("left", ctx.schema_of(sub.right)),
                               ("right", ctx.schema_of(sub.left))):
        kid = getattr(sub, side)
        if isinstance(kid, ArrayFilter) and \
                not _aliases(kid.targets) & other_schema.columns and \
                not _sources(kid.targets) & other_schema.columns:
            if side == "left":
                return ArrayFilter(kid.targets, kid.pred,
                                   Join(kid.child, sub.right))
            return ArrayFilter(kid.targets, kid.pred,
                               Join(sub.left, kid.child))
    return None


@_rule("R10.3", "cost", "split stacked independent arrayFilters across a join")
def r10_3(sub, ctx):
    if not (isinstance(sub, ArrayFilter) and len(sub.targets) == 1
            and isinstance(sub.child, ArrayFilter)
            and len(sub.child.targets) == 1
            and isinstance(sub.child.child, Join)):
        return None
    outer, inner = sub, sub.child
    join = inner.child
    lsch, rsch = _side_schemas(ctx, join)
    shared = lsch.columns & rsch.columns
    src_o, alias_o = outer.targets[0]
    src_i, alias_i = inner.targets[0]
    if {src_o, src_i} & shared:
        return None
    if ctx.corresponding((src_o, src_i)):
        return None  # declared corresponding: element positions are coupled
    for first, second in ((outer, inner), (inner, outer)):
        fs, fa = first.targets[0]
        ss, sa = second.targets[0]
        if fs in lsch.arrays and ss in rsch.arrays and \
                not {fa} & rsch.columns and not {sa} & lsch.columns:
            return Join(ArrayFilter(first.targets, first.pred, join.left),
                        ArrayFilter(second.targets, second.pred, join.right))
    return None


############################################################
# derive vs array operators (R5.x, R11.x, R12, R13.x)
############################################################

@_rule("R5.1", "rule", "push scalar derive below arrayJoin")
def r5_1(sub, ctx):
    if not (isinstance(sub, Derive) and isinstance(sub.child, ArrayJoin)
            and not sub.is_map):
        return None
    mu = sub.child
    als, srcs = _aliases(mu.targets), _sources(mu.targets)
    if set(sub.args) & als or sub.output in als | srcs:
        return None
    return ArrayJoin(mu.targets,
                     Derive(sub.output, sub.fn, sub.args, mu.child,
                            sub.is_map))


@_rule("R5.2", "cost", "derive on unnested element becomes arrayMap below")
def r5_2(sub, ctx):
    if not (isinstance(sub, Derive) and isinstance(sub.child, ArrayJoin)
            and not sub.is_map):
        return None
    mu = sub.child
    als = _aliases(mu.targets)
    alias_args = [c for c in sub.args if c in als]
    if len(alias_args) != 1 or sub.fn.name in ARRAY_ARG_FNS:
        return None
    below = ctx.schema_of(mu.child)
    y = sub.output
    if y in below.columns or y in als or y in _sources(mu.targets):
        return None
    if any(c not in below.scalars for c in sub.args if c not in als):
        return None
    src_by_alias = {a: s for s, a in mu.targets}
    mapped_args = tuple(src_by_alias.get(c, c) for c in sub.args)
    inner = Derive(y, sub.fn, mapped_args, mu.child, is_map=True)
    return ArrayJoin(mu.targets + ((y, y),), inner)


@_rule("R11.1", "cost", "commute independent arrayFilter and map derive")
def r11_1(sub, ctx):
    if isinstance(sub, ArrayFilter) and isinstance(sub.child, Derive) \
            and sub.child.is_map:
        d = sub.child
        srcs, als = _sources(sub.targets), _aliases(sub.targets)
        if d.output in srcs | als or set(d.args) & (srcs | als):
            return None
        return Derive(d.output, d.fn, d.args,
                      ArrayFilter(sub.targets, sub.pred, d.child), True)
    if isinstance(sub, Derive) and sub.is_map \
            and isinstance(sub.child, ArrayFilter):
        phi = sub.child
        srcs, als = _sources(phi.targets), _aliases(phi.targets)
        if sub.output in srcs | als or set(sub.args) & (srcs | als):
            return None
        return ArrayFilter(phi.targets, phi.pred,
                           Derive(sub.output, sub.fn, sub.args, phi.child,
                                  True))
    return None


@_rule("R11.2", "rule", "rewind arrayFilter through an invertible map")
def r11_2(sub, ctx):
    if not (isinstance(sub, ArrayFilter) and len(sub.targets) == 1
            and isinstance(sub.child, Derive) and sub.child.is_map
            and len(sub.child.args) == 1):
        return None
    d = sub.child
    src_arr, out_alias = sub.targets[0]
    if src_arr != d.output:
        return None
    if affine_form(d.fn) is None:
        return None
    below = ctx.schema_of(d.child)
    if out_alias in below.columns:
        return None
    out_cols = tuple(sorted(ctx.schema_of(sub).columns))
    g = ctx.fresh("__inv_")
    inverted = invert_pred_through_fn(sub.pred, d.fn, source=g,
                                      output=out_alias)
    if inverted is None:
        return None
    copied = Derive(g, ScalarFn.of("identity"), (d.args[0],), d.child)
    filtered = ArrayFilter(((g, g),), inverted, copied)
    remapped = Derive(out_alias, d.fn, (g,), filtered, is_map=True)
    return Project(out_cols, remapped)


@_rule("R12", "cost", "commute independent arrayJoins")
def r12(sub, ctx):
    if not (isinstance(sub, ArrayJoin) and isinstance(sub.child, ArrayJoin)):
        return None
    upper, lower = sub, sub.child
    u = _sources(upper.targets) | _aliases(upper.targets)
    l = _sources(lower.targets) | _aliases(lower.targets)
    if u & l:
        return None
    return ArrayJoin(lower.targets, ArrayJoin(upper.targets, lower.child))


@_rule("R13.1", "rule", "push filter below independent derive")
def r13_1(sub, ctx):
    if not (isinstance(sub, Filter) and isinstance(sub.child, Derive)):
        return None
    d = sub.child
    if d.output in pred_columns(sub.pred):
        return None
    return Derive(d.output, d.fn, d.args, Filter(sub.pred, d.child), d.is_map)


@_rule("R13.2", "rule", "invert filter through an affine derive")
def r13_2(sub, ctx):
    if not (isinstance(sub, Filter) and isinstance(sub.child, Derive)):
        return None
    d = sub.child
    if d.is_map or len(d.args) != 1:
        return None
    if pred_columns(sub.pred) != {d.output}:
        return None
    inverted = invert_pred_through_fn(sub.pred, d.fn, source=d.args[0],
                                      output=d.output)
    if inverted is None:
        return None
    return Derive(d.output, d.fn, d.args, Filter(inverted, d.child), d.is_map)


############################################################
# aggregates (R15, R16, R17.x, R18-R21)
############################################################

@_rule("R15", "cost", "push filter on group keys below aggregate")
def r15(sub, ctx):
    if not (isinstance(sub, Filter) and isinstance(sub.child, Aggregate)):
        return None
    g = sub.child
    if not pred_columns(sub.pred) <= set(g.keys):
        return None
    return Aggregate(g.keys, g.aggs, Filter(sub.pred, g.child))


def _partial_final_specs(aggs, fresh):
    """Split aggregate specs into partial and final stages.

    Returns (inner_specs, outer_specs, finishers, drop) where finishers are
    (alias, sum_col, count_col) triples realizing avg as a final division and
    drop lists the scratch columns a wrapping projection must remove.
    """
    inner, outer, finishers, drop = [], [], [], []
    for spec in aggs:
        if spec.fn == "avg":
            ps, pc = fresh("__p"), fresh("__p")
            fs, fc = fresh("__p"), fresh("__p")
            inner += [AggSpec("sum", spec.arg, ps),
                      AggSpec("count", spec.arg, pc)]
            outer += [AggSpec("sum", ps, fs), AggSpec("sum", pc, fc)]
            finishers.append((spec.alias, fs, fc))
            drop += [fs, fc]
        elif spec.fn in REAGGREGATE:
            p = fresh("__p")
            inner.append(AggSpec(spec.fn, spec.arg, p))
            outer.append(AggSpec(REAGGREGATE[spec.fn], p, spec.alias))
        elif spec.fn == "distinct":
            p = fresh("__p")
            inner.append(AggSpec("distinct", spec.arg, p))
            outer.append(AggSpec("distinct", p, spec.alias))
        else:
            return None
    return inner, outer, finishers, drop


def _finish(term, keys_and_aliases, finishers, drop):
    """Apply avg finishers and project scratch columns away."""
    for alias, fs, fc in finishers:
        term = Derive(alias, ScalarFn.of("div"), (fs, fc), term)
    if drop:
        term = Project(tuple(sorted(keys_and_aliases)), term)
    return term


def _eager_join_agg(sub, ctx, *, require_distinct, local_keys):
    """Shared skeleton of R16 / R18 / R21: partial-aggregate one join side.

    ``local_keys`` selects between the variant whose group keys live entirely
    on the aggregated side (True), the variant where they spill onto the
    other side (False), or either (None, used for distinct).
    """
    if not (isinstance(sub, Aggregate) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    shared = lsch.columns & rsch.columns
    fns = {s.fn for s in sub.aggs}
    if not sub.aggs:
        return None
    if require_distinct and fns != {"distinct"}:
        return None
    if not require_distinct and "distinct" in fns:
        return None
    for side_schema, mk in (
        (lsch, lambda inner: Join(inner, join.right)),
        (rsch, lambda inner: Join(join.left, inner)),
    ):
        args = {s.arg for s in sub.aggs}
        if not args <= side_schema.columns - shared:
            continue
        keys = set(sub.keys)
        if local_keys is not None and local_keys != \
                (keys <= side_schema.columns):
            continue
        split = _partial_final_specs(sub.aggs, ctx.fresh)
        if split is None:
            continue
        inner_specs, outer_specs, finishers, drop = split
        inner_keys = tuple(sorted((keys & side_schema.columns) | shared))
        side_term = join.left if side_schema is lsch else join.right
        inner = Aggregate(inner_keys, tuple(inner_specs), side_term)
        outer = Aggregate(sub.keys, tuple(outer_specs), mk(inner))
        out_cols = set(sub.keys) | {s.alias for s in sub.aggs}
        return _finish(outer, out_cols, finishers, drop)
    return None


@_rule("R16", "cost", "push distinct aggregation below join")
def r16(sub, ctx):
    return _eager_join_agg(sub, ctx, require_distinct=True, local_keys=None)


@_rule("R18", "cost", "push fully one-sided aggregation below join")
def r18(sub, ctx):
    return _eager_join_agg(sub, ctx, require_distinct=False, local_keys=True)


@_rule("R21", "cost", "eager partial aggregation below join (keys spill over)")
def r21(sub, ctx):
    return _eager_join_agg(sub, ctx, require_distinct=False, local_keys=False)


@_rule("R19", "cost", "pre-count one join side, scale the other's aggregates")
def r19(sub, ctx):
    if not (isinstance(sub, Aggregate) and isinstance(sub.child, Join)):
        return None
    join = sub.child
    lsch, rsch = _side_schemas(ctx, join)
    shared = lsch.columns & rsch.columns
    if not sub.aggs or not shared:
        return None
    if not {s.fn for s in sub.aggs} <= {"sum", "min", "max"}:
        return None
    for agg_schema, cnt_schema, mk in (
        (lsch, rsch, lambda counted: Join(join.left, counted)),
        (rsch, lsch, lambda counted: Join(counted, join.right)),
    ):
        args = {s.arg for s in sub.aggs}
        if not args <= agg_schema.columns - shared:
            continue
        if not set(sub.keys) <= agg_schema.columns | shared:
            continue
        one = ctx.fresh("__p")
        cnt = ctx.fresh("__p")
        cnt_side = join.right if agg_schema is lsch else join.left
        counted = Aggregate(tuple(sorted(shared)),
                            (AggSpec("count", one, cnt),),
                            Derive(one, ScalarFn.of("const", value=1), (),
                                   cnt_side))
        joined = mk(counted)
        specs = []
        for spec in sub.aggs:
            if spec.fn == "sum":
                w = ctx.fresh("__p")
                joined = Derive(w, ScalarFn.of("mul"), (spec.arg, cnt), joined)
                specs.append(AggSpec("sum", w, spec.alias))
            else:
                specs.append(spec)
        return Aggregate(sub.keys, tuple(specs), joined)
    return None


@_rule("R17.1", "cost", "aggregate over unnested elements without unnesting")
def r17_1(sub, ctx):
    if not (isinstance(sub, Aggregate) and isinstance(sub.child, ArrayJoin)):
        return None
    mu = sub.child
    als = _aliases(mu.targets)
    if not sub.aggs or set(sub.keys) & als:
        return None
    if not {s.arg for s in sub.aggs} <= als:
        return None
    if not {s.fn for s in sub.aggs} <= {"min", "max", "sum", "count", "avg"}:
        return None
    src_by_alias = {a: s for s, a in mu.targets}
    fold_fn = {"min": "arrayMin", "max": "arrayMax", "sum": "arraySum",
               "count": "arraySum"}
    inner_specs, folds, finishers = [], [], []
    for spec in sub.aggs:
        src = src_by_alias[spec.arg]
        if spec.fn == "avg":
            ns, nc = ctx.fresh("__p"), ctx.fresh("__p")
            ss, cc = ctx.fresh("__p"), ctx.fresh("__p")
            inner_specs += [AggSpec("sumForEach", src, ns),
                            AggSpec("countForEach", src, nc)]
            folds += [(ss, "arraySum", ns), (cc, "arraySum", nc)]
            finishers.append((spec.alias, ss, cc))
        else:
            n = ctx.fresh("__p")
            inner_specs.append(AggSpec(f"{spec.fn}ForEach", src, n))
            folds.append((spec.alias, fold_fn[spec.fn], n))
    inner = Aggregate(sub.keys, tuple(inner_specs), mu.child)
    guarded = Filter(_not_empty(inner_specs[0].alias), inner)
    term: Term = guarded
    for out, fn, arr in folds:
        term = Derive(out, ScalarFn.of(fn), (arr,), term)
    for alias, ss, cc in finishers:
        term = Derive(alias, ScalarFn.of("div"), (ss, cc), term)
    out_cols = tuple(sorted(set(sub.keys) | {s.alias for s in sub.aggs}))
    return Project(out_cols, term)


@_rule("R17.2", "cost", "group by unnested element: pre-aggregate per array")
def r17_2(sub, ctx):
    if not (isinstance(sub, Aggregate) and isinstance(sub.child, ArrayJoin)):
        return None
    mu = sub.child
    als = _aliases(mu.targets)
    key_aliases = [k for k in sub.keys if k in als]
    if len(key_aliases) != 1 or not sub.aggs:
        return None
    if {s.arg for s in sub.aggs} & als:
        return None  # aggregating another element: R17.3's shape
    if not {s.fn for s in sub.aggs} <= {"min", "max", "sum", "count", "avg"}:
        return None
    a = key_aliases[0]
    src = {al: s for s, al in mu.targets}[a]
    scalar_keys = tuple(k for k in sub.keys if k != a)
    split = _partial_final_specs(sub.aggs, ctx.fresh)
    if split is None:
        return None
    inner_specs, outer_specs, finishers, drop = split
    inner = Aggregate(tuple(sorted(set(scalar_keys) | {src})),
                      tuple(inner_specs), mu.child)
    mid = ArrayJoin(((src, a),), inner)
    outer = Aggregate(sub.keys, tuple(outer_specs), mid)
    out_cols = set(sub.keys) | {s.alias for s in sub.aggs}
    return _finish(outer, out_cols, finishers, drop)


@_rule("R17.3", "cost", "group by one element, aggregate its corresponding one")
def r17_3(sub, ctx):
    if not (isinstance(sub, Aggregate) and isinstance(sub.child, ArrayJoin)):
        return None
    mu = sub.child
    als = _aliases(mu.targets)
    key_aliases = [k for k in sub.keys if k in als]
    if len(key_aliases) != 1 or not sub.aggs:
        return None
    a1 = key_aliases[0]
    arg_aliases = {s.arg for s in sub.aggs}
    if not arg_aliases or not arg_aliases <= als - {a1}:
        return None
    if not {s.fn for s in sub.aggs} <= {"min", "max", "sum", "count", "avg"}:
        return None
    src_by_alias = {al: s for s, al in mu.targets}
    a1_src = src_by_alias[a1]
    scalar_keys = tuple(k for k in sub.keys if k != a1)
    foreach = {"min": "minForEach", "max": "maxForEach", "sum": "sumForEach",
               "count": "countForEach"}
    inner_specs, unnest_extra, outer_specs, finishers, drop = [], [], [], [], []
    for spec in sub.aggs:
        src = src_by_alias[spec.arg]
        if spec.fn == "avg":
            ns, nc = ctx.fresh("__p"), ctx.fresh("__p")
            es, ec = ctx.fresh("__p"), ctx.fresh("__p")
            fs, fc = ctx.fresh("__p"), ctx.fresh("__p")
            inner_specs += [AggSpec("sumForEach", src, ns),
                            AggSpec("countForEach", src, nc)]
            unnest_extra += [(ns, es), (nc, ec)]
            outer_specs += [AggSpec("sum", es, fs), AggSpec("sum", ec, fc)]
            finishers.append((spec.alias, fs, fc))
            drop += [fs, fc]
        else:
            n = ctx.fresh("__p")
            e = ctx.fresh("__p")
            inner_specs.append(AggSpec(foreach[spec.fn], src, n))
            unnest_extra.append((n, e))
            outer_specs.append(
                AggSpec(REAGGREGATE[spec.fn], e, spec.alias))
    inner = Aggregate(tuple(sorted(set(scalar_keys) | {a1_src})),
                      tuple(inner_specs), mu.child)
    mid = ArrayJoin(((a1_src, a1),) + tuple(unnest_extra), inner)
    outer = Aggregate(sub.keys, tuple(outer_specs), mid)
    out_cols = set(sub.keys) | {s.alias for s in sub.aggs}
    return _finish(outer, out_cols, finishers, drop)


@_rule("R20", "cost", "pre-aggregate below arrayJoin (alias-independent)")
def r20(sub, ctx):
    if not (isinstance(sub, Aggregate) and isinstance(sub.child, ArrayJoin)):
        return None
    mu = sub.child
    als = _aliases(mu.targets)
    if not sub.aggs or set(sub.keys) & als or {s.arg for s in sub.aggs} & als:
        return None
    if not {s.fn for s in sub.aggs} <= {"min", "max", "sum", "count", "avg"}:
        return None
    split = _partial_final_specs(sub.aggs, ctx.fresh)
    if split is None:
        return None
    inner_specs, outer_specs, finishers, drop = split
    srcs = tuple(sorted(_sources(mu.targets)))
    inner = Aggregate(tuple(sorted(set(sub.keys) | set(srcs))),
                      tuple(inner_specs), mu.child)
    mid = ArrayJoin(mu.targets, inner)
    outer = Aggregate(sub.keys, tuple(outer_specs), mid)
    out_cols = set(sub.keys) | {s.alias for s in sub.aggs}
    return _finish(outer, out_cols, finishers, drop)


############################################################
# engine
############################################################

def try_apply(rule: Rule, root: Term, path: tuple, ctx: RuleContext
              ) -> Optional[Term]:
    """Apply `rule` at `path`, verifying schema preservation.

    Returns the rewritten root, or None when the rule doesn't match there.
    """
    ctx.bind_root(root)
    sub = subterm_at(root, path)
    new_sub = rule.fn(sub, ctx)
    if new_sub is None or new_sub == sub:
        return None
    before = ctx.schema_of(sub)
    after = ctx.schema_of(new_sub)
    if before != after:
        raise RewriteError(
            f"{rule.rule_id} changed the schema at {path}: "
            f"{sorted(before.columns)} -> {sorted(after.columns)}")
    return replace_at(root, path, new_sub)


def applicable(root: Term, ctx: RuleContext, kinds=("rule", "cost")
               ) -> Iterator[tuple]:
    """Yield (rule, path) pairs that fire somewhere in `root`."""
    ctx.bind_root(root)
    for path, sub in walk(root):
        for rule in CATALOG:
            if rule.kind not in kinds:
                continue
            try:
                new_sub = rule.fn(sub, ctx)
            except SchemaError:
                continue
            if new_sub is not None and new_sub != sub:
                yield rule, path


def guard_cost_improves(rule: Rule, root: Term, path: tuple, ctx: RuleContext,
                        cost_model, epsilon: float = 1e-9) -> Optional[Term]:
    """Apply a cost-based rule only when it strictly lowers term_cost."""
    new_root = try_apply(rule, root, path, ctx)
    if new_root is None:
        return None
    old_cost = cost_model.term_cost(root).cost
    new_cost = cost_model.term_cost(new_root).cost
    if new_cost < old_cost - epsilon:
        return new_root
    return None
