"""Relational algebra over array-valued attributes: terms and interpreter.

Relations carry two column kinds, scalar and array.  Arrays are tuples whose
elements are scalars (possibly null); an array itself is never null.  The
interpreter runs in bag semantics by default; ``mode="set"`` deduplicates
after every operator.

Operators
---------
RelVar        base relation reference
Filter        sigma: keep rows satisfying a predicate
Project       pi: keep a subset of columns
Join          natural inner join on all shared column names
ArrayJoin     mu: unnest one or more equal-length arrays, one output row per
              index; sources are consumed, aliases become scalar columns
ArrayFilter   phi: coordinated element filter over equal-length arrays; the
              predicate sees only the element aliases; sources are consumed
              and aliases become the filtered arrays
Derive        delta: add/overwrite one column from a scalar function; with
              is_map=True the function is mapped over array arguments
              (scalar arguments broadcast) producing a new array
Aggregate     gamma: group by key columns, apply aggregates; an empty input
              yields an empty output even with no keys

Null/equality conventions live in `functions` and `predicates`; join and
group keys treat null as equal to null.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping, Optional, Union

from .functions import (
    FunctionError,
    ScalarFn,
    agg_output_kind,
    apply_agg,
    apply_scalar,
    fn_output_kind,
    is_array,
    known_agg_fn,
    known_scalar_fn,
    scalar_fn_arity,
)
from .predicates import Pred, PredicateError, eval_pred, format_pred, pred_columns


class A3DError(Exception):
    """Base class for anything this package raises on purpose."""


class SchemaError(A3DError):
    """Term or data inconsistent with declared schemas."""


class EvalError(A3DError):
    """Runtime failure: length mismatch, bad comparison, unknown function."""


############################################################
# schemas and relations
############################################################

@dataclass(frozen=True)
class Schema:
    scalars: frozenset
    arrays: frozenset

    def __post_init__(self):
        overlap = self.scalars & self.arrays
        if overlap:
            raise SchemaError(f"columns both scalar and array: {sorted(overlap)}")

    @staticmethod
    def of(scalars=(), arrays=()) -> "Schema":
        return Schema(frozenset(scalars), frozenset(arrays))

    @property
    def columns(self) -> frozenset:
        return self.scalars | self.arrays

    def kind(self, col: str) -> str:
        if col in self.scalars:
            return "scalar"
        if col in self.arrays:
            return "array"
        raise SchemaError(f"unknown column {col!r}")

    def drop(self, cols) -> "Schema":
        cols = frozenset(cols)
        return Schema(self.scalars - cols, self.arrays - cols)

    def add(self, col: str, kind: str) -> "Schema":
        """Add or overwrite a column with the given kind."""
        base = self.drop((col,))
        if kind == "scalar":
            return Schema(base.scalars | {col}, base.arrays)
        return Schema(base.scalars, base.arrays | {col})


def _valid_scalar(v) -> bool:
    return v is None or isinstance(v, (int, float, str, bool))


@dataclass(frozen=True)
class Relation:
    schema: Schema
    rows: tuple  # of dict

    @staticmethod
    def build(schema: Schema, rows) -> "Relation":
        """Validating constructor; copies rows."""
        cols = schema.columns
        out = []
        for i, r in enumerate(rows):
            if set(r) != cols:
                raise SchemaError(
                    f"row {i}: columns {sorted(r)} != schema {sorted(cols)}")
            for c in schema.scalars:
                if not _valid_scalar(r[c]):
                    raise SchemaError(f"row {i}: column {c!r} not a scalar")
            for c in schema.arrays:
                v = r[c]
                if not isinstance(v, tuple) or not all(_valid_scalar(e) for e in v):
                    raise SchemaError(f"row {i}: column {c!r} not an array")
            out.append(dict(r))
        return Relation(schema, tuple(out))

    def __len__(self) -> int:
        return len(self.rows)


############################################################
# terms
############################################################

@dataclass(frozen=True)
class RelVar:
    name: str


@dataclass(frozen=True)
class Filter:
    pred: Pred
    child: "Term"


@dataclass(frozen=True)
class Project:
    cols: tuple
    child: "Term"


@dataclass(frozen=True)
class Join:
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class ArrayJoin:
    targets: tuple  # of (source, alias)
    child: "Term"


@dataclass(frozen=True)
class ArrayFilter:
    targets: tuple  # of (source, alias)
    pred: Pred
    child: "Term"


@dataclass(frozen=True)
class Derive:
    output: str
    fn: ScalarFn
    args: tuple  # of column names
    child: "Term"
    is_map: bool = False


@dataclass(frozen=True)
class AggSpec:
    fn: str
    arg: str
    alias: str


@dataclass(frozen=True)
class Aggregate:
    keys: tuple
    aggs: tuple  # of AggSpec
    child: "Term"


Term = Union[RelVar, Filter, Project, Join, ArrayJoin, ArrayFilter, Derive,
             Aggregate]

UNARY_TYPES = (Filter, Project, ArrayJoin, ArrayFilter, Derive, Aggregate)


############################################################
# generic tree plumbing
############################################################

def children(term: Term) -> tuple:
    if isinstance(term, RelVar):
        return ()
    if isinstance(term, Join):
        return (term.left, term.right)
    return (term.child,)


def with_children(term: Term, kids: tuple) -> Term:
    if isinstance(term, RelVar):
        if kids:
            raise SchemaError("RelVar takes no children")
        return term
    if isinstance(term, Join):
        return Join(kids[0], kids[1])
    if isinstance(term, Filter):
        return Filter(term.pred, kids[0])
    if isinstance(term, Project):
        return Project(term.cols, kids[0])
    if isinstance(term, ArrayJoin):
        return ArrayJoin(term.targets, kids[0])
    if isinstance(term, ArrayFilter):
        return ArrayFilter(term.targets, term.pred, kids[0])
    if isinstance(term, Derive):
        return Derive(term.output, term.fn, term.args, kids[0], term.is_map)
    if isinstance(term, Aggregate):
        return Aggregate(term.keys, term.aggs, kids[0])
    raise SchemaError(f"not a term: {term!r}")


def walk(term: Term, path=()) -> Iterator[tuple]:
    """Preorder traversal yielding (path, subterm)."""
    yield path, term
    for i, kid in enumerate(children(term)):
        yield from walk(kid, path + (i,))


def subterm_at(term: Term, path: tuple) -> Term:
    node = term
    for i in path:
        node = children(node)[i]
    return node


def replace_at(term: Term, path: tuple, new: Term) -> Term:
    if not path:
        return new
    kids = list(children(term))
    kids[path[0]] = replace_at(kids[path[0]], path[1:], new)
    return with_children(term, tuple(kids))


def base_relations(term: Term) -> tuple:
    """RelVar names in left-to-right order (duplicates preserved)."""
    if isinstance(term, RelVar):
        return (term.name,)
    out: tuple = ()
    for kid in children(term):
        out += base_relations(kid)
    return out


############################################################
# schema inference
############################################################

def _check_targets(targets, schema: Schema, what: str):
    if not targets:
        raise SchemaError(f"{what} needs at least one target")
    sources = [s for s, _ in targets]
    aliases = [a for _, a in targets]
    if len(set(sources)) != len(sources):
        raise SchemaError(f"{what}: duplicate source")
    if len(set(aliases)) != len(aliases):
        raise SchemaError(f"{what}: duplicate alias")
    for s in sources:
        if s not in schema.arrays:
            raise SchemaError(f"{what}: source {s!r} is not an array column")
    survivors = schema.columns - set(sources)
    for a in aliases:
        if a in survivors and a not in sources:
            raise SchemaError(f"{what}: alias {a!r} shadows an unrelated column")


def output_schema(term: Term, catalog: Mapping[str, Schema]) -> Schema:
    """Infer the output schema, raising SchemaError on any inconsistency."""
    if isinstance(term, RelVar):
        if term.name not in catalog:
            raise SchemaError(f"unknown relation {term.name!r}")
        return catalog[term.name]

    if isinstance(term, Filter):
        inner = output_schema(term.child, catalog)
        missing = pred_columns(term.pred) - inner.columns
        if missing:
            raise SchemaError(f"filter references {sorted(missing)}")
        return inner

    if isinstance(term, Project):
        inner = output_schema(term.child, catalog)
        if len(set(term.cols)) != len(term.cols):
            raise SchemaError("project: duplicate column")
        for c in term.cols:
            if c not in inner.columns:
                raise SchemaError(f"project: unknown column {c!r}")
        keep = frozenset(term.cols)
        return Schema(inner.scalars & keep, inner.arrays & keep)

    if isinstance(term, Join):
        left = output_schema(term.left, catalog)
        right = output_schema(term.right, catalog)
        for c in left.columns & right.columns:
            if left.kind(c) != right.kind(c):
                raise SchemaError(f"join column {c!r} has mixed kinds")
        return Schema(left.scalars | right.scalars, left.arrays | right.arrays)

    if isinstance(term, ArrayJoin):
        inner = output_schema(term.child, catalog)
        _check_targets(term.targets, inner, "arrayJoin")
        out = inner.drop(s for s, _ in term.targets)
        for _, a in term.targets:
            out = out.add(a, "scalar")
        return out

    if isinstance(term, ArrayFilter):
        inner = output_schema(term.child, catalog)
        _check_targets(term.targets, inner, "arrayFilter")
        aliases = {a for _, a in term.targets}
        stray = pred_columns(term.pred) - aliases
        if stray:
            raise SchemaError(
                f"arrayFilter predicate may only use element aliases; got {sorted(stray)}")
        out = inner.drop(s for s, _ in term.targets)
        for _, a in term.targets:
            out = out.add(a, "array")
        return out

    if isinstance(term, Derive):
        inner = output_schema(term.child, catalog)
        if not known_scalar_fn(term.fn.name):
            raise SchemaError(f"unknown function {term.fn.name!r}")
        if len(term.args) != scalar_fn_arity(term.fn.name):
            raise SchemaError(f"{term.fn.name}: wrong arity")
        kinds = []
        for c in term.args:
            if c not in inner.columns:
                raise SchemaError(f"derive references unknown column {c!r}")
            kinds.append(inner.kind(c))
        if term.is_map:
            if "array" not in kinds:
                raise SchemaError("map derive needs at least one array argument")
            return inner.add(term.output, "array")
        return inner.add(term.output, fn_output_kind(term.fn, kinds))

    if isinstance(term, Aggregate):
        inner = output_schema(term.child, catalog)
        if len(set(term.keys)) != len(term.keys):
            raise SchemaError("aggregate: duplicate key")
        out = Schema.of()
        for k in term.keys:
            out = out.add(k, inner.kind(k))
        aliases = set()
        for spec in term.aggs:
            if not known_agg_fn(spec.fn):
                raise SchemaError(f"unknown aggregate {spec.fn!r}")
            if spec.arg not in inner.columns:
                raise SchemaError(f"aggregate references unknown column {spec.arg!r}")
            if spec.fn.endswith("ForEach") and inner.kind(spec.arg) != "array":
                raise SchemaError(f"{spec.fn} needs an array column")
            if spec.alias in aliases or spec.alias in term.keys:
                raise SchemaError(f"aggregate alias {spec.alias!r} collides")
            aliases.add(spec.alias)
            out = out.add(spec.alias, agg_output_kind(spec.fn))
        return out

    raise SchemaError(f"not a term: {term!r}")


############################################################
# interpreter
############################################################

def _row_key(row: dict) -> tuple:
    return tuple(sorted(((c, repr(v)) for c, v in row.items())))


def _dedupe(rows: list) -> list:
    seen = set()
    out = []
    for r in rows:
        k = _row_key(r)
        if k not in seen:
            seen.add(k)
            out.append(r)
    return out


def _eval_join(left_rows, right_rows, shared) -> list:
    index: dict = {}
    for rr in right_rows:
        index.setdefault(tuple(rr[c] for c in shared), []).append(rr)
    out = []
    for lr in left_rows:
        for rr in index.get(tuple(lr[c] for c in shared), ()):
            merged = dict(lr)
            merged.update(rr)
            out.append(merged)
    return out


def _eval_array_join(term: ArrayJoin, rows) -> list:
    sources = tuple(s for s, _ in term.targets)
    drop = set(sources) | {a for _, a in term.targets}
    out = []
    for r in rows:
        length = len(r[sources[0]])
        for s in sources[1:]:
            if len(r[s]) != length:
                raise EvalError(
                    f"arrayJoin over {s!r}: length {len(r[s])} != {length}")
        base = {c: v for c, v in r.items() if c not in drop}
        for j in range(length):
            new = dict(base)
            for s, a in term.targets:
                new[a] = r[s][j]
            out.append(new)
    return out


def _eval_array_filter(term: ArrayFilter, rows) -> list:
    sources = tuple(s for s, _ in term.targets)
    drop = set(sources) | {a for _, a in term.targets}
    out = []
    for r in rows:
        length = len(r[sources[0]])
        for s in sources[1:]:
            if len(r[s]) != length:
                raise EvalError(
                    f"arrayFilter over {s!r}: length {len(r[s])} != {length}")
        keep = []
        for j in range(length):
            binding = {a: r[s][j] for s, a in term.targets}
            if eval_pred(term.pred, binding):
                keep.append(j)
        new = {c: v for c, v in r.items() if c not in drop}
        for s, a in term.targets:
            new[a] = tuple(r[s][j] for j in keep)
        out.append(new)
    return out


def _eval_derive(term: Derive, rows, arg_is_array) -> list:
    out = []
    for r in rows:
        args = [r[c] for c in term.args]
        new = dict(r)
        if term.is_map:
            arr_args = [a for a, is_arr in zip(args, arg_is_array) if is_arr]
            length = len(arr_args[0])
            for a in arr_args[1:]:
                if len(a) != length:
                    raise EvalError("map derive: array length mismatch")
            mapped = []
            for j in range(length):
                point = [a[j] if is_arr else a
                         for a, is_arr in zip(args, arg_is_array)]
                mapped.append(apply_scalar(term.fn, point))
            new[term.output] = tuple(mapped)
        else:
            new[term.output] = apply_scalar(term.fn, args)
        out.append(new)
    return out


def _eval_aggregate(term: Aggregate, rows) -> list:
    if not rows:
        return []
    groups: dict = {}
    for r in rows:
        k = tuple(r[c] for c in term.keys)
        groups.setdefault(k, []).append(r)
    out = []
    for k, members in groups.items():
        new = dict(zip(term.keys, k))
        for spec in term.aggs:
            new[spec.alias] = apply_agg(spec.fn, [m[spec.arg] for m in members])
        out.append(new)
    return out


def evaluate(term: Term, db: Mapping[str, Relation], mode: str = "bag") -> Relation:
    """Run the interpreter.  Returns a Relation with the inferred schema."""
    if mode not in ("bag", "set"):
        raise EvalError(f"unknown mode {mode!r}")
    catalog = {name: rel.schema for name, rel in db.items()}
    schema = output_schema(term, catalog)  # fail fast on schema problems

    def run(t: Term) -> list:
        if isinstance(t, RelVar):
            rows = [dict(r) for r in db[t.name].rows]
        elif isinstance(t, Filter):
            try:
                rows = [r for r in run(t.child) if eval_pred(t.pred, r)]
            except (FunctionError, PredicateError) as exc:
                raise EvalError(str(exc)) from None
        elif isinstance(t, Project):
            keep = t.cols
            rows = [{c: r[c] for c in keep} for r in run(t.child)]
        elif isinstance(t, Join):
            lsch = output_schema(t.left, catalog)
            rsch = output_schema(t.right, catalog)
            shared = sorted(lsch.columns & rsch.columns)
            rows = _eval_join(run(t.left), run(t.right), shared)
        elif isinstance(t, ArrayJoin):
            rows = _eval_array_join(t, run(t.child))
        elif isinstance(t, ArrayFilter):
            try:
                rows = _eval_array_filter(t, run(t.child))
            except (FunctionError, PredicateError) as exc:
                raise EvalError(str(exc)) from None
        elif isinstance(t, Derive):
            sch = output_schema(t.child, catalog)
            arg_is_array = [sch.kind(c) == "array" for c in t.args]
            try:
                rows = _eval_derive(t, run(t.child), arg_is_array)
            except FunctionError as exc:
                raise EvalError(str(exc)) from None
        elif isinstance(t, Aggregate):
            try:
                rows = _eval_aggregate(t, run(t.child))
            except FunctionError as exc:
                raise EvalError(str(exc)) from None
        else:
            raise EvalError(f"not a term: {t!r}")
        if mode == "set":
            rows = _dedupe(rows)
        return rows

    return Relation(schema, tuple(run(term)))


def relations_equal(a: Relation, b: Relation, mode: str = "bag") -> bool:
    """Compare two relations as multisets (or sets) of rows."""
    if a.schema != b.schema:
        return False
    if mode == "set":
        return set(map(_row_key, a.rows)) == set(map(_row_key, b.rows))
    bag_a: dict = {}
    bag_b: dict = {}
    for r in a.rows:
        k = _row_key(r)
        bag_a[k] = bag_a.get(k, 0) + 1
    for r in b.rows:
        k = _row_key(r)
        bag_b[k] = bag_b.get(k, 0) + 1
    return bag_a == bag_b


############################################################
# debug rendering
############################################################

def format_term(term: Term, indent: int = 0) -> str:
    """Multi-line, operator-symbol rendering (for traces and debugging)."""
    pad = "  " * indent
    if isinstance(term, RelVar):
        return f"{pad}{term.name}"
    if isinstance(term, Filter):
        head = f"{pad}sigma[{format_pred(term.pred)}]"
    elif isinstance(term, Project):
        head = f"{pad}pi[{', '.join(term.cols)}]"
    elif isinstance(term, Join):
        return (f"{pad}join\n{format_term(term.left, indent + 1)}\n"
                f"{format_term(term.right, indent + 1)}")
    elif isinstance(term, ArrayJoin):
        tt = ", ".join(f"{s}:{a}" for s, a in term.targets)
        head = f"{pad}mu[{tt}]"
    elif isinstance(term, ArrayFilter):
        tt = ", ".join(f"{s}:{a}" for s, a in term.targets)
        head = f"{pad}phi[{tt} | {format_pred(term.pred)}]"
    elif isinstance(term, Derive):
        fn = term.fn.name
        if term.fn.params:
            fn += "[" + ",".join(f"{k}={v!r}" for k, v in term.fn.params) + "]"
        star = "map " if term.is_map else ""
        head = f"{pad}delta[{term.output} = {star}{fn}({', '.join(term.args)})]"
    elif isinstance(term, Aggregate):
        aa = ", ".join(f"{s.fn}({s.arg}):{s.alias}" for s in term.aggs)
        head = f"{pad}gamma[{', '.join(term.keys)} | {aa}]"
    else:
        return f"{pad}{term!r}"
    return head + "\n" + format_term(term.child, indent + 1)
