"""Rank-based operator scheduling under series-parallel precedence.

Every rankable operator gets a rank (1 - selectivity) / per-tuple-cost; for
element-level operators the horizontal selectivity refines ties.  Sequencing
independent operators in descending rank order minimizes the cost model's
sequence cost; precedence chains that invert ranks are fused into blocks
whose aggregate rank decides their position (the classical series-parallel
scheduling construction), which stays optimal for series-parallel orders.
"""

from dataclasses import dataclass

from .decompose import RankableOp
from .precedence import PrecedenceGraph, sp_tree

_ROW_LEVEL = ("filter", "aggregate")


def tier(op: RankableOp) -> int:
    """Row-level operators (filter/aggregate) go before array-level ones."""
    return 0 if op.kind in _ROW_LEVEL else 1


def vrank(op: RankableOp) -> float:
    """Vertical rank (1 - row selectivity) / per-row cost; the block
    algebra's ordering key."""
    c = max(op.profile.c_t, 1e-12)
    return (1.0 - op.profile.s_row) / c


def hrank(op: RankableOp) -> float:
    """Horizontal rank for element-level operators; 0 for row-level ones."""
    c = max(op.profile.c_t, 1e-12)
    if op.kind == "arrayFilter":
        return (1.0 - op.profile.h_sel) / c
    if op.kind == "arrayJoin":
        return (1.0 - op.profile.s_row) / c
    return 0.0


def rank(op: RankableOp) -> float:
    """The composite rank: row selectivity for row-level operators,
    element selectivity for array-level ones."""
    return vrank(op) if tier(op) == 0 else hrank(op)


def sort_key(op: RankableOp) -> tuple:
    return (-vrank(op), tier(op), -hrank(op), op.idx)


def leq(i: RankableOp, j: RankableOp) -> bool:
    """The scheduling preference: may i run before j at no extra cost?"""
    return sort_key(i) <= sort_key(j)


############################################################
# block algebra
############################################################

@dataclass(frozen=True)
class _Block:
    ops: tuple      # RankableOp, already internally ordered
    s: float        # product of row selectivities
    c: float        # expected cost per input row of running the whole block

    @property
    def brank(self) -> float:
        return (1.0 - self.s) / max(self.c, 1e-12)

    def key(self) -> tuple:
        first = self.ops[0]
        return (-self.brank, tier(first), -hrank(first),
                min(o.idx for o in self.ops))


def _block(op: RankableOp) -> _Block:
    return _Block((op,), op.profile.s_row, op.profile.c_t)


def _fuse(a: _Block, b: _Block) -> _Block:
    return _Block(a.ops + b.ops, a.s * b.s, a.c + a.s * b.c)


def _normalize(blocks: list) -> list:
    """Fuse adjacent rank inversions so the chain has descending ranks."""
    out: list = []
    for blk in blocks:
        out.append(blk)
        while len(out) >= 2 and out[-2].key() > out[-1].key():
            hi = out.pop()
            out[-1] = _fuse(out[-1], hi)
    return out


def _merge(a: list, b: list) -> list:
    """Merge two descending block chains, stable on the block key."""
    out = []
    i = j = 0
    while i < len(a) and j < len(b):
        if a[i].key() <= b[j].key():
            out.append(a[i])
            i += 1
        else:
            out.append(b[j])
            j += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return out


def _schedule(tree, ops) -> list:
    shape = tree[0]
    if shape == "leaf":
        return [_block(ops[tree[1]])]
    parts = [_schedule(t, ops) for t in tree[1]]
    if shape == "series":
        chain: list = []
        for part in parts:
            chain.extend(part)
        return _normalize(chain)
    merged = parts[0]
    for part in parts[1:]:
        merged = _merge(merged, part)
    return merged


def sort_ops(ops, graph: PrecedenceGraph) -> list:
    """Order all operators by rank under the precedence graph.

    Returns RankableOps in execution order; optimal for the sequence cost
    among precedence-respecting orders.
    """
    if not ops:
        return []
    blocks = _schedule(sp_tree(graph), {op.idx: op for op in ops})
    out = []
    for blk in blocks:
        out.extend(blk.ops)
    return out


############################################################
# sequence costing (shared by tests and enumeration diagnostics)
############################################################

def sequence_cost(cost_model, state, nodes) -> float:
    """Cost of applying unary operator nodes in order over `state`."""
    total = 0.0
    for node in nodes:
        cost, state = cost_model.op_effect(node, state)
        total += cost
    return total
