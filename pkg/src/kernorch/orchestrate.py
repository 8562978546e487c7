"""Optimal kernel selection as a 0-1 program.

A selection ``u`` over candidate kernels is feasible when every required
graph output is materialized by some selected kernel and every input
primitive of a selected kernel is materialized by some selected kernel.
The objective is the plain sum of selected kernel costs, so a primitive
may be recomputed inside several kernels when that is cheaper.

Costs are compared exactly: every float cost is converted to an integer
multiple of a common power-of-two unit, so both solvers agree on ties and
break them by the smallest selection bitset (bit ``i`` = candidate ``i``).
"""

from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Any, Sequence

import numpy as np

from .errors import Infeasible, SolverTimeout
from .graph_ir import Graph
from .identify import CandidateKernel, DagIndex, bits
from .schedule import Stuck, order_kernels

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 300.0
EXHAUSTIVE_MAX_M = 25
# open-list size at which best-first search gives up like a timeout
MAX_OPEN_NODES = 2_000_000


@dataclass(frozen=True)
class Cut:
    """Forbid selecting all of ``forbidden`` unless one of ``unless`` is selected too."""

    forbidden: tuple[int, ...]
    unless: tuple[int, ...] = ()

    def violated(self, selected: set[int] | frozenset[int]) -> bool:
        return all(i in selected for i in self.forbidden) and not any(j in selected for j in self.unless)


@dataclass(frozen=True)
class BlpInstance:
    """Candidate costs plus input (I) and output (O) incidence rows as bitsets.

    Bit ``j`` of a row refers to primitive ``prim_ids[j]``. ``members`` rows
    record every primitive a kernel computes and feed the execution counts.
    """

    costs: tuple[float, ...]
    inputs: tuple[int, ...]
    outputs: tuple[int, ...]
    members: tuple[int, ...]
    required: int
    prim_ids: tuple[int, ...]
    cuts: tuple[Cut, ...] = ()
    # direct predecessor bitsets of each primitive; only used for bounding
    preds: tuple[int, ...] = ()

    @property
    def m(self) -> int:
        return len(self.costs)

    def with_cut(self, cut: Cut) -> "BlpInstance":
        return replace(self, cuts=self.cuts + (cut,))

    def _matrix(self, rows: Sequence[int]) -> np.ndarray:
        mat = np.zeros((self.m, len(self.prim_ids)), dtype=np.int64)
        for i, row in enumerate(rows):
            mat[i, bits(row)] = 1
        return mat

    def input_matrix(self) -> np.ndarray:
        return self._matrix(self.inputs)

    def output_matrix(self) -> np.ndarray:
        return self._matrix(self.outputs)

    def required_vector(self) -> np.ndarray:
        t = np.zeros(len(self.prim_ids), dtype=bool)
        t[bits(self.required)] = True
        return t


def build_blp(g: Graph | DagIndex, kernels: Sequence[CandidateKernel]) -> BlpInstance:
    """Instance over priced kernels; ``kernels[i].id`` must equal ``i``."""
    dag = g if isinstance(g, DagIndex) else DagIndex.from_graph(g)
    for i, k in enumerate(kernels):
        if k.id != i:
            raise ValueError(f"kernel at position {i} has id {k.id}; ids must be dense")
        if k.cost_us is None:
            raise ValueError(f"kernel {i} has no cost")
        if not k.output_set:
            raise ValueError(f"kernel {i} has an empty output set")
    outputs = tuple(dag.mask(k.output_set) for k in kernels)
    inputs = tuple(dag.mask(k.input_primitives) for k in kernels)
    members = tuple(dag.mask(k.members) for k in kernels)
    covered = 0
    for o in outputs:
        covered |= o
    missing = dag.outputs & ~covered
    if missing:
        raise Infeasible(f"no candidate kernel produces graph output(s) {list(dag.members(missing))}")
    costs = tuple(float(k.cost_us) for k in kernels)
    return BlpInstance(costs, inputs, outputs, members, dag.outputs, dag.ids, preds=dag.preds)


@dataclass(frozen=True)
class OrchestrationStrategy:
    selected: tuple[int, ...]
    total_cost: float
    execution_counts: dict[int, int] = field(default_factory=dict)
    optimal: bool = True
    cuts_applied: int = 0

    def to_json(self) -> dict[str, Any]:
        return {
            "selected": list(self.selected),
            "total_cost_us": self.total_cost,
            "execution_counts": {str(k): v for k, v in sorted(self.execution_counts.items())},
            "optimal": self.optimal,
            "cuts_applied": self.cuts_applied,
        }


def make_strategy(inst: BlpInstance, selected, optimal: bool = True, cuts_applied: int = 0) -> OrchestrationStrategy:
    sel = tuple(sorted(selected))
    counts = {p: 0 for p in inst.prim_ids}
    for i in sel:
        for b in bits(inst.members[i]):
            counts[inst.prim_ids[b]] += 1
    total = math.fsum(inst.costs[i] for i in sel)
    return OrchestrationStrategy(sel, total, counts, optimal, cuts_applied)


def verify_strategy(inst: BlpInstance, selected: Sequence[int]) -> list[str]:
    """Check the output and dependency constraints by walking dense 0/1 matrices."""
    u = np.zeros(inst.m, dtype=np.int64)
    u[list(selected)] = 1
    produced = inst.output_matrix().T @ u
    problems = []
    for j in np.flatnonzero(inst.required_vector()):
        if produced[j] < 1:
            problems.append(f"graph output {inst.prim_ids[j]} not produced")
    imat = inst.input_matrix()
    for k in np.flatnonzero(u):
        for j in np.flatnonzero(imat[k]):
            if produced[j] < imat[k, j] * u[k]:
                problems.append(f"kernel {k} input {inst.prim_ids[j]} not produced")
    chosen = set(int(i) for i in np.flatnonzero(u))
    for c in inst.cuts:
        if c.violated(chosen):
            problems.append(f"cut {list(c.forbidden)} violated")
    return problems


def _exact_costs(costs: Sequence[float]) -> list[int]:
    """Scale all costs to integers over one power-of-two denominator."""
    fracs = [Fraction(c) for c in costs]
    if any(f < 0 for f in fracs):
        raise ValueError("kernel costs must be non-negative")
    den = max((f.denominator for f in fracs), default=1)
    return [int(f * den) for f in fracs]


def _alive(inst: BlpInstance) -> list[bool]:
    """Drop kernels whose inputs no surviving kernel can produce."""
    alive = [True] * inst.m
    changed = True
    while changed:
        changed = False
        producible = 0
        for i in range(inst.m):
            if alive[i]:
                producible |= inst.outputs[i]
        for i in range(inst.m):
            if alive[i] and inst.inputs[i] & ~producible:
                alive[i] = False
                changed = True
    return alive


def _cut_masks(inst: BlpInstance) -> list[tuple[int, int]]:
    out = []
    for c in inst.cuts:
        s = sum(1 << i for i in set(c.forbidden))
        b = sum(1 << j for j in set(c.unless))
        out.append((s, b))
    return out


def _preds(inst: BlpInstance) -> list[int]:
    """Direct predecessor bitsets, or a subset recovered from single-node kernels."""
    if inst.preds:
        return list(inst.preds)
    preds = [0] * len(inst.prim_ids)
    for i in range(inst.m):
        if inst.members[i].bit_count() == 1:
            preds[inst.members[i].bit_length() - 1] |= inst.inputs[i]
    return preds


def _upstream(req: int, made: int, preds: Sequence[int]) -> int:
    """Primitives some future kernel must compute: ``req`` plus ancestors not cut off by ``made``."""
    need = req
    frontier = req
    while frontier:
        nxt = 0
        for p in bits(frontier):
            nxt |= preds[p]
        frontier = nxt & ~made & ~need
        need |= frontier
    return need


def _solve_bnb(inst: BlpInstance, timeout_s: float, max_open: int = MAX_OPEN_NODES) -> tuple[int | None, bool]:
    """Best-first branch and bound over "which kernel produces this primitive".

    A search node is a partial selection together with the primitives it
    materializes and the primitives still required. Each node branches on
    the latest required primitive (in topological order) over every kernel
    that can materialize it. Nodes are expanded in order of (lower bound,
    selection bitset), so the first complete selection popped is optimal
    and wins ties. Returns the best selection found and whether it is
    proven optimal.
    """
    deadline = time.monotonic() + timeout_s
    cost = _exact_costs(inst.costs)
    alive = _alive(inst)
    n_prims = len(inst.prim_ids)
    producers: list[list[int]] = [[] for _ in range(n_prims)]
    for i in range(inst.m):
        if alive[i]:
            for q in bits(inst.outputs[i]):
                producers[q].append(i)
    for plist in producers:
        plist.sort(key=lambda i: (cost[i], i))
    for q in bits(inst.required):
        if not producers[q]:
            raise Infeasible(f"graph output {inst.prim_ids[q]} has no usable producer")
    # Two admissible per-primitive shares. A kernel materializing q pays at
    # least cost/|outputs| for it; a kernel computing p pays at least
    # cost/|members| for it, and every unmaterialized ancestor of a pending
    # requirement must be computed by some kernel still to be chosen.
    share = [min((cost[i] // inst.outputs[i].bit_count() for i in plist), default=0) for plist in producers]
    best_member: list[int | None] = [None] * n_prims
    for i in range(inst.m):
        if alive[i]:
            per = cost[i] // inst.members[i].bit_count()
            for p in bits(inst.members[i]):
                if best_member[p] is None or per < best_member[p]:
                    best_member[p] = per
    member_share = [v or 0 for v in best_member]
    preds = _preds(inst)
    upto = [_upstream(1 << p, 0, preds) for p in range(n_prims)]
    cuts = _cut_masks(inst)
    cut_union = 0
    for s, b in cuts:
        cut_union |= s | b

    def bound(c: int, req: int, made: int) -> int:
        by_output = sum(share[q] for q in bits(req))
        by_member = sum(member_share[p] for p in bits(_upstream(req, made, preds)))
        return c + max(by_output, by_member)

    def options(sel: int, req: int) -> list[int] | None:
        """Kernels to branch on; [] for a complete selection, None for a dead end."""
        repair = None
        for s, b in cuts:
            if sel & s == s and not sel & b:
                if not b:
                    return None  # adding kernels can never repair this cut
                repair = b
        if req:
            return [i for i in producers[req.bit_length() - 1] if not sel >> i & 1]
        if repair is not None:
            return sorted((j for j in bits(repair) if alive[j] and not sel >> j & 1), key=lambda j: (cost[j], j)) or None
        return []

    def child(node, i):
        sel, c, req, made = node
        m2 = made | inst.outputs[i]
        return sel | 1 << i, c + cost[i], (req | inst.inputs[i]) & ~m2, m2

    # cheap incumbent: always take the cheapest producer
    inc: tuple[int, int] | None = None
    node = (0, 0, inst.required, 0)
    for _ in range(inst.m + 1):
        opts = options(node[0], node[2])
        if opts is None:
            break
        if not opts:
            inc = (node[1], node[0])
            break
        node = child(node, opts[0])

    def key_of(sel: int, req: int, made: int) -> tuple[int, int, int]:
        # materialized tensors that are not upstream of a requirement cannot matter any more
        reach = 0
        for q in bits(req):
            reach |= upto[q]
        return req, made & reach, sel & cut_union

    root_key = key_of(0, inst.required, 0)
    heap = [(bound(0, inst.required, 0), 0, 0, inst.required, 0)]
    # best (cost, selection) pushed per key; same key means same remaining subproblem
    best_at: dict[tuple[int, int, int], tuple[int, int]] = {root_key: (0, 0)}
    expanded: set[tuple[int, int, int]] = set()
    pops = 0
    while heap:
        pops += 1
        if pops & 255 == 0 and (time.monotonic() > deadline or len(heap) > max_open):
            return (inc[1] if inc else None), False
        lb, sel, c, req, made = heapq.heappop(heap)
        if inc is not None and (lb, sel) >= inc:
            break
        key = key_of(sel, req, made)
        if key in expanded or best_at.get(key, (c, sel)) < (c, sel):
            continue
        expanded.add(key)
        opts = options(sel, req)
        if opts is None:
            continue
        if not opts:
            return sel, True
        for i in opts:
            nsel, nc, nreq, nmade = child((sel, c, req, made), i)
            nkey = key_of(nsel, nreq, nmade)
            if nkey in expanded:
                continue
            prev = best_at.get(nkey)
            if prev is not None and prev <= (nc, nsel):
                continue
            nlb = bound(nc, nreq, nmade)
            if inc is None or (nlb, nsel) < inc:
                best_at[nkey] = (nc, nsel)
                heapq.heappush(heap, (nlb, nsel, nc, nreq, nmade))
    if inc is None:
        raise Infeasible("no selection satisfies the output, dependency and cut constraints")
    return inc[1], True


def _words(mask: int, w: int) -> list[int]:
    return [(mask >> (64 * k)) & ((1 << 64) - 1) for k in range(w)]


def _solve_exhaustive(inst: BlpInstance) -> int:
    """Score all 2^M selections with numpy, then settle near-ties exactly."""
    m = inst.m
    if m > EXHAUSTIVE_MAX_M:
        raise ValueError(f"exhaustive solving supports at most {EXHAUSTIVE_MAX_M} candidates, got {m}")
    w = max(1, (len(inst.prim_ids) + 63) // 64)
    low_bits = min(m, 20)

    def tables(idx: Sequence[int]):
        prod = np.zeros((1, w), dtype=np.uint64)
        need = np.zeros((1, w), dtype=np.uint64)
        cost = np.zeros(1)
        for i in idx:
            o = np.array(_words(inst.outputs[i], w), dtype=np.uint64)
            r = np.array(_words(inst.inputs[i], w), dtype=np.uint64)
            prod = np.concatenate([prod, prod | o])
            need = np.concatenate([need, need | r])
            cost = np.concatenate([cost, cost + inst.costs[i]])
        return prod, need, cost

    lo_prod, lo_need, lo_cost = tables(range(low_bits))
    hi_prod, hi_need, hi_cost = tables(range(low_bits, m))
    required = np.array(_words(inst.required, w), dtype=np.uint64)
    low_sel = np.arange(1 << low_bits, dtype=np.uint64)
    cuts = _cut_masks(inst)

    best = math.inf
    shortlist: list[tuple[float, int]] = []
    for h in range(1 << (m - low_bits)):
        prod = lo_prod | hi_prod[h]
        need = lo_need | hi_need[h] | required
        ok = np.all((need & ~prod) == 0, axis=1)
        if cuts:
            sel = low_sel | np.uint64(h << low_bits)
            for s, b in cuts:
                hit = (sel & np.uint64(s)) == np.uint64(s)
                if b:
                    hit &= (sel & np.uint64(b)) == 0
                ok &= ~hit
        if not ok.any():
            continue
        cost = lo_cost + hi_cost[h]
        cmin = float(cost[ok].min())
        best = min(best, cmin)
        tol = 1e-9 * max(1.0, abs(best))
        near = np.flatnonzero(ok & (cost <= best + tol))
        shortlist.extend((float(cost[j]), (h << low_bits) | int(j)) for j in near)
        shortlist = [(c, s) for c, s in shortlist if c <= best + tol]
    if not shortlist:
        raise Infeasible("no selection satisfies the output, dependency and cut constraints")
    exact = _exact_costs(inst.costs)
    return min((sum(exact[i] for i in bits(s)), s) for _, s in shortlist)[1]


def solve(inst: BlpInstance, mode: str = "bnb", timeout_s: float = DEFAULT_TIMEOUT_S) -> OrchestrationStrategy:
    """Minimum-cost feasible selection, smallest selection bitset on ties."""
    if mode == "exhaustive":
        sel, optimal = _solve_exhaustive(inst), True
    elif mode == "bnb":
        sel, optimal = _solve_bnb(inst, timeout_s)
        if sel is None:
            raise SolverTimeout(timeout_s)
    else:
        raise ValueError(f"unknown solver mode {mode!r}")
    return make_strategy(inst, bits(sel), optimal)


@dataclass(frozen=True)
class Schedulable:
    order: tuple[int, ...]


def validate_and_cut(
    g: Graph, inst: BlpInstance, kernels: Sequence[CandidateKernel], strategy: OrchestrationStrategy
) -> Schedulable | Cut:
    """Order the selected kernels, or return a cut that excludes the stuck pattern.

    The cut forbids the stuck kernels together unless a kernel outside them
    supplies one of their missing inputs, which keeps it valid for every
    selection, not only the current one.
    """
    chosen = [kernels[i] for i in strategy.selected]
    result = order_kernels(g, chosen)
    if not isinstance(result, Stuck):
        return Schedulable(tuple(k.id for k in result.kernels))
    stuck = set(result.kernels)
    made: set[int] = set()
    for k in chosen:
        if k.id not in stuck:
            made.update(k.output_set)
    missing: set[int] = set()
    for i in stuck:
        missing.update(p for p in kernels[i].input_primitives if p not in made)
    unless = tuple(k.id for k in kernels if k.id not in stuck and missing.intersection(k.output_set))
    return Cut(tuple(sorted(stuck)), unless)


def optimize(
    g: Graph,
    kernels: Sequence[CandidateKernel],
    mode: str = "bnb",
    timeout_s: float = DEFAULT_TIMEOUT_S,
    inst: BlpInstance | None = None,
) -> tuple[OrchestrationStrategy, BlpInstance]:
    """Solve, check schedulability, add a cut if needed, and repeat."""
    inst = inst or build_blp(g, kernels)
    deadline = time.monotonic() + timeout_s
    cuts = 0
    while True:
        remaining = max(0.0, deadline - time.monotonic())
        strategy = solve(inst, mode, remaining)
        verdict = validate_and_cut(g, inst, kernels, strategy)
        if isinstance(verdict, Schedulable):
            return replace(strategy, cuts_applied=cuts), inst
        log.info("selection %s is not schedulable; adding cut %s", strategy.selected, verdict)
        inst = inst.with_cut(verdict)
        cuts += 1
