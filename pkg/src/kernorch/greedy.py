"""Rule-based fuse-until-blocked baseline with no recomputation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

from .cost import CostModelConfig, ProfileTable, Rejected, classify, estimate_cost
from .errors import Infeasible
from .graph_ir import LINEAR, Graph
from .identify import DEFAULT_MAX_KERNEL_PRIMITIVES, CandidateKernel, DagIndex, bits, is_convex_mask, make_kernel
from .orchestrate import OrchestrationStrategy
from .schedule import Stuck, order_kernels


@dataclass(frozen=True)
class GreedyResult:
    kernels: tuple[CandidateKernel, ...]
    strategy: OrchestrationStrategy


def _grow(g: Graph, dag: DagIndex, start: int, free: int, limit: int) -> int:
    """Absorb consumers in topological order while the region stays convex."""
    region = 1 << start
    rejected = 0
    while True:
        frontier = 0
        for i in bits(region):
            frontier |= dag.succs[i]
        frontier &= free & ~region & ~rejected
        added = False
        for c in bits(frontier):
            kind = g.node(dag.ids[c]).kind
            if kind in LINEAR or kind == "opaque" or region.bit_count() >= limit:
                rejected |= 1 << c
                continue
            if is_convex_mask(dag, region | 1 << c):
                region |= 1 << c
                added = True
                break
            rejected |= 1 << c
        if not added:
            return region


def _outputs(dag: DagIndex, region: int) -> int:
    out = region & dag.outputs
    for i in bits(region):
        if dag.succs[i] & ~region:
            out |= 1 << i
    return out


def _halves(region: int) -> tuple[int, int]:
    # a topological prefix of a convex set is convex, and so is the rest
    members = bits(region)
    first = 0
    for i in members[: len(members) // 2]:
        first |= 1 << i
    return first, region & ~first


def greedy_fuse(
    g: Graph,
    config: CostModelConfig = CostModelConfig(),
    table: ProfileTable | None = None,
    max_kernel_primitives: int = DEFAULT_MAX_KERNEL_PRIMITIVES,
) -> GreedyResult:
    """Disjoint cover of the graph by greedily grown fused regions.

    Linear transforms and opaque primitives run alone. Every other node seeds
    or joins a region grown forward in topological order. Regions the cost
    model rejects are split in half until they are accepted.
    """
    dag = DagIndex.from_graph(g)
    free = dag.full
    regions: list[int] = []
    for i in range(dag.n):
        if not free >> i & 1:
            continue
        kind = g.node(dag.ids[i]).kind
        if kind in LINEAR or kind == "opaque":
            region = 1 << i
        else:
            region = _grow(g, dag, i, free, max_kernel_primitives)
        free &= ~region
        regions.append(region)

    while True:
        kernels: list[CandidateKernel] = []
        work = list(regions)
        accepted: list[int] = []
        while work:
            region = work.pop(0)
            k = make_kernel(g, len(kernels), dag.members(region), dag.members(_outputs(dag, region)))
            cost = estimate_cost(g, k, config, table)
            if isinstance(cost, Rejected):
                if region.bit_count() == 1:
                    raise Infeasible(f"cost model rejects single primitive {k.members[0]}: {cost.reason}")
                work[:0] = list(_halves(region))
                continue
            kernels.append(dataclasses.replace(k, kernel_class=classify(g, k, config), cost_us=cost))
            accepted.append(region)
        ordered = order_kernels(g, kernels)
        if not isinstance(ordered, Stuck):
            break
        # rare cross-region cycle: split the largest stuck region and retry
        stuck = [accepted[i] for i in ordered.kernels]
        worst = max(stuck, key=lambda r: (r.bit_count(), -r))
        regions = [r for r in accepted if r != worst] + list(_halves(worst))

    counts = {nid: 0 for nid in dag.ids}
    for k in kernels:
        for m in k.members:
            counts[m] += 1
    total = math.fsum(k.cost_us for k in kernels)
    strategy = OrchestrationStrategy(tuple(k.id for k in kernels), total, counts, optimal=False)
    return GreedyResult(tuple(kernels), strategy)
