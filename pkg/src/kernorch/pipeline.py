"""End-to-end driver: fission, partition, rewrite, identify, price, optimize, schedule."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .cost import CostModelConfig, ProfileTable, price_candidates
from .errors import KernorchError
from .fission import apply_fission
from .graph_ir import Graph, canonical_hash, fresh_id, merge_parts, partition, relabel
from .greedy import GreedyResult, greedy_fuse
from .identify import DEFAULT_MAX_KERNEL_PRIMITIVES, DEFAULT_STATE_CAP, CandidateKernel, identify, make_kernel
from .interpreter import Comparison, compare_maps, eval_graph, random_inputs
from .orchestrate import DEFAULT_TIMEOUT_S, BlpInstance, OrchestrationStrategy, build_blp, make_strategy, optimize
from .rewrite import search
from .schedule import Schedule, build_schedule, execute_schedule

log = logging.getLogger(__name__)


class StageError(KernorchError):
    """Wraps a failure with the name of the pipeline stage that raised it."""

    def __init__(self, stage: str, error: Exception):
        self.stage = stage
        self.error = error
        super().__init__(f"{stage}: {error}")


@dataclass(frozen=True)
class PipelineConfig:
    rewrite_depth: int = 3
    rewrite_beam: int = 8
    partition_max: int | None = None
    max_kernel_primitives: int = DEFAULT_MAX_KERNEL_PRIMITIVES
    state_cap: int = DEFAULT_STATE_CAP
    cost: CostModelConfig = field(default_factory=CostModelConfig)
    profile: ProfileTable | None = None
    solver: str = "bnb"
    timeout_s: float = DEFAULT_TIMEOUT_S
    seed: int = 0
    probes: int = 2
    verify_inputs: int = 1
    compare_greedy: bool = True

    def __post_init__(self):
        if self.rewrite_depth < 0:
            raise ValueError("rewrite_depth must be >= 0")
        if self.partition_max is not None and self.partition_max < 1:
            raise ValueError("partition_max must be >= 1")
        if self.solver not in ("bnb", "exhaustive"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")


@dataclass(frozen=True)
class PartResult:
    graph: Graph
    states: int
    subgraphs: int
    candidates: int
    kernels: tuple[CandidateKernel, ...]
    strategy: OrchestrationStrategy


@dataclass(frozen=True)
class PipelineResult:
    graph: Graph
    parts: tuple[PartResult, ...]
    kernels: tuple[CandidateKernel, ...]
    instance: BlpInstance
    strategy: OrchestrationStrategy
    schedule: Schedule
    verification: Comparison | None
    greedy: GreedyResult | None
    timings: dict[str, float]

    @property
    def states(self) -> int:
        return sum(p.states for p in self.parts)

    @property
    def candidates(self) -> int:
        return sum(p.candidates for p in self.parts)

    @property
    def greedy_ratio(self) -> float | None:
        if self.greedy is None or self.strategy.total_cost == 0:
            return None
        return self.greedy.strategy.total_cost / self.strategy.total_cost

    def summary_rows(self) -> list[tuple[str, str]]:
        rows = [
            ("primitives", str(len(self.graph.nodes))),
            ("parts", str(len(self.parts))),
            ("states", str(self.states)),
            ("candidates", str(self.candidates)),
            ("kernels", str(len(self.strategy.selected))),
            ("cost_us", f"{self.strategy.total_cost:.6f}"),
            ("optimal", str(self.strategy.optimal).lower()),
            ("cuts", str(self.strategy.cuts_applied)),
        ]
        if self.greedy is not None:
            rows.append(("greedy_cost_us", f"{self.greedy.strategy.total_cost:.6f}"))
            rows.append(("greedy_ratio", f"{self.greedy_ratio:.4f}"))
        if self.verification is not None:
            rows.append(("verified", "pass" if self.verification.ok else "FAIL"))
        return rows


class _Stage:
    def __init__(self, name: str, timings: dict[str, float]):
        self.name = name
        self.timings = timings

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timings[self.name] = self.timings.get(self.name, 0.0) + time.perf_counter() - self.t0
        if exc is not None and not isinstance(exc, StageError):
            raise StageError(self.name, exc) from exc
        return False


def _optimize_part(g: Graph, config: PipelineConfig, deadline: float, timings: dict[str, float]) -> PartResult:
    with _Stage("identify", timings):
        ident = identify(g, config.max_kernel_primitives, config.state_cap)
    with _Stage("profile", timings):
        kernels = price_candidates(g, ident.candidates, config.cost, config.profile)
    with _Stage("optimize", timings):
        budget = max(1e-3, deadline - time.monotonic())
        strategy, _ = optimize(g, kernels, config.solver, budget)
    return PartResult(g, len(ident.states), len(ident.subgraphs), len(ident.candidates), tuple(kernels), strategy)


def _best_variant(g: Graph, config: PipelineConfig, deadline: float, timings: dict[str, float]) -> PartResult:
    """Optimize every rewrite variant and keep the cheapest (ties: canonical hash)."""
    if config.rewrite_depth == 0:
        return _optimize_part(g, config, deadline, timings)
    with _Stage("rewrite", timings):
        variants = search(g, max_depth=config.rewrite_depth, beam=config.rewrite_beam, probes=config.probes, seed=config.seed)
    best: tuple[float, str, PartResult] | None = None
    for v in variants:
        try:
            part = _optimize_part(v, config, deadline, timings)
        except StageError as e:
            if v is g:
                raise
            log.info("rewrite variant %s skipped: %s", canonical_hash(v)[:12], e)
            continue
        key = (part.strategy.total_cost, canonical_hash(v))
        if best is None or key[:2] < best[:2]:
            best = (key[0], key[1], part)
    assert best is not None
    return best[2]


def _merge(parts: Sequence[PartResult], base_next_id: int) -> tuple[Graph, list[CandidateKernel]]:
    """Stitch optimized parts back into one graph and one kernel list."""
    if len(parts) == 1:
        p = parts[0]
        return p.graph, [replace(p.kernels[i], id=j) for j, i in enumerate(p.strategy.selected)]
    # rewrites mint ids per part, so move every new id to a globally fresh one
    taken: set[int] = set()
    next_id = base_next_id
    graphs, mappings = [], []
    for p in parts:
        mapping = {}
        for n in p.graph.nodes:
            if n.id in taken or n.id >= base_next_id:
                mapping[n.id] = next_id
                next_id += 1
        taken.update(mapping.get(n.id, n.id) for n in p.graph.nodes)
        graphs.append(relabel(p.graph, mapping))
        mappings.append(mapping)
    merged = merge_parts(graphs)
    kernels: list[CandidateKernel] = []
    for p, mapping in zip(parts, mappings):
        for i in p.strategy.selected:
            k = p.kernels[i]
            members = [mapping.get(m, m) for m in k.members]
            outs = [mapping.get(o, o) for o in k.output_set]
            mk = make_kernel(merged, len(kernels), members, outs)
            kernels.append(replace(mk, kernel_class=k.kernel_class, cost_us=k.cost_us))
    return merged, kernels


def verify(g: Graph, schedule: Schedule, n_inputs: int, seed: int, atol: float = 1e-9, rtol: float = 1e-9) -> Comparison:
    rng = np.random.default_rng(seed)
    worst: Comparison | None = None
    for _ in range(n_inputs):
        inputs = random_inputs(g, rng)
        c = compare_maps(execute_schedule(schedule, inputs), eval_graph(g, inputs), atol, rtol)
        if worst is None or not c.ok:
            worst = c
        if not c.ok:
            break
    assert worst is not None
    return worst


def run_pipeline(g: Graph, config: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Lower ``g`` to primitives and find its cheapest schedulable kernel orchestration."""
    timings: dict[str, float] = {}
    deadline = time.monotonic() + config.timeout_s
    source = g
    with _Stage("fission", timings):
        prim = apply_fission(g).graph
    with _Stage("partition", timings):
        pieces = partition(prim, config.partition_max) if config.partition_max else [prim]
    parts = tuple(_best_variant(p, config, deadline, timings) for p in pieces)
    with _Stage("generate", timings):
        final, chosen = _merge(parts, fresh_id(prim))
        instance = build_blp(final, chosen)
        optimal = all(p.strategy.optimal for p in parts)
        cuts = sum(p.strategy.cuts_applied for p in parts)
        strategy = make_strategy(instance, range(len(chosen)), optimal, cuts)
        schedule = build_schedule(final, chosen)
    verification = None
    if config.verify_inputs:
        with _Stage("verify", timings):
            verification = verify(source, schedule, config.verify_inputs, config.seed)
    greedy = None
    if config.compare_greedy:
        with _Stage("greedy", timings):
            greedy = greedy_fuse(prim, config.cost, config.profile, config.max_kernel_primitives)
    return PipelineResult(final, parts, tuple(chosen), instance, strategy, schedule, verification, greedy, timings)

