"""Sequential kernel schedules: ordering, reference execution and export."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence, Union

from .graph_ir import Graph, graph_from_dict, graph_to_dict, numel, shapes_of, topo_sort
from .identify import CandidateKernel, kernel_io
from .interpreter import DenseTensor, as_tensor, eval_node

GRAPH = "graph"
Producer = Union[int, str]


@dataclass(frozen=True)
class ScheduledKernel:
    kernel: CandidateKernel
    # (primitive id or graph input name, producing kernel id or "graph")
    bindings: tuple[tuple[int | str, Producer], ...]


@dataclass(frozen=True)
class Schedule:
    graph: Graph
    steps: tuple[ScheduledKernel, ...]

    @property
    def kernels(self) -> tuple[CandidateKernel, ...]:
        return tuple(s.kernel for s in self.steps)

    @property
    def total_cost(self) -> float:
        return math.fsum(k.cost_us or 0.0 for k in self.kernels)

    @property
    def materialized_elements(self) -> int:
        shapes = shapes_of(self.graph)
        return sum(numel(shapes[o]) for k in self.kernels for o in k.output_set)


@dataclass(frozen=True)
class Stuck:
    """Kernels that never became ready; their ids, sorted."""

    kernels: tuple[int, ...]


def order_kernels(g: Graph, kernels: Sequence[CandidateKernel]) -> Schedule | Stuck:
    """Ready-list ordering: repeatedly run the lowest-id kernel whose inputs exist.

    A primitive produced by several kernels is bound to the first one run.
    """
    pending = sorted(kernels, key=lambda k: k.id)
    producer: dict[int, int] = {}
    steps: list[ScheduledKernel] = []
    while pending:
        ready = next((k for k in pending if all(p in producer for p in k.input_primitives)), None)
        if ready is None:
            return Stuck(tuple(k.id for k in pending))
        pending.remove(ready)
        binds: list[tuple[int | str, Producer]] = [(p, producer[p]) for p in ready.input_primitives]
        binds += [(name, GRAPH) for name in ready.graph_inputs]
        steps.append(ScheduledKernel(ready, tuple(binds)))
        for o in ready.output_set:
            producer.setdefault(o, ready.id)
    return Schedule(g, tuple(steps))


def execute_schedule(schedule: Schedule, inputs: Mapping[str, DenseTensor]) -> dict[int, DenseTensor]:
    """Run kernels in order, passing only materialized outputs between them."""
    g = schedule.graph
    inputs = {name: as_tensor(v) for name, v in inputs.items()}
    order = {nid: i for i, nid in enumerate(topo_sort(g))}
    stored: dict[int, DenseTensor] = {}
    for step in schedule.steps:
        k = step.kernel
        local: dict[int, DenseTensor] = {}
        for ref, src in step.bindings:
            if src != GRAPH:
                local[ref] = stored[ref]
        for nid in sorted(k.members, key=order.__getitem__):
            n = g.node(nid)
            args = [inputs[r] if isinstance(r, str) else local[r] for r in n.inputs]
            local[nid] = eval_node(n.kind, n.attrs, args)
        for o in k.output_set:
            stored.setdefault(o, local[o])
    return {o: stored[o] for o in g.outputs}


def _class_tag(k: CandidateKernel) -> str:
    return "compute" if k.kernel_class == "compute" else "mem"


def schedule_to_json(schedule: Schedule) -> dict[str, Any]:
    kernels = []
    for step in schedule.steps:
        k = step.kernel
        kernels.append(
            {
                "id": k.id,
                "primitives": list(k.members),
                "inputs": [{"prim": p, "from_kernel": src} for p, src in step.bindings],
                "outputs": list(k.output_set),
                "class": _class_tag(k),
                "cost_us": k.cost_us,
            }
        )
    return {"kernels": kernels, "total_cost_us": schedule.total_cost, "graph": graph_to_dict(schedule.graph)}


def schedule_from_json(d: Mapping[str, Any]) -> Schedule:
    g = graph_from_dict(d["graph"])
    steps = []
    for kd in d["kernels"]:
        members = tuple(int(m) for m in kd["primitives"])
        prims, names = kernel_io(g, members)
        k = CandidateKernel(
            int(kd["id"]),
            members,
            prims,
            names,
            tuple(int(o) for o in kd["outputs"]),
            "compute" if kd.get("class") == "compute" else "memory",
            kd.get("cost_us"),
        )
        binds = tuple((b["prim"], b["from_kernel"]) for b in kd["inputs"])
        steps.append(ScheduledKernel(k, binds))
    return Schedule(g, tuple(steps))


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def emit_dot(obj: Schedule | Graph) -> str:
    """Deterministic Graphviz text: one cluster per kernel, or a plain graph."""
    if isinstance(obj, Graph):
        return _graph_dot(obj)
    g = obj.graph
    lines = ["digraph schedule {", "  rankdir=TB;"]
    for name in sorted({n for s in obj.steps for n, src in s.bindings if src == GRAPH}):
        lines.append(f"  {_q('in_' + name)} [shape=box, label={_q(name)}];")
    edges = []
    for step in obj.steps:
        k = step.kernel
        label = f"kernel {k.id} ({_class_tag(k)}, {k.cost_us or 0.0:.4f} us)"
        lines.append(f"  subgraph cluster_k{k.id} {{")
        lines.append(f"    label={_q(label)};")
        inside = set(k.members)
        for nid in k.members:
            n = g.node(nid)
            shape = "doublecircle" if nid in k.output_set else "ellipse"
            lines.append(f"    {_q(f'k{k.id}_n{nid}')} [label={_q(f'{nid}: {n.kind}')}, shape={shape}];")
        lines.append("  }")
        src_of = dict(step.bindings)
        for nid in k.members:
            for r in g.node(nid).inputs:
                dst = f"k{k.id}_n{nid}"
                if isinstance(r, str):
                    edges.append((f"in_{r}", dst))
                elif r in inside:
                    edges.append((f"k{k.id}_n{r}", dst))
                else:
                    edges.append((f"k{src_of[r]}_n{r}", dst))
    for a, b in edges:
        lines.append(f"  {_q(a)} -> {_q(b)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _graph_dot(g: Graph) -> str:
    lines = ["digraph primitives {", "  rankdir=TB;"]
    for t in g.inputs:
        lines.append(f"  {_q('in_' + t.name)} [shape=box, label={_q(t.name)}];")
    for n in sorted(g.nodes, key=lambda n: n.id):
        shape = "doublecircle" if n.id in g.outputs else "ellipse"
        lines.append(f"  {_q(f'n{n.id}')} [label={_q(f'{n.id}: {n.kind}')}, shape={shape}];")
    for n in sorted(g.nodes, key=lambda n: n.id):
        for r in n.inputs:
            src = f"in_{r}" if isinstance(r, str) else f"n{r}"
            lines.append(f"  {_q(src)} -> {_q(f'n{n.id}')};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def build_schedule(g: Graph, kernels: Sequence[CandidateKernel]) -> Schedule:
    result = order_kernels(g, kernels)
    if isinstance(result, Stuck):
        raise ValueError(f"kernels {list(result.kernels)} can never run")
    return result
