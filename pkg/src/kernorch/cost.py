"""Kernel pricing: an analytic memory/compute model plus measured-latency tables."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import ParseError
from .graph_ir import ELEMENTWISE, LINEAR, Graph, Node, TensorSpec, canonical_hash, canonical_order, numel, shapes_of
from .identify import CandidateKernel


@dataclass(frozen=True)
class CostModelConfig:
    launch_overhead: float = 5.0  # us
    mem_bandwidth: float = 900e3  # bytes/us
    flop_throughput: float = 15e6  # flops/us
    bytes_per_element: int = 8
    reduce_penalty: float = 1.3
    single_output_only: bool = True

    def __post_init__(self):
        for name in ("mem_bandwidth", "flop_throughput", "bytes_per_element"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.launch_overhead < 0:
            raise ValueError("launch_overhead must be non-negative")
        if self.reduce_penalty < 1:
            raise ValueError("reduce_penalty must be at least 1")

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CostModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ParseError(f"unknown cost model field(s): {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "CostModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Rejected:
    reason: str

    def __bool__(self) -> bool:
        return False


MEMORY = "memory"
COMPUTE = "compute"


def signature(g: Graph, members: Sequence[int], output_set: Iterable[int]) -> str:
    """Id-independent hash of a kernel's primitives, shapes and outputs."""
    inside = set(members)
    shapes = shapes_of(g)

    def ext_shape(r) -> tuple[int, ...]:
        return g.input_specs[r].shape if isinstance(r, str) else shapes[r]

    def build(name_of) -> Graph:
        specs: dict[str, TensorSpec] = {}
        nodes = []
        for nid in members:
            n = g.node(nid)
            refs = []
            for r in n.inputs:
                if isinstance(r, int) and r in inside:
                    refs.append(r)
                else:
                    name = name_of(r)
                    specs.setdefault(name, TensorSpec(name, ext_shape(r)))
                    refs.append(name)
            nodes.append(Node(nid, n.kind, n.attrs, tuple(refs)))
        return Graph(tuple(specs[k] for k in sorted(specs)), tuple(nodes), tuple(output_set))

    # name external tensors by order of first use in the structural order
    rough = build(lambda r: "shape" + "x".join(map(str, ext_shape(r))))
    names: dict[Any, str] = {}
    for nid in canonical_order(rough):
        for r in g.node(nid).inputs:
            if not (isinstance(r, int) and r in inside) and r not in names:
                names[r] = f"e{len(names):03d}"
    return canonical_hash(build(names.__getitem__))


@dataclass(frozen=True)
class ProfileTable:
    """Measured latencies that take precedence over the analytic model.

    Entries are keyed by kernel signature, or by explicit member ids with an
    optional output set (``None`` matches any output set). With
    ``fallback="reject"`` kernels missing from the table are rejected.
    """

    by_signature: Mapping[str, float] = field(default_factory=dict)
    by_members: Mapping[tuple[tuple[int, ...], tuple[int, ...] | None], float] = field(default_factory=dict)
    fallback: str = "analytic"

    def __post_init__(self):
        if self.fallback not in ("analytic", "reject"):
            raise ValueError(f"fallback must be 'analytic' or 'reject', got {self.fallback!r}")
        norm = {
            (tuple(sorted(mem)), None if out is None else tuple(sorted(out))): float(v)
            for (mem, out), v in self.by_members.items()
        }
        object.__setattr__(self, "by_members", norm)
        for v in list(self.by_signature.values()) + list(self.by_members.values()):
            if not v > 0:
                raise ValueError("profiled latencies must be positive")

    def lookup(self, g: Graph, k: CandidateKernel) -> float | None:
        mem = tuple(sorted(k.members))
        out = tuple(sorted(k.output_set))
        for key in ((mem, out), (mem, None)):
            if key in self.by_members:
                return self.by_members[key]
        if self.by_signature:
            return self.by_signature.get(signature(g, k.members, k.output_set))
        return None

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ProfileTable":
        by_sig: dict[str, float] = {}
        by_mem: dict = {}
        entries = d.get("entries")
        if not isinstance(entries, list):
            raise ParseError("missing field 'entries'", "profile")
        for i, e in enumerate(entries):
            path = f"entries[{i}]"
            if "latency_us" not in e:
                raise ParseError("missing field 'latency_us'", path)
            lat = float(e["latency_us"])
            if "signature" in e:
                by_sig[str(e["signature"])] = lat
            elif "members" in e:
                outs = e.get("outputs")
                members = tuple(int(m) for m in e["members"])
                by_mem[(members, None if outs is None else tuple(int(o) for o in outs))] = lat
            else:
                raise ParseError("entry needs 'signature' or 'members'", path)
        return cls(by_sig, by_mem, d.get("fallback", "analytic"))

    @classmethod
    def load(cls, path) -> "ProfileTable":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except ParseError as e:
            raise ParseError(str(e), str(path)) from None


def classify(g: Graph, k: CandidateKernel, config: CostModelConfig = CostModelConfig()) -> str | Rejected:
    kinds = [g.node(m).kind for m in k.members]
    if config.single_output_only and len(k.output_set) > 1:
        return Rejected("multiple output tensors")
    if "opaque" in kinds and len(kinds) > 1:
        return Rejected("opaque primitive mixed with others")
    n_linear = sum(kind in LINEAR for kind in kinds)
    if n_linear > 1:
        return Rejected("multiple linear transforms")
    return COMPUTE if n_linear == 1 else MEMORY


def _ref_numel(g: Graph, shapes, r) -> int:
    return g.input_specs[r].size if isinstance(r, str) else numel(shapes[r])


def primitive_flops(g: Graph, nid: int) -> int:
    n = g.node(nid)
    shapes = shapes_of(g)
    out = numel(shapes[nid])
    if n.kind in ELEMENTWISE or n.kind == "opaque":
        return out
    if n.kind == "reduce":
        return _ref_numel(g, shapes, n.inputs[0])
    if n.kind in ("matmul", "batched_matmul"):
        a = n.inputs[0]
        a_shape = g.input_specs[a].shape if isinstance(a, str) else shapes[a]
        return 2 * out * a_shape[-1]
    if n.kind == "conv2d":
        w = n.inputs[1]
        _, c, r, s = g.input_specs[w].shape if isinstance(w, str) else shapes[w]
        return 2 * out * c * r * s
    return 0


def kernel_bytes(g: Graph, k: CandidateKernel, config: CostModelConfig = CostModelConfig()) -> int:
    """Off-chip traffic: every distinct external input read once plus every materialized output."""
    shapes = shapes_of(g)
    elems = sum(numel(shapes[p]) for p in k.input_primitives)
    elems += sum(g.input_specs[name].size for name in k.graph_inputs)
    elems += sum(numel(shapes[o]) for o in k.output_set)
    return config.bytes_per_element * elems


def analytic_latency(g: Graph, k: CandidateKernel, config: CostModelConfig = CostModelConfig()) -> float:
    n_reduce = sum(g.node(m).kind == "reduce" for m in k.members)
    flops = sum(primitive_flops(g, m) for m in k.members)
    memory = config.reduce_penalty**n_reduce * kernel_bytes(g, k, config) / config.mem_bandwidth
    return config.launch_overhead + memory + flops / config.flop_throughput


def estimate_cost(
    g: Graph,
    k: CandidateKernel,
    config: CostModelConfig = CostModelConfig(),
    table: ProfileTable | None = None,
) -> float | Rejected:
    verdict = classify(g, k, config)
    if isinstance(verdict, Rejected):
        return verdict
    if table is not None:
        hit = table.lookup(g, k)
        if hit is not None:
            return hit
        if table.fallback == "reject":
            return Rejected("not in profile table")
    return analytic_latency(g, k, config)


def price_candidates(
    g: Graph,
    kernels: Sequence[CandidateKernel],
    config: CostModelConfig = CostModelConfig(),
    table: ProfileTable | None = None,
) -> list[CandidateKernel]:
    """Priced, classified kernels with rejected ones dropped; ids renumbered densely."""
    priced = []
    for k in kernels:
        cost = estimate_cost(g, k, config, table)
        if isinstance(cost, Rejected):
            continue
        priced.append(dataclasses.replace(k, id=len(priced), kernel_class=classify(g, k, config), cost_us=cost))
    return priced
