"""Rule-based operator fission: composite operators -> primitive subgraphs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

from .errors import DuplicateRule
from .graph_ir import (
    PRIMITIVE_KINDS,
    Graph,
    Node,
    Ref,
    Shape,
    fresh_id,
    numel,
    shapes_of,
    topo_sort,
)


class FragmentBuilder:
    """Appends primitive nodes with fresh ids while a rule expands an operator."""

    def __init__(self, next_id: int):
        self.next_id = next_id
        self.nodes: list[Node] = []

    def add(self, kind: str, *inputs: Ref, **attrs: Any) -> int:
        nid = self.next_id
        self.next_id += 1
        self.nodes.append(Node(nid, kind, attrs, inputs))
        return nid


Template = Callable[[FragmentBuilder, Mapping[str, Any], Sequence[Ref], Sequence[Shape]], Ref]


@dataclass(frozen=True)
class FissionRule:
    operator_kind: str
    template: Template


@dataclass
class FissionRegistry:
    rules: dict[str, FissionRule] = field(default_factory=dict)

    def register(self, rule: FissionRule) -> None:
        if rule.operator_kind in self.rules:
            raise DuplicateRule(f"a fission rule for {rule.operator_kind!r} is already registered")
        self.rules[rule.operator_kind] = rule

    def get(self, kind: str) -> FissionRule | None:
        return self.rules.get(kind)

    def __contains__(self, kind: str) -> bool:
        return kind in self.rules


def _axis(a, rank):
    return int(a) % rank


def _softmax(b: FragmentBuilder, attrs, ins, shapes):
    (x,), (s,) = ins, shapes
    ax = _axis(attrs.get("axis", -1), len(s))
    e = b.add("exp", x)
    total = b.add("reduce", e, dim=ax, aggregator="sum")
    spread = b.add("broadcast", total, dim=ax, size=s[ax])
    return b.add("div", e, spread)


def _reduce_mean(b: FragmentBuilder, attrs, ins, shapes):
    (x,), (s,) = ins, shapes
    ax = _axis(attrs.get("dim", -1), len(s))
    total = b.add("reduce", x, dim=ax, aggregator="sum")
    return b.add("scale", total, c=1.0 / s[ax])


def _gelu(b: FragmentBuilder, attrs, ins, shapes):
    (x,), (s,) = ins, shapes
    t = b.add("scale", x, c=1.0 / math.sqrt(2.0))
    e = b.add("erf", t)
    one = b.add("constant", shape=list(s), fill="ones")
    a = b.add("add", e, one)
    m = b.add("mul", x, a)
    return b.add("scale", m, c=0.5)


def _normalize_rows(b: FragmentBuilder, x: Ref, rows: Shape, length: int, eps: float) -> int:
    """(x - mean) / sqrt(var + eps) along the last axis of a rows+(length,) tensor."""
    dim = len(rows)
    mu = b.add("reduce", x, dim=dim, aggregator="mean")
    mu_b = b.add("broadcast", mu, dim=dim, size=length)
    centered = b.add("sub", x, mu_b)
    sq = b.add("mul", centered, centered)
    var = b.add("reduce", sq, dim=dim, aggregator="mean")
    eps_c = b.add("constant", shape=list(rows), fill="literal", data=[float(eps)] * numel(rows))
    shifted = b.add("add", var, eps_c)
    std = b.add("sqrt", shifted)
    std_b = b.add("broadcast", std, dim=dim, size=length)
    return b.add("div", centered, std_b)


def _instance_norm(b: FragmentBuilder, attrs, ins, shapes):
    (x,), (s,) = ins, shapes
    length = numel(s[2:])
    flat = (s[0], s[1], length)
    src = x if len(s) == 3 else b.add("reshape", x, shape=list(flat))
    y = _normalize_rows(b, src, flat[:2], length, attrs.get("eps", 1e-5))
    return y if len(s) == 3 else b.add("reshape", y, shape=list(s))


def _layer_norm(b: FragmentBuilder, attrs, ins, shapes):
    (x,), (s,) = ins, shapes
    ax = _axis(attrs.get("axis", -1), len(s))
    flat = (numel(s[:ax]), numel(s[ax:]))
    src = x if s == flat else b.add("reshape", x, shape=list(flat))
    y = _normalize_rows(b, src, flat[:1], flat[1], attrs.get("eps", 1e-5))
    return y if s == flat else b.add("reshape", y, shape=list(s))


BUILTIN_RULES = (
    FissionRule("softmax", _softmax),
    FissionRule("instance_norm", _instance_norm),
    FissionRule("layer_norm", _layer_norm),
    FissionRule("gelu", _gelu),
    FissionRule("reduce_mean", _reduce_mean),
)


def default_registry() -> FissionRegistry:
    reg = FissionRegistry()
    for rule in BUILTIN_RULES:
        reg.register(rule)
    return reg


DEFAULT_REGISTRY = default_registry()


def register_rule(rule: FissionRule, registry: FissionRegistry | None = None) -> None:
    (registry or DEFAULT_REGISTRY).register(rule)


@dataclass(frozen=True)
class FissionResult:
    graph: Graph
    # operator node id -> primitive node id carrying its value
    node_map: dict[int, int]


def apply_fission(g: Graph, registry: FissionRegistry | None = None) -> FissionResult:
    """Replace every composite operator by its rule's primitive fragment.

    Each fragment's final node reuses the operator's id, so consumers and the
    graph outputs keep pointing at the same ids. Operators without a rule
    become ``opaque`` primitives.
    """
    registry = registry or DEFAULT_REGISTRY
    shapes = shapes_of(g)
    builder = FragmentBuilder(fresh_id(g))
    out_nodes: list[Node] = []
    node_map: dict[int, int] = {}
    for nid in topo_sort(g):
        n = g.node(nid)
        node_map[nid] = nid
        if n.kind in PRIMITIVE_KINDS:
            out_nodes.append(n)
            continue
        rule = registry.get(n.kind)
        if rule is None:
            attrs = {"name": n.kind, **n.attrs, "out_shape": list(shapes[nid])}
            out_nodes.append(Node(nid, "opaque", attrs, n.inputs))
            continue
        in_shapes = [g.input_specs[r].shape if isinstance(r, str) else shapes[r] for r in n.inputs]
        start = len(builder.nodes)
        result = rule.template(builder, n.attrs, n.inputs, in_shapes)
        fragment = builder.nodes[start:]
        if not isinstance(result, int) or result not in {f.id for f in fragment}:
            # rule forwarded an existing tensor; materialize it under the operator id
            fragment.append(Node(nid, "reshape", {"shape": list(shapes[nid])}, (result,)))
        else:
            fragment = [f if f.id != result else Node(nid, f.kind, f.attrs, f.inputs) for f in fragment]
            fragment = [
                Node(f.id, f.kind, f.attrs, tuple(nid if r == result else r for r in f.inputs)) for f in fragment
            ]
        out_nodes.extend(fragment)
    if all(n.kind in PRIMITIVE_KINDS for n in g.nodes):
        # nothing to expand: keep node order so the result equals the input
        out_nodes = list(g.nodes)
    return FissionResult(Graph(g.inputs, tuple(out_nodes), g.outputs, "primitive"), node_map)
