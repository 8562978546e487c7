"""Graph data types for both IR levels.

A graph is a tuple of nodes; each node produces exactly one tensor and names
its inputs positionally, either by producer node id (``int``) or by graph
input port name (``str``). The same container is used for operator-level
(computation) graphs and post-fission primitive graphs; ``level`` tells
them apart.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Any, Iterable, Mapping, Sequence, Union

from ..errors import CycleError

Ref = Union[int, str]
Shape = tuple[int, ...]

ELEMENTWISE_UNARY = frozenset({"relu", "sqrt", "erf", "exp", "neg", "scale"})
ELEMENTWISE_BINARY = frozenset({"add", "sub", "mul", "div"})
ELEMENTWISE = ELEMENTWISE_UNARY | ELEMENTWISE_BINARY
LAYOUT = frozenset({"transpose", "reshape", "pad", "slice", "split", "concat"})
LINEAR = frozenset({"matmul", "batched_matmul", "conv2d"})
PRIMITIVE_KINDS = ELEMENTWISE | LAYOUT | LINEAR | {"reduce", "broadcast", "constant", "opaque"}

# composite operators understood at the operator level
OPERATOR_KINDS = frozenset({"softmax", "instance_norm", "layer_norm", "gelu", "reduce_mean"})

LEVELS = ("operator", "primitive")


def category(kind: str) -> str:
    if kind in ELEMENTWISE:
        return "elementwise"
    if kind in LAYOUT:
        return "layout"
    if kind in LINEAR:
        return "linear"
    if kind in ("reduce", "broadcast", "constant", "opaque"):
        return kind
    return "operator"


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: Shape
    dtype: str = "f64"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))

    @property
    def size(self) -> int:
        return numel(self.shape)


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    attrs: Mapping[str, Any] = field(default_factory=dict)
    inputs: tuple[Ref, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "attrs", _plain(dict(self.attrs)))

    @property
    def category(self) -> str:
        return category(self.kind)

    def node_inputs(self) -> list[int]:
        return [r for r in self.inputs if isinstance(r, int)]


@dataclass(frozen=True)
class Graph:
    """Immutable DAG of nodes. ``outputs`` is the required output set."""

    inputs: tuple[TensorSpec, ...]
    nodes: tuple[Node, ...]
    outputs: tuple[int, ...]
    level: str = "primitive"
    # populated by infer_shapes; ignored by equality
    shapes: Mapping[int, Shape] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "outputs", tuple(self.outputs))

    @cached_property
    def by_id(self) -> dict[int, Node]:
        return {n.id: n for n in self.nodes}

    @cached_property
    def input_specs(self) -> dict[str, TensorSpec]:
        return {t.name: t for t in self.inputs}

    @cached_property
    def consumers(self) -> dict[int, list[int]]:
        """Producer id -> consumer ids, one entry per distinct consumer, sorted."""
        out: dict[int, set[int]] = {n.id: set() for n in self.nodes}
        for n in self.nodes:
            for r in n.node_inputs():
                if r in out:
                    out[r].add(n.id)
        return {k: sorted(v) for k, v in out.items()}

    def node(self, nid: int) -> Node:
        return self.by_id[nid]

    def __len__(self) -> int:
        return len(self.nodes)

    def with_nodes(self, nodes: Iterable[Node], outputs: Sequence[int] | None = None) -> "Graph":
        return replace(
            self,
            nodes=tuple(nodes),
            outputs=tuple(self.outputs if outputs is None else outputs),
            shapes=None,
        )


def _plain(v):
    """Normalize attribute values to JSON-native types so equality survives a round trip."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        return v.item()
    return v


PrimitiveGraph = Graph
ComputationGraph = Graph


def numel(shape: Sequence[int]) -> int:
    n = 1
    for d in shape:
        n *= int(d)
    return n


def topo_sort(g: Graph) -> list[int]:
    """Kahn's algorithm with the ready frontier resolved by ascending id."""
    indeg = {n.id: 0 for n in g.nodes}
    for n in g.nodes:
        # count distinct producers; a node may read the same tensor twice
        indeg[n.id] = len({r for r in n.node_inputs() if r in indeg})
    heap = [nid for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order: list[int] = []
    cons = g.consumers
    while heap:
        nid = heapq.heappop(heap)
        order.append(nid)
        for c in cons[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) != len(indeg):
        raise CycleError(_cycle_nodes(g, set(indeg) - set(order)))
    return order


def _cycle_nodes(g: Graph, residual: set[int]) -> set[int]:
    # strip residual nodes that merely hang off a cycle downstream
    rem = set(residual)
    changed = True
    while changed:
        changed = False
        for nid in list(rem):
            preds = {r for r in g.node(nid).node_inputs() if r in rem}
            succs = {c for c in g.consumers[nid] if c in rem}
            if not preds or not succs:
                rem.discard(nid)
                changed = True
    return rem or residual


def ancestors_of(g: Graph, roots: Iterable[int]) -> set[int]:
    """All nodes from which some root is reachable, roots included."""
    seen: set[int] = set()
    stack = [r for r in roots if r in g.by_id]
    while stack:
        nid = stack.pop()
        if nid in seen:
            continue
        seen.add(nid)
        stack.extend(r for r in g.node(nid).node_inputs() if r not in seen)
    return seen


def prune_dead(g: Graph) -> Graph:
    """Drop nodes that no graph output depends on."""
    live = ancestors_of(g, g.outputs)
    if len(live) == len(g.nodes):
        return g
    return g.with_nodes([n for n in g.nodes if n.id in live])


def relabel(g: Graph, mapping: Mapping[int, int]) -> Graph:
    """Rename node ids; ids missing from ``mapping`` keep their value."""

    def m(r: Ref) -> Ref:
        return mapping.get(r, r) if isinstance(r, int) else r

    nodes = [replace(n, id=mapping.get(n.id, n.id), inputs=tuple(m(r) for r in n.inputs)) for n in g.nodes]
    return g.with_nodes(nodes, [mapping.get(o, o) for o in g.outputs])


def fresh_id(g: Graph) -> int:
    return max((n.id for n in g.nodes), default=-1) + 1


class GraphBuilder:
    """Incremental graph construction with sequential node ids."""

    def __init__(self, level: str = "primitive", first_id: int = 0):
        self.level = level
        self.inputs: list[TensorSpec] = []
        self.nodes: list[Node] = []
        self._next = first_id

    def input(self, name: str, shape: Sequence[int]) -> str:
        self.inputs.append(TensorSpec(name, tuple(shape)))
        return name

    def add(self, kind: str, *inputs: Ref, node_id: int | None = None, **attrs: Any) -> int:
        nid = self._next if node_id is None else node_id
        self._next = max(self._next, nid + 1)
        self.nodes.append(Node(nid, kind, attrs, tuple(inputs)))
        return nid

    def build(self, outputs: Sequence[int]) -> Graph:
        return Graph(tuple(self.inputs), tuple(self.nodes), tuple(outputs), self.level)
