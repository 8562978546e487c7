"""Local algebraic rewrites on primitive graphs and a bounded search over them.

Rules never price graphs; they only produce equivalent alternatives. The
pipeline decides which alternative to keep.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .graph_ir import Graph, Node, canonical_hash, fresh_id, prune_dead, ref_shape, shapes_of, topo_sort
from .interpreter import compare_maps, eval_graph, random_inputs

log = logging.getLogger(__name__)

Match = dict[str, Any]


@dataclass(frozen=True)
class RewriteRule:
    name: str
    matcher: Callable[[Graph, int], Match | None]
    builder: Callable[[Graph, Match], Graph]


class _Edit:
    """Collects node replacements and additions against one base graph."""

    def __init__(self, g: Graph):
        self.g = g
        self.next_id = fresh_id(g)
        self.replaced: dict[int, Node] = {}
        self.added: list[Node] = []

    def add(self, kind: str, *inputs, **attrs) -> int:
        nid = self.next_id
        self.next_id += 1
        self.added.append(Node(nid, kind, attrs, inputs))
        return nid

    def replace(self, nid: int, kind: str, *inputs, **attrs) -> None:
        self.replaced[nid] = Node(nid, kind, attrs, inputs)

    def finish(self) -> Graph:
        nodes = [self.replaced.get(n.id, n) for n in self.g.nodes] + self.added
        return prune_dead(self.g.with_nodes(nodes))


def _is(g: Graph, ref, kind: str) -> bool:
    return isinstance(ref, int) and g.node(ref).kind == kind


# R1: reduce(sum) over one axis of a matrix -> matmul with a ones vector + reshape


def _match_reduce_to_matmul(g: Graph, anchor: int) -> Match | None:
    n = g.node(anchor)
    if n.kind != "reduce" or n.attrs.get("aggregator", "sum") != "sum":
        return None
    (x,) = n.inputs
    s = ref_shape(g, x)
    if len(s) != 2 or int(n.attrs["dim"]) not in (0, 1):
        return None
    return {"anchor": anchor, "x": x, "shape": s, "dim": int(n.attrs["dim"])}


def _build_reduce_to_matmul(g: Graph, m: Match) -> Graph:
    e = _Edit(g)
    rows, cols = m["shape"]
    if m["dim"] == 1:
        ones = e.add("constant", shape=[cols, 1], fill="ones")
        prod = e.add("matmul", m["x"], ones)
        e.replace(m["anchor"], "reshape", prod, shape=[rows])
    else:
        ones = e.add("constant", shape=[1, rows], fill="ones")
        prod = e.add("matmul", ones, m["x"])
        e.replace(m["anchor"], "reshape", prod, shape=[cols])
    return e.finish()


# R2: (A / broadcast_rows(s)) @ B -> (A @ B) / broadcast_rows(s)


def _match_div_matmul_swap(g: Graph, anchor: int) -> Match | None:
    mm = g.node(anchor)
    if mm.kind != "matmul":
        return None
    d, b = mm.inputs
    if not _is(g, d, "div") or g.consumers[d] != [anchor] or d in g.outputs:
        return None
    a, bc = g.node(d).inputs
    if not _is(g, bc, "broadcast"):
        return None
    bcast = g.node(bc)
    (s,) = bcast.inputs
    # the divisor must vary along rows only, which the product preserves
    if int(bcast.attrs["dim"]) != 1 or len(ref_shape(g, s)) != 1:
        return None
    return {"anchor": anchor, "a": a, "b": b, "s": s}


def _build_div_matmul_swap(g: Graph, m: Match) -> Graph:
    e = _Edit(g)
    n = shapes_of(g)[m["anchor"]][1]
    prod = e.add("matmul", m["a"], m["b"])
    spread = e.add("broadcast", m["s"], dim=1, size=n)
    e.replace(m["anchor"], "div", prod, spread)
    return e.finish()


# R3: A @ B and A @ C -> A @ [B | C] followed by two splits


def _depends_on(g: Graph, node: int, target: int) -> bool:
    stack, seen = [node], set()
    while stack:
        u = stack.pop()
        if u == target:
            return True
        if u in seen:
            continue
        seen.add(u)
        stack.extend(g.node(u).node_inputs())
    return False


def _const_fill(g: Graph, ref) -> float | None:
    if not _is(g, ref, "constant"):
        return None
    fill = g.node(ref).attrs.get("fill")
    return {"ones": 1.0, "zeros": 0.0}.get(fill)


def _match_matmul_merge(g: Graph, anchor: int) -> Match | None:
    m1 = g.node(anchor)
    if m1.kind != "matmul":
        return None
    a = m1.inputs[0]
    for other in sorted(g.by_id):
        if other == anchor:
            continue
        m2 = g.node(other)
        if m2.kind != "matmul" or m2.inputs[0] != a:
            continue
        if _depends_on(g, other, anchor) or _depends_on(g, anchor, other):
            continue
        return {"first": anchor, "second": other, "a": a, "b": m1.inputs[1], "c": m2.inputs[1]}
    return None


def _build_matmul_merge(g: Graph, m: Match) -> Graph:
    e = _Edit(g)
    shapes = shapes_of(g)
    n1 = shapes[m["first"]][1]
    n2 = shapes[m["second"]][1]
    fill_c = _const_fill(g, m["c"])
    fill_b = _const_fill(g, m["b"])
    if fill_c is not None:
        packed = e.add("pad", m["b"], pads=[[0, 0], [0, n2]], value=fill_c)
    elif fill_b is not None:
        packed = e.add("pad", m["c"], pads=[[0, 0], [n1, 0]], value=fill_b)
    else:
        packed = e.add("concat", m["b"], m["c"], axis=1, input_count=2)
    prod = e.add("matmul", m["a"], packed)
    e.replace(m["first"], "split", prod, axis=1, sizes=[n1, n2], index=0)
    e.replace(m["second"], "split", prod, axis=1, sizes=[n1, n2], index=1)
    return e.finish()


REDUCE_TO_MATMUL = RewriteRule("reduce_to_matmul", _match_reduce_to_matmul, _build_reduce_to_matmul)
DIV_MATMUL_SWAP = RewriteRule("div_matmul_swap", _match_div_matmul_swap, _build_div_matmul_swap)
MATMUL_MERGE = RewriteRule("matmul_merge", _match_matmul_merge, _build_matmul_merge)
BUILTIN_RULES = (REDUCE_TO_MATMUL, DIV_MATMUL_SWAP, MATMUL_MERGE)


def apply_rule(g: Graph, rule: RewriteRule, anchor: int) -> Graph | None:
    """Rewrite at ``anchor``; ``None`` signals that the pattern does not match."""
    if anchor not in g.by_id:
        return None
    m = rule.matcher(g, anchor)
    if m is None:
        return None
    return rule.builder(g, m)


def probe_equivalent(a: Graph, b: Graph, probes: int = 20, seed: int = 0, atol=1e-9, rtol=1e-9) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(probes):
        inputs = random_inputs(a, rng)
        if not compare_maps(eval_graph(b, inputs), eval_graph(a, inputs), atol, rtol).ok:
            return False
    return True


def search(
    g: Graph,
    rules: Sequence[RewriteRule] = BUILTIN_RULES,
    max_depth: int = 3,
    beam: int = 16,
    probes: int = 2,
    seed: int = 0,
) -> list[Graph]:
    """Breadth-limited exploration of rule applications up to ``max_depth``.

    Each level keeps at most ``beam`` new graphs (smallest canonical hashes
    first). Results include ``g`` and are sorted by canonical hash. With
    ``probes > 0`` every new graph is checked against ``g`` on random inputs
    and dropped, with a warning, if it disagrees.
    """
    seen: dict[str, Graph] = {canonical_hash(g): g}
    frontier = [g]
    for _ in range(max_depth):
        found: dict[str, Graph] = {}
        for cur in frontier:
            for rule in rules:
                for anchor in topo_sort(cur):
                    out = apply_rule(cur, rule, anchor)
                    if out is None:
                        continue
                    h = canonical_hash(out)
                    if h in seen or h in found:
                        continue
                    if probes and not probe_equivalent(g, out, probes, seed):
                        log.warning("rule %s at node %d produced a non-equivalent graph; dropped", rule.name, anchor)
                        continue
                    found[h] = out
        kept = sorted(found)[:beam]
        for h in kept:
            seen[h] = found[h]
        frontier = [found[h] for h in kept]
        if not frontier:
            break
    return [seen[h] for h in sorted(seen)]
