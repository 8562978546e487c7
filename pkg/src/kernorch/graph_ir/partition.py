"""Splitting a graph into smaller parts at single-tensor articulation edges."""

from __future__ import annotations

import heapq

from .graph import Graph, Node, TensorSpec, topo_sort
from .shapes import shapes_of

CUT_PREFIX = "%"


def cut_input_name(nid: int) -> str:
    return f"{CUT_PREFIX}{nid}"


def _weak_adjacency(g: Graph) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {n.id: set() for n in g.nodes}
    for n in g.nodes:
        for r in n.node_inputs():
            adj[n.id].add(r)
            adj[r].add(n.id)
    return adj


def _reachable(adj: dict[int, set[int]], src: int, dst: int, skip: tuple[int, int]) -> bool:
    seen = {src}
    stack = [src]
    while stack:
        u = stack.pop()
        for w in adj[u]:
            if (u, w) == skip or (w, u) == skip or w in seen:
                continue
            if w == dst:
                return True
            seen.add(w)
            stack.append(w)
    return False


def cut_edges(g: Graph) -> list[tuple[int, int]]:
    """Edges (u, v) that are legal partition cuts.

    u must feed only v, must not itself be a graph output, and dropping the
    edge must disconnect u from v in the undirected skeleton.
    """
    adj = _weak_adjacency(g)
    outs = set(g.outputs)
    cuts = []
    for u, consumers in sorted(g.consumers.items()):
        if len(consumers) != 1 or u in outs:
            continue
        v = consumers[0]
        if not _reachable(adj, u, v, (u, v)):
            cuts.append((u, v))
    return cuts


def partition(g: Graph, max_nodes: int) -> list[Graph]:
    """Greedily group cut-delimited blocks into parts of at most ``max_nodes``.

    A block larger than ``max_nodes`` is kept whole. Parts come back in
    dataflow order; every cross-part edge is a cut edge whose tensor appears
    as a graph input named ``%<producer id>`` in the consuming part.
    """
    if not g.nodes:
        return [g]
    cuts = set(cut_edges(g))
    adj = _weak_adjacency(g)
    for u, v in cuts:
        adj[u].discard(v)
        adj[v].discard(u)
    pos = {nid: i for i, nid in enumerate(topo_sort(g))}
    block_of: dict[int, int] = {}
    blocks: list[list[int]] = []
    for nid in sorted(pos, key=pos.get):
        if nid in block_of:
            continue
        b = len(blocks)
        members = []
        stack = [nid]
        block_of[nid] = b
        while stack:
            u = stack.pop()
            members.append(u)
            for w in adj[u]:
                if w not in block_of:
                    block_of[w] = b
                    stack.append(w)
        blocks.append(sorted(members, key=pos.get))

    # order blocks topologically, ties by earliest member position
    deps: dict[int, set[int]] = {b: set() for b in range(len(blocks))}
    for u, v in cuts:
        deps[block_of[v]].add(block_of[u])
    indeg = {b: len(d) for b, d in deps.items()}
    succ: dict[int, list[int]] = {b: [] for b in deps}
    for b, d in deps.items():
        for a in d:
            succ[a].append(b)
    heap = [(pos[blocks[b][0]], b) for b, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    block_order = []
    while heap:
        _, b = heapq.heappop(heap)
        block_order.append(b)
        for c in succ[b]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, (pos[blocks[c][0]], c))

    groups: list[list[int]] = []
    current: list[int] = []
    for b in block_order:
        if current and len(current) + len(blocks[b]) > max_nodes:
            groups.append(current)
            current = []
        current = current + blocks[b]
    if current:
        groups.append(current)
    if len(groups) == 1:
        return [g]
    return [_extract(g, set(members)) for members in groups]


def _extract(g: Graph, members: set[int]) -> Graph:
    shapes = shapes_of(g)
    outs = set(g.outputs)
    inputs: list[TensorSpec] = []
    seen_inputs: set[str] = set()
    nodes = []
    for n in g.nodes:
        if n.id not in members:
            continue
        refs = []
        for r in n.inputs:
            if isinstance(r, int) and r not in members:
                name = cut_input_name(r)
                if name not in seen_inputs:
                    seen_inputs.add(name)
                    inputs.append(TensorSpec(name, shapes[r]))
                refs.append(name)
            else:
                if isinstance(r, str) and r not in seen_inputs:
                    seen_inputs.add(r)
                    inputs.append(g.input_specs[r])
                refs.append(r)
        nodes.append(Node(n.id, n.kind, n.attrs, tuple(refs)))
    part_outputs = sorted(
        nid for nid in members if nid in outs or any(c not in members for c in g.consumers[nid])
    )
    return Graph(tuple(inputs), tuple(nodes), tuple(part_outputs), g.level)


def merge_parts(parts: list[Graph]) -> Graph:
    """Inline parts back into one graph by resolving ``%<id>`` inputs."""
    if len(parts) == 1:
        return parts[0]
    cut_refs = set()
    inputs: list[TensorSpec] = []
    names: set[str] = set()
    nodes = []
    for p in parts:
        for t in p.inputs:
            if t.name.startswith(CUT_PREFIX):
                cut_refs.add(int(t.name[len(CUT_PREFIX) :]))
            elif t.name not in names:
                names.add(t.name)
                inputs.append(t)
        for n in p.nodes:
            refs = tuple(
                int(r[len(CUT_PREFIX) :]) if isinstance(r, str) and r.startswith(CUT_PREFIX) else r for r in n.inputs
            )
            nodes.append(Node(n.id, n.kind, n.attrs, refs))
    outputs = sorted({o for p in parts for o in p.outputs if o not in cut_refs})
    return Graph(tuple(inputs), tuple(nodes), tuple(outputs), parts[0].level)
