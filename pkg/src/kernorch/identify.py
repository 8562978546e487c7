"""Execution states, convex subgraphs and candidate kernels.

Node subsets are Python ``int`` bitsets. Bit ``i`` stands for the ``i``-th
node of a fixed topological order held by :class:`DagIndex`.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from graphlib import CycleError as _GraphlibCycle
from graphlib import TopologicalSorter
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import CycleError, StateExplosion
from .graph_ir import LINEAR, Graph, topo_sort

DEFAULT_STATE_CAP = 100_000
DEFAULT_MAX_KERNEL_PRIMITIVES = 12
# optional outputs beyond this many are not power-set expanded
OUTPUT_SET_EXPANSION_LIMIT = 6


def bits(mask: int) -> list[int]:
    out = []
    while mask:
        low = mask & -mask
        out.append(low.bit_length() - 1)
        mask ^= low
    return out


@dataclass(frozen=True)
class DagIndex:
    ids: tuple[int, ...]
    preds: tuple[int, ...]
    succs: tuple[int, ...]
    # strict transitive closures
    anc: tuple[int, ...]
    desc: tuple[int, ...]
    outputs: int

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def full(self) -> int:
        return (1 << self.n) - 1

    def pos(self, nid: int) -> int:
        return self._pos[nid]

    @property
    def _pos(self) -> dict[int, int]:
        cached = self.__dict__.get("_pos_cache")
        if cached is None:
            cached = {nid: i for i, nid in enumerate(self.ids)}
            object.__setattr__(self, "_pos_cache", cached)
        return cached

    def mask(self, nids: Iterable[int]) -> int:
        m = 0
        for nid in nids:
            m |= 1 << self._pos[nid]
        return m

    def members(self, mask: int) -> tuple[int, ...]:
        return tuple(self.ids[i] for i in bits(mask))

    @classmethod
    def from_order(cls, ids: Sequence[int], edges: Iterable[tuple[int, int]], outputs: Iterable[int]) -> "DagIndex":
        pos = {nid: i for i, nid in enumerate(ids)}
        n = len(ids)
        preds = [0] * n
        succs = [0] * n
        for u, v in edges:
            preds[pos[v]] |= 1 << pos[u]
            succs[pos[u]] |= 1 << pos[v]
        anc = [0] * n
        for i in range(n):
            a = preds[i]
            for p in bits(preds[i]):
                a |= anc[p]
            anc[i] = a
        desc = [0] * n
        for i in reversed(range(n)):
            d = succs[i]
            for s in bits(succs[i]):
                d |= desc[s]
            desc[i] = d
        out = 0
        for o in outputs:
            out |= 1 << pos[o]
        return cls(tuple(ids), tuple(preds), tuple(succs), tuple(anc), tuple(desc), out)

    @classmethod
    def from_graph(cls, g: Graph) -> "DagIndex":
        edges = {(r, n.id) for n in g.nodes for r in n.node_inputs()}
        return cls.from_order(topo_sort(g), sorted(edges), g.outputs)

    @classmethod
    def from_edges(cls, n: int, edges: Iterable[tuple[int, int]], outputs: Iterable[int] | None = None) -> "DagIndex":
        """Index a bare DAG on nodes ``0..n-1``. Outputs default to the sinks."""
        edges = sorted(set(edges))
        ts = TopologicalSorter({v: set() for v in range(n)})
        for u, v in edges:
            ts.add(v, u)
        try:
            order = list(ts.static_order())
        except _GraphlibCycle as e:
            raise CycleError(e.args[1][:-1]) from None
        if outputs is None:
            has_succ = {u for u, _ in edges}
            outputs = [v for v in range(n) if v not in has_succ]
        return cls.from_order(order, edges, outputs)


def _index(g: Graph | DagIndex) -> DagIndex:
    return g if isinstance(g, DagIndex) else DagIndex.from_graph(g)


def enumerate_states(g: Graph | DagIndex, cap: int = DEFAULT_STATE_CAP) -> list[int]:
    """All downward-closed node subsets, the empty set included, sorted."""
    dag = _index(g)
    seen = {0}
    stack = [0]
    while stack:
        state = stack.pop()
        for i in range(dag.n):
            bit = 1 << i
            if state & bit or dag.preds[i] & ~state:
                continue
            nxt = state | bit
            if nxt not in seen:
                seen.add(nxt)
                if len(seen) > cap:
                    raise StateExplosion(len(seen), cap)
                stack.append(nxt)
    return sorted(seen)


def _to_words(masks: Sequence[int], words: int) -> np.ndarray:
    arr = np.zeros((len(masks), words), dtype=np.uint64)
    lim = (1 << 64) - 1
    for r, m in enumerate(masks):
        for w in range(words):
            arr[r, w] = (m >> (64 * w)) & lim
    return arr


def _from_words(arr: np.ndarray) -> list[int]:
    out = []
    for row in arr.tolist():
        m = 0
        for w, v in enumerate(row):
            m |= int(v) << (64 * w)
        out.append(m)
    return out


def enumerate_candidates(g: Graph | DagIndex, states: Sequence[int] | None = None) -> list[int]:
    """Distinct non-empty differences D2 - D1 over nested state pairs.

    Sorted by size, then by bitset value.
    """
    dag = _index(g)
    if states is None:
        states = enumerate_states(dag)
    if dag.n == 0:
        return []
    words = (dag.n + 63) // 64
    arr = _to_words(states, words)
    chunks = []
    for r in range(len(states)):
        d2 = arr[r]
        subset = np.all((arr & ~d2) == 0, axis=1)
        diff = arr[subset] ^ d2
        chunks.append(diff)
    diffs = np.unique(np.concatenate(chunks), axis=0)
    found = [m for m in _from_words(diffs) if m]
    return sorted(found, key=lambda m: (m.bit_count(), m))


def is_convex_mask(dag: DagIndex, mask: int) -> bool:
    for q in range(dag.n):
        if mask >> q & 1:
            continue
        if dag.anc[q] & mask and dag.desc[q] & mask:
            return False
    return True


def is_convex(g: Graph | DagIndex, subset: Iterable[int] | int) -> bool:
    """No node outside ``subset`` lies on a path between two nodes inside it."""
    dag = _index(g)
    mask = subset if isinstance(subset, int) else dag.mask(subset)
    return is_convex_mask(dag, mask)


def brute_force_convex(g: Graph | DagIndex) -> list[int]:
    """Every non-empty convex subset, found by checking all 2^n subsets."""
    dag = _index(g)
    found = [m for m in range(1, 1 << dag.n) if is_convex_mask(dag, m)]
    return sorted(found, key=lambda m: (m.bit_count(), m))


def _output_mask_split(dag: DagIndex, members: int) -> tuple[int, int]:
    mandatory = members & dag.outputs
    optional = 0
    for i in bits(members & ~dag.outputs):
        if dag.succs[i] & ~members:
            optional |= 1 << i
    return mandatory, optional


def enumerate_output_masks(dag: DagIndex, members: int) -> list[int]:
    mandatory, optional = _output_mask_split(dag, members)
    opt = bits(optional)
    if len(opt) > OUTPUT_SET_EXPANSION_LIMIT:
        sets = [mandatory, mandatory | optional]
    else:
        sets = []
        for r in range(len(opt) + 1):
            for combo in itertools.combinations(opt, r):
                m = mandatory
                for i in combo:
                    m |= 1 << i
                sets.append(m)
    return sorted({s for s in sets if s}, key=lambda m: (m.bit_count(), m))


def enumerate_output_sets(g: Graph | DagIndex, members: Iterable[int]) -> list[tuple[int, ...]]:
    """Admissible materialized output sets of a convex node set.

    Graph outputs inside ``members`` are always materialized. Any other
    member with a consumer outside ``members`` may be materialized or left
    for another kernel to recompute.
    """
    dag = _index(g)
    return [dag.members(m) for m in enumerate_output_masks(dag, dag.mask(members))]


@dataclass(frozen=True)
class CandidateKernel:
    id: int
    members: tuple[int, ...]
    input_primitives: tuple[int, ...]
    graph_inputs: tuple[str, ...]
    output_set: tuple[int, ...]
    kernel_class: str | None = None
    cost_us: float | None = None

    def to_json(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "id": self.id,
            "members": list(self.members),
            "inputs": list(self.input_primitives),
            "graph_inputs": list(self.graph_inputs),
            "outputs": list(self.output_set),
        }
        if self.kernel_class is not None:
            d["class"] = self.kernel_class
        if self.cost_us is not None:
            d["cost_us"] = self.cost_us
        return d


def kernel_io(g: Graph, members: Iterable[int]) -> tuple[tuple[int, ...], tuple[str, ...]]:
    inside = set(members)
    prims: set[int] = set()
    names: list[str] = []
    for nid in inside:
        for r in g.node(nid).inputs:
            if isinstance(r, int):
                if r not in inside:
                    prims.add(r)
            elif r not in names:
                names.append(r)
    return tuple(sorted(prims)), tuple(sorted(names))


def make_kernel(g: Graph, kid: int, members: Iterable[int], output_set: Iterable[int]) -> CandidateKernel:
    order = {nid: i for i, nid in enumerate(topo_sort(g))}
    mem = tuple(sorted(set(members), key=order.__getitem__))
    prims, names = kernel_io(g, mem)
    return CandidateKernel(kid, mem, prims, names, tuple(sorted(set(output_set), key=order.__getitem__)))


def structural_reject(g: Graph, members: Sequence[int], max_kernel_primitives: int) -> str | None:
    """Reason a node set cannot form a kernel at all, or ``None``."""
    if len(members) > max_kernel_primitives:
        return "too many primitives"
    kinds = [g.node(m).kind for m in members]
    if sum(k in LINEAR for k in kinds) >= 2:
        return "multiple linear transforms"
    if "opaque" in kinds and len(kinds) > 1:
        return "opaque primitive mixed with others"
    return None


@dataclass(frozen=True)
class Identification:
    dag: DagIndex
    states: list[int]
    subgraphs: list[int]
    candidates: list[CandidateKernel]
    pruned: int

    def to_json(self) -> dict[str, Any]:
        return {
            "states": len(self.states),
            "subgraphs": [list(self.dag.members(m)) for m in self.subgraphs],
            "pruned": self.pruned,
            "candidates": [k.to_json() for k in self.candidates],
        }


def identify(
    g: Graph,
    max_kernel_primitives: int = DEFAULT_MAX_KERNEL_PRIMITIVES,
    state_cap: int = DEFAULT_STATE_CAP,
) -> Identification:
    """States, convex subgraphs and structurally admissible candidate kernels."""
    dag = DagIndex.from_graph(g)
    states = enumerate_states(dag, state_cap)
    subgraphs = enumerate_candidates(dag, states)
    kernels: list[CandidateKernel] = []
    pruned = 0
    for sub in subgraphs:
        members = dag.members(sub)
        if structural_reject(g, members, max_kernel_primitives):
            pruned += 1
            continue
        prims, names = kernel_io(g, members)
        for out in enumerate_output_masks(dag, sub):
            kernels.append(CandidateKernel(len(kernels), members, prims, names, dag.members(out)))
    return Identification(dag, states, subgraphs, kernels, pruned)
