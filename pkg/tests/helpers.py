"""Graph generators and independent oracles shared by the test modules.

The oracles here deliberately avoid the package's bitset machinery: they
work on plain edge lists and Python sets so they can check it.
"""

from __future__ import annotations

import itertools
import random
from typing import Iterable, Sequence

from kernorch.graph_ir import Graph, GraphBuilder
from kernorch.identify import CandidateKernel

UNARY = ("relu", "exp", "neg")


def random_edges(rng: random.Random, n: int, p: float) -> list[tuple[int, int]]:
    """Random DAG on 0..n-1 whose node labels are shuffled away from topological order."""
    perm = list(range(n))
    rng.shuffle(perm)
    return [(perm[i], perm[j]) for i in range(n) for j in range(i + 1, n) if rng.random() < p]


def all_dags(n: int) -> Iterable[list[tuple[int, int]]]:
    """Every DAG on n labelled nodes whose edges respect the label order."""
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    for k in range(1 << len(pairs)):
        yield [pairs[b] for b in range(len(pairs)) if k >> b & 1]


def reach(n: int, edges: Sequence[tuple[int, int]]) -> list[set[int]]:
    """Strict descendants of every node by depth-first search."""
    succ: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        succ[u].append(v)
    out = []
    for s in range(n):
        seen: set[int] = set()
        stack = list(succ[s])
        while stack:
            u = stack.pop()
            if u not in seen:
                seen.add(u)
                stack.extend(succ[u])
        out.append(seen)
    return out


def convex_oracle(n: int, edges: Sequence[tuple[int, int]]) -> set[frozenset[int]]:
    """All non-empty subsets S with no outside node on a path between two members."""
    desc = reach(n, edges)
    found = set()
    for size in range(1, n + 1):
        for subset in itertools.combinations(range(n), size):
            s = set(subset)
            outside = set(range(n)) - s
            ok = True
            for w in outside:
                if any(w in desc[a] for a in s) and any(b in desc[w] for b in s):
                    ok = False
                    break
            if ok:
                found.add(frozenset(s))
    return found


def state_oracle(n: int, edges: Sequence[tuple[int, int]]) -> set[frozenset[int]]:
    """All predecessor-closed subsets, including the empty one."""
    preds: list[set[int]] = [set() for _ in range(n)]
    for u, v in edges:
        preds[v].add(u)
    found = set()
    for k in range(1 << n):
        s = {i for i in range(n) if k >> i & 1}
        if all(preds[v] <= s for v in s):
            found.add(frozenset(s))
    return found


def graph_from_edges(n: int, edges: Sequence[tuple[int, int]], size: int = 4) -> Graph:
    """Executable primitive graph over a DAG with in-degree at most two.

    Sources read input ``x``, single-input nodes apply a unary op and
    two-input nodes add. Outputs are the sinks.
    """
    preds: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        preds[v].append(u)
    assert all(len(p) <= 2 for p in preds)
    order = topo(n, edges)
    b = GraphBuilder("primitive")
    b.input("x", [size])
    for v in order:
        p = sorted(preds[v])
        if not p:
            b.add(UNARY[v % 3], "x", node_id=v)
        elif len(p) == 1:
            b.add(UNARY[v % 3], p[0], node_id=v)
        else:
            b.add("add", p[0], p[1], node_id=v)
    has_succ = {u for u, _ in edges}
    return b.build([v for v in range(n) if v not in has_succ])


def topo(n: int, edges: Sequence[tuple[int, int]]) -> list[int]:
    indeg = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for u, v in edges:
        indeg[v] += 1
        succ[u].append(v)
    ready = sorted(i for i in range(n) if indeg[i] == 0)
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        for v in succ[u]:
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(v)
        ready.sort()
    return order


def random_bounded_dag(rng: random.Random, n: int, p: float) -> list[tuple[int, int]]:
    """Random DAG with in-degree at most two, labels in topological order."""
    edges = []
    for v in range(1, n):
        cands = [u for u in range(v) if rng.random() < p]
        rng.shuffle(cands)
        edges.extend((u, v) for u in cands[:2])
    return edges


def chain(n: int) -> Graph:
    b = GraphBuilder("primitive")
    t = b.input("x", [4])
    for i in range(n):
        t = b.add(UNARY[i % 3], t)
    return b.build([t])


def isolated(n: int) -> Graph:
    b = GraphBuilder("primitive")
    b.input("x", [4])
    ids = [b.add(UNARY[i % 3], "x") for i in range(n)]
    return b.build(ids)


def independent_violations(
    kernels: Sequence[CandidateKernel], required: Iterable[int], selected: Iterable[int], cuts=()
) -> list[str]:
    """Output and dependency constraints checked with plain sets."""
    chosen = [kernels[i] for i in selected]
    produced = set()
    for k in chosen:
        produced.update(k.output_set)
    problems = [f"output {t} missing" for t in required if t not in produced]
    for k in chosen:
        problems += [f"kernel {k.id} lacks {p}" for p in k.input_primitives if p not in produced]
    ids = {k.id for k in chosen}
    for c in cuts:
        if set(c.forbidden) <= ids and not ids.intersection(c.unless):
            problems.append(f"cut {c.forbidden} violated")
    return problems
