from __future__ import annotations

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import graph_from_edges, independent_violations, random_bounded_dag
from kernorch.bundled import example_names, fanout, fanout_profile, load_example, softmax, softmax_matmul
from kernorch.fission import apply_fission
from kernorch.graph_ir import LINEAR
from kernorch.greedy import greedy_fuse
from kernorch.schedule import Stuck, order_kernels


def test_softmax_fuses_to_one_kernel():
    g = apply_fission(softmax()).graph
    res = greedy_fuse(g)
    assert len(res.kernels) == 1 and len(res.kernels[0].members) == len(g.nodes)


def test_softmax_then_matmul_is_split_at_the_linear_op():
    g = apply_fission(softmax_matmul()).graph
    res = greedy_fuse(g)
    for k in res.kernels:
        kinds = [g.node(m).kind for m in k.members]
        assert sum(kind in LINEAR for kind in kinds) <= 1
        if any(kind in LINEAR for kind in kinds):
            assert len(kinds) == 1
    # transpose, two matmuls, and the fused softmax body
    assert len(res.kernels) == 4


def test_fanout_greedy_without_recomputation():
    g = fanout()
    res = greedy_fuse(g, table=fanout_profile())
    assert res.strategy.total_cost == 13.0
    # {p1, p2} would have to export p1 too, which the table does not price
    assert len(res.kernels) == 3
    assert all(c == 1 for c in res.strategy.execution_counts.values())


def test_bundled_examples_cover_exactly_once():
    for name in example_names():
        g = apply_fission(load_example(name)).graph
        res = greedy_fuse(g)
        assert sorted(m for k in res.kernels for m in k.members) == sorted(n.id for n in g.nodes)
        assert not isinstance(order_kernels(g, res.kernels), Stuck)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 10), st.floats(0.1, 0.9), st.integers(0, 2**31))
def test_greedy_is_feasible_and_disjoint(n, p, seed):
    g = graph_from_edges(n, random_bounded_dag(random.Random(seed), n, p))
    res = greedy_fuse(g)
    members = [m for k in res.kernels for m in k.members]
    assert len(members) == len(set(members)) == n
    assert not independent_violations(res.kernels, g.outputs, range(len(res.kernels)))
    assert not isinstance(order_kernels(g, res.kernels), Stuck)
