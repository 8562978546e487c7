from __future__ import annotations

import json
import random

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import graph_from_edges, random_bounded_dag
from kernorch.bundled import fanout, mutual_cycle, softmax, softmax_matmul
from kernorch.cost import price_candidates
from kernorch.fission import apply_fission
from kernorch.graph_ir import Graph, GraphBuilder, topo_sort
from kernorch.identify import identify, make_kernel
from kernorch.interpreter import compare_maps, eval_graph, eval_operator, random_inputs
from kernorch.orchestrate import optimize
from kernorch.schedule import (
    Schedule,
    Stuck,
    build_schedule,
    emit_dot,
    execute_schedule,
    order_kernels,
    schedule_from_json,
    schedule_to_json,
)


def attention_kernels():
    """Transpose, QK^T, the softmax body and the PV matmul as four kernels."""
    g = apply_fission(softmax_matmul()).graph
    by_kind = {}
    for n in g.nodes:
        by_kind.setdefault(n.kind, []).append(n.id)
    order = topo_sort(g)
    mm1, mm2 = sorted(by_kind["matmul"], key=order.index)
    body = by_kind["exp"] + by_kind["reduce"] + by_kind["broadcast"] + by_kind["div"]
    groups = [(by_kind["transpose"], by_kind["transpose"]), ([mm1], [mm1]), (body, by_kind["div"]), ([mm2], [mm2])]
    return g, groups


def test_four_kernel_attention_order():
    g, groups = attention_kernels()
    ks = [make_kernel(g, i, m, o) for i, (m, o) in enumerate(groups)]
    s = order_kernels(g, ks)
    assert isinstance(s, Schedule) and [k.id for k in s.kernels] == [0, 1, 2, 3]
    # ids that disagree with dataflow still come out in dependency order
    ks = [make_kernel(g, i, m, o) for i, (m, o) in zip([3, 2, 1, 0], groups)]
    assert [k.id for k in order_kernels(g, ks).kernels] == [3, 2, 1, 0]
    x = random_inputs(g, np.random.default_rng(0))
    assert compare_maps(execute_schedule(order_kernels(g, ks), x), eval_graph(g, x)).ok


def test_whole_graph_kernel():
    g = apply_fission(softmax()).graph
    s = build_schedule(g, [make_kernel(g, 0, [n.id for n in g.nodes], g.outputs)])
    assert len(s.steps) == 1


def test_mutual_cycle_is_stuck():
    g = mutual_cycle()
    ks = [make_kernel(g, 0, [2, 1], [2, 1]), make_kernel(g, 1, [0, 3], [0, 3])]
    assert order_kernels(g, ks) == Stuck((0, 1))


def test_softmax_singletons_match_operator():
    b = GraphBuilder("operator")
    y = b.add("softmax", b.input("x", [2, 8]), axis=-1)
    op = b.build([y])
    g = apply_fission(op).graph
    ks = [make_kernel(g, i, [nid], [nid]) for i, nid in enumerate(topo_sort(g))]
    s = build_schedule(g, ks)
    assert len(s.steps) == 4
    x = np.random.default_rng(3).standard_normal((2, 8))
    out = execute_schedule(s, {"x": x})[y]
    assert np.allclose(out, eval_operator("softmax", {"axis": -1}, [x]), atol=1e-9, rtol=1e-9)


def test_redundant_schedule_matches_reference():
    g = fanout()
    ks = [make_kernel(g, 0, [0, 1], [1]), make_kernel(g, 1, [0, 2], [2])]
    x = random_inputs(g, np.random.default_rng(4))
    out = execute_schedule(build_schedule(g, ks), x)
    ref = eval_graph(g, x)
    assert all(np.array_equal(out[k], ref[k]) for k in ref)


def test_layout_only_graph_is_bit_exact():
    b = GraphBuilder("primitive")
    t = b.add("transpose", b.input("x", [3, 5]), perm=[1, 0])
    u = b.add("transpose", t, perm=[1, 0])
    g = b.build([u])
    x = np.random.default_rng(5).standard_normal((3, 5))
    s = build_schedule(g, [make_kernel(g, 0, [t, u], [u])])
    assert np.array_equal(execute_schedule(s, {"x": x})[u], x)


def test_dot_output():
    empty = Schedule(Graph((), (), (), "primitive"), ())
    assert emit_dot(empty) == "digraph schedule {\n  rankdir=TB;\n}\n"
    g, groups = attention_kernels()
    s = build_schedule(g, [make_kernel(g, i, m, o) for i, (m, o) in enumerate(groups)])
    text = emit_dot(s)
    assert text.count("subgraph cluster_") == 4
    assert text == emit_dot(s)
    assert emit_dot(g).startswith("digraph primitives {")


def test_json_round_trip():
    g, groups = attention_kernels()
    s = build_schedule(g, [make_kernel(g, i, m, o) for i, (m, o) in enumerate(groups)])
    doc = schedule_to_json(s)
    again = schedule_from_json(json.loads(json.dumps(doc)))
    assert schedule_to_json(again) == doc
    assert {k["class"] for k in doc["kernels"]} <= {"mem", "compute"}


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.floats(0.2, 0.9), st.integers(0, 2**31))
def test_optimized_schedules_execute_correctly(n, p, seed):
    rng = random.Random(seed)
    g = graph_from_edges(n, random_bounded_dag(rng, n, p))
    kernels = price_candidates(g, identify(g).candidates)
    strategy, _ = optimize(g, kernels)
    s = build_schedule(g, [kernels[i] for i in strategy.selected])
    x = random_inputs(g, np.random.default_rng(seed))
    assert compare_maps(execute_schedule(s, x), eval_graph(g, x), 1e-12, 1e-12).ok
    assert s.total_cost == strategy.total_cost
