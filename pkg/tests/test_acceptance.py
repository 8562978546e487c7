"""One test per acceptance criterion, each printing a single PASS/FAIL line."""

from __future__ import annotations

import dataclasses
import math
import random
import time
import zlib
from fractions import Fraction

import numpy as np
import pytest

from helpers import (
    all_dags,
    chain,
    convex_oracle,
    graph_from_edges,
    independent_violations,
    isolated,
    random_bounded_dag,
    random_edges,
)
from kernorch.bundled import (
    FANOUT_COSTS,
    deep_narrow,
    example_names,
    example_path,
    fanout,
    load_example,
    mutual_cycle,
    mutual_cycle_profile,
)
from kernorch.cost import CostModelConfig, price_candidates
from kernorch.fission import apply_fission
from kernorch.graph_ir import GraphBuilder
from kernorch.identify import DagIndex, enumerate_candidates, enumerate_states, identify, make_kernel
from kernorch.interpreter import eval_graph, random_inputs
from kernorch.orchestrate import Cut, build_blp, optimize, solve
from kernorch.pipeline import PipelineConfig, run_pipeline
from kernorch.rewrite import DIV_MATMUL_SWAP, MATMUL_MERGE, REDUCE_TO_MATMUL, apply_rule
from kernorch.schedule import build_schedule, execute_schedule


@pytest.fixture
def report(capsys):
    def emit(number: int, ok: bool, elapsed: float, limit: float, detail: str = "") -> None:
        verdict = "PASS" if ok and elapsed < limit else "FAIL"
        with capsys.disabled():
            print(f"\n[{verdict}] criterion {number}: {detail} ({elapsed:.2f}s, limit {limit:.0f}s)")
        assert ok, detail
        assert elapsed < limit, f"took {elapsed:.1f}s, limit {limit}s"

    return emit


def as_sets(dag, masks):
    return {frozenset(dag.members(m)) for m in masks}


def test_criterion_1_candidates_equal_convex_oracle(report):
    start = time.perf_counter()
    mismatches, checked = [], 0
    for n in range(1, 6):
        for edges in all_dags(n):
            checked += 1
            dag = DagIndex.from_edges(n, edges)
            if as_sets(dag, enumerate_candidates(dag)) != convex_oracle(n, edges):
                mismatches.append((n, edges))
    rng = random.Random(2024)
    for _ in range(200):
        n = rng.randint(1, 12)
        edges = random_edges(rng, n, rng.uniform(0.05, 0.6))
        dag = DagIndex.from_edges(n, edges)
        checked += 1
        if as_sets(dag, enumerate_candidates(dag)) != convex_oracle(n, edges):
            mismatches.append((n, edges))
    elapsed = time.perf_counter() - start
    report(1, not mismatches, elapsed, 60, f"{checked} DAGs checked, {len(mismatches)} mismatches")


def test_criterion_2_state_counts(report):
    start = time.perf_counter()
    problems = []
    for n in range(1, 13):
        got = len(enumerate_states(chain(n)))
        if got != n + 1:
            problems.append(f"chain({n}) gave {got}")
        got = len(enumerate_states(isolated(n)))
        if got != 2**n:
            problems.append(f"isolated({n}) gave {got}")
    diamond = identify(graph_from_edges(4, [(0, 1), (0, 2), (1, 3), (2, 3)]))
    if len(diamond.states) != 6 or len(diamond.subgraphs) != 12:
        problems.append(f"diamond gave {len(diamond.states)} states, {len(diamond.subgraphs)} subgraphs")
    elapsed = time.perf_counter() - start
    report(2, not problems, elapsed, 5, "; ".join(problems) or "chain n+1, isolated 2^n, diamond 6/12")


def random_instance(rng: random.Random):
    m_target = rng.choice([rng.randint(2, 25), 25])
    n = rng.randint(2, 7)
    g = graph_from_edges(n, random_bounded_dag(rng, n, rng.uniform(0.3, 0.8)))
    pool = identify(g).candidates
    singles = [k for k in pool if len(k.members) == 1 and len(k.output_set) == 1]
    rest = [k for k in pool if k not in singles]
    rng.shuffle(rest)
    chosen = (singles + rest)[: max(m_target, len(singles))][:25]
    kernels = [
        dataclasses.replace(k, id=i, cost_us=rng.choice([float(rng.randint(1, 9)), round(rng.uniform(1, 9), 4)]))
        for i, k in enumerate(chosen)
    ]
    return g, kernels


def test_criterion_3_bnb_equals_exhaustive(report):
    start = time.perf_counter()
    rng = random.Random(7)
    problems, sizes, with_cuts = [], [], 0
    for trial in range(200):
        g, ks = random_instance(rng)
        sizes.append(len(ks))
        inst = build_blp(g, ks)
        cuts = ()
        if len(ks) >= 3 and rng.random() < 0.3:
            cut = Cut(tuple(sorted(rng.sample(range(len(ks)), 2))), (rng.randrange(len(ks)),))
            inst, cuts = inst.with_cut(cut), (cut,)
            with_cuts += 1
        try:
            a = solve(inst, "bnb")
            b = solve(inst, "exhaustive")
        except Exception as e:  # both must agree on infeasibility too
            problems.append(f"trial {trial}: {type(e).__name__} {e}")
            continue
        ca = sum(Fraction(ks[i].cost_us) for i in a.selected)
        cb = sum(Fraction(ks[i].cost_us) for i in b.selected)
        if ca != cb or not a.optimal:
            problems.append(f"trial {trial}: bnb {ca} vs exhaustive {cb}")
        for s in (a, b):
            bad = independent_violations(ks, g.outputs, s.selected, cuts)
            if bad:
                problems.append(f"trial {trial}: {bad}")
    elapsed = time.perf_counter() - start
    detail = f"200 instances, M up to {max(sizes)}, {with_cuts} with cuts, {len(problems)} problems"
    report(3, not problems, elapsed, 120, detail if not problems else detail + ": " + problems[0])


def gelu_oracle(x):
    erf = np.vectorize(math.erf)
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def rows_normalized(x2d, eps):
    mu = x2d.mean(axis=1, keepdims=True)
    var = ((x2d - mu) ** 2).mean(axis=1, keepdims=True)
    return (x2d - mu) / np.sqrt(var + eps)


def fission_cases(rng: np.random.Generator):
    """(operator, attrs, shape, independent oracle, tolerance) per fission rule."""
    rank = int(rng.integers(1, 4))
    shape = [int(d) for d in rng.integers(1, 6, size=rank)]
    axis = int(rng.integers(-rank, rank))
    eps = float(rng.choice([1e-5, 1e-3, 0.1]))

    def softmax(x):
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)

    nshape = [int(d) for d in rng.integers(1, 4, size=int(rng.integers(3, 5)))]
    nshape[-1] = max(nshape[-1], 2)

    def inorm(x):
        flat = x.reshape(x.shape[0] * x.shape[1], -1)
        return rows_normalized(flat, eps).reshape(x.shape)

    lax = int(rng.integers(0, rank))

    def lnorm(x):
        flat = x.reshape(int(np.prod(x.shape[:lax], dtype=int)), -1)
        return rows_normalized(flat, eps).reshape(x.shape)

    return [
        ("softmax", {"axis": axis}, shape, softmax, 1e-9),
        ("instance_norm", {"eps": eps}, nshape, inorm, 1e-9),
        ("layer_norm", {"axis": lax, "eps": eps}, shape, lnorm, 1e-9),
        ("gelu", {}, shape, gelu_oracle, 1e-9),
        ("reduce_mean", {"dim": axis}, shape, lambda x: x.mean(axis=axis), 1e-9),
    ]


def rewrite_case(rule, rng: np.random.Generator):
    m, k, n1, n2 = (int(v) for v in rng.integers(1, 7, size=4))
    b = GraphBuilder("primitive")
    if rule is REDUCE_TO_MATMUL:
        dim = int(rng.integers(0, 2))
        anchor = b.add("reduce", b.input("x", [m, k]), dim=dim, aggregator="sum")
        outs = [anchor]
    elif rule is DIV_MATMUL_SWAP:
        spread = b.add("broadcast", b.input("s", [m]), dim=1, size=k)
        q = b.add("div", b.input("a", [m, k]), spread)
        anchor = b.add("matmul", q, b.input("b", [k, n1]))
        outs = [anchor]
    else:
        a = b.input("a", [m, k])
        anchor = b.add("matmul", a, b.input("b", [k, n1]))
        outs = [anchor, b.add("matmul", a, b.input("c", [k, n2]))]
    return b.build(outs), anchor


def test_criterion_4_rules_preserve_semantics(report):
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    failures = []
    for _ in range(50):
        for kind, attrs, shape, oracle, tol in fission_cases(rng):
            b = GraphBuilder("operator")
            y = b.add(kind, b.input("x", shape), **attrs)
            lowered = apply_fission(b.build([y])).graph
            x = rng.standard_normal(shape) * rng.choice([0.5, 1.0, 4.0])
            got = eval_graph(lowered, {"x": x})[lowered.outputs[0]]
            want = oracle(x)
            if not np.allclose(got, want, atol=tol, rtol=tol) or got.shape != want.shape:
                failures.append(f"{kind} {shape} {attrs}")
        for rule in (REDUCE_TO_MATMUL, DIV_MATMUL_SWAP, MATMUL_MERGE):
            g, anchor = rewrite_case(rule, rng)
            out = apply_rule(g, rule, anchor)
            if out is None:
                failures.append(f"{rule.name} did not match")
                continue
            x = random_inputs(g, rng)
            if "s" in x:
                x["s"] = np.abs(x["s"]) + 0.5
            ref, new = eval_graph(g, x), eval_graph(out, x)
            for t in g.outputs:
                if not np.allclose(new[t], ref[t], atol=1e-9, rtol=1e-9):
                    failures.append(f"{rule.name} output {t}")
    elapsed = time.perf_counter() - start
    detail = f"5 fission + 3 rewrite rules x 50 probes, {len(failures)} failures"
    report(4, not failures, elapsed, 60, detail if not failures else detail + ": " + failures[0])


def test_criterion_5_fanout_recomputation(report):
    start = time.perf_counter()
    g = fanout()
    table = [(list(m), list(m) if len(m) == 1 else [m[-1]], c) for m, c in FANOUT_COSTS.items()]
    ks = [dataclasses.replace(make_kernel(g, i, m, o), cost_us=c) for i, (m, o, c) in enumerate(table)]
    strategy, _ = optimize(g, ks)
    chosen = {ks[i].members for i in strategy.selected}
    disjoint = [i for i, k in enumerate(ks) if k.members in {(0,), (1,), (2,)}]
    disjoint_cost = math.fsum(ks[i].cost_us for i in disjoint)
    ok = (
        strategy.total_cost == 12.0
        and chosen == {(0, 1), (0, 2)}
        and strategy.execution_counts[0] == 2
        and disjoint_cost == 13.0
        and not independent_violations(ks, g.outputs, disjoint)
    )
    elapsed = time.perf_counter() - start
    report(5, ok, elapsed, 5, f"optimum {strategy.total_cost} with p1 x{strategy.execution_counts[0]}, disjoint {disjoint_cost}")


def test_criterion_6_blp_beats_greedy(report):
    start = time.perf_counter()
    rows, problems = [], []
    for name in example_names():
        res = run_pipeline(load_example(name))
        blp, greedy = Fraction(res.strategy.total_cost), Fraction(res.greedy.strategy.total_cost)
        rows.append(f"{name} {float(blp):.3f}/{float(greedy):.3f}")
        if blp > greedy:
            problems.append(f"{name}: blp {blp} > greedy {greedy}")
        if name in ("efficientvit_attention", "segformer_fragment") and not blp < greedy:
            problems.append(f"{name}: not strictly better")
    elapsed = time.perf_counter() - start
    report(6, not problems, elapsed, 60, "; ".join(problems) or ", ".join(rows))


def test_criterion_7_schedules_match_reference(report):
    start = time.perf_counter()
    problems = []
    for name in example_names():
        g = load_example(name)
        res = run_pipeline(g, PipelineConfig(verify_inputs=0, compare_greedy=False))
        schedule = build_schedule(res.graph, [res.kernels[i] for i in res.strategy.selected])
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        for _ in range(10):
            x = random_inputs(g, rng)
            want, got = eval_graph(g, x), execute_schedule(schedule, x)
            for t in g.outputs:
                if not np.allclose(got[t], want[t], atol=1e-9, rtol=1e-9):
                    problems.append(f"{name} output {t}")
        expected = math.fsum(res.kernels[i].cost_us for i in res.strategy.selected)
        if res.strategy.total_cost != expected or schedule.total_cost != expected:
            problems.append(f"{name}: cost {res.strategy.total_cost} vs {expected}")
    elapsed = time.perf_counter() - start
    report(7, not problems, elapsed, 60, "; ".join(problems[:3]) or f"{len(example_names())} examples x 10 inputs")


def test_criterion_8_mutual_cycle_converges(report):
    start = time.perf_counter()
    g = mutual_cycle()
    config = CostModelConfig.load(example_path("mutual_cycle").with_name("mutual_cycle.cost.json"))
    kernels = price_candidates(g, identify(g).candidates, config, mutual_cycle_profile())
    strategy, _ = optimize(g, kernels)
    ok = 1 <= strategy.cuts_applied <= 3 and strategy.optimal
    elapsed = time.perf_counter() - start
    report(8, ok, elapsed, 5, f"{strategy.cuts_applied} cut iteration(s), cost {strategy.total_cost}")


def test_criterion_9_scale(report):
    start = time.perf_counter()
    g = deep_narrow()
    ident = identify(g)
    kernels = price_candidates(g, ident.candidates)
    strategy, _ = optimize(g, kernels)
    elapsed = time.perf_counter() - start
    ok = len(ident.states) >= 500 and len(ident.candidates) >= 3000 and strategy.optimal
    detail = f"{len(g.nodes)} primitives, {len(ident.states)} states, {len(ident.candidates)} candidates, optimal={strategy.optimal}"
    report(9, ok, elapsed, 600, detail)
