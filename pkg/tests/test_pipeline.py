from __future__ import annotations

import pytest

from kernorch.bundled import example_names, fanout, fanout_profile, load_example, softmax_matmul
from kernorch.errors import Infeasible
from kernorch.graph_ir import GraphBuilder
from kernorch.cost import ProfileTable
from kernorch.pipeline import PipelineConfig, StageError, run_pipeline
from kernorch.schedule import schedule_to_json


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(solver="simplex")
    with pytest.raises(ValueError):
        PipelineConfig(rewrite_depth=-1)


def test_fanout_with_profile():
    res = run_pipeline(fanout(), PipelineConfig(profile=fanout_profile()))
    assert res.strategy.total_cost == 12.0 and res.strategy.optimal
    assert res.greedy.strategy.total_cost == 13.0
    assert res.verification.ok


def test_summary_rows_and_timings():
    res = run_pipeline(softmax_matmul())
    keys = [k for k, _ in res.summary_rows()]
    assert keys[0] == "primitives" and "greedy_ratio" in keys
    assert {"fission", "identify", "optimize", "verify"} <= set(res.timings)
    assert res.greedy_ratio is not None and res.greedy_ratio >= 1.0


def test_deterministic_schedule():
    a = schedule_to_json(run_pipeline(softmax_matmul()).schedule)
    b = schedule_to_json(run_pipeline(softmax_matmul()).schedule)
    assert a == b


@pytest.mark.parametrize("limit", [3, 6])
def test_partitioned_runs_verify(limit):
    for name in example_names():
        res = run_pipeline(load_example(name), PipelineConfig(partition_max=limit, rewrite_depth=1))
        assert res.verification.ok, name


def test_reject_everything_is_infeasible():
    b = GraphBuilder("primitive")
    g = b.build([b.add("relu", b.input("x", [4]))])
    with pytest.raises(StageError) as info:
        run_pipeline(g, PipelineConfig(profile=ProfileTable(fallback="reject")))
    assert isinstance(info.value.error, Infeasible)
    assert str(info.value).startswith(info.value.stage)
