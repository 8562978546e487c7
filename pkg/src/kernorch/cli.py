"""Command-line entry point (``kernorch``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .cost import CostModelConfig, ProfileTable
from .errors import Infeasible, KernorchError, SolverTimeout
from .fission import apply_fission
from .graph_ir import Graph, canonical_hash, dumps, graph_to_dict, load_graph, validate
from .identify import DEFAULT_MAX_KERNEL_PRIMITIVES, identify
from .interpreter import as_tensor, eval_graph, random_inputs, tensor_from_json, tensor_to_json
from .orchestrate import DEFAULT_TIMEOUT_S
from .pipeline import PipelineConfig, PipelineResult, StageError, run_pipeline
from .rewrite import search
from .schedule import emit_dot, execute_schedule, schedule_from_json, schedule_to_json

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_TIMEOUT = 3

log = logging.getLogger("kernorch")


def _write(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _load_inputs(path: str | None, g: Graph, seed: int) -> dict[str, np.ndarray]:
    if path is None:
        return random_inputs(g, np.random.default_rng(seed))
    raw = json.loads(Path(path).read_text())
    out = {}
    for name, v in raw.items():
        out[name] = tensor_from_json(v) if isinstance(v, dict) else as_tensor(v)
    return out


def _outputs_json(values: dict[int, np.ndarray]) -> str:
    return dumps({"outputs": {str(k): tensor_to_json(v) for k, v in sorted(values.items())}})


def _primitive(g: Graph) -> Graph:
    return apply_fission(g).graph if g.level == "operator" else g


def _config(args: argparse.Namespace) -> PipelineConfig:
    cost = CostModelConfig.load(args.cost_model) if args.cost_model else CostModelConfig()
    profile = ProfileTable.load(args.profile) if args.profile else None
    return PipelineConfig(
        rewrite_depth=args.rewrite_depth,
        partition_max=args.partition_max,
        max_kernel_primitives=args.max_kernel_primitives,
        cost=cost,
        profile=profile,
        solver=args.solver,
        timeout_s=args.timeout_s,
        seed=args.seed,
    )


def _summary(result: PipelineResult) -> str:
    rows = result.summary_rows()
    width = max(len(k) for k, _ in rows)
    return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)


def _strategy_json(result: PipelineResult) -> dict[str, Any]:
    d = result.strategy.to_json()
    d["kernels"] = [k.to_json() for k in result.kernels]
    return d


def _report(result: PipelineResult, artifact: str, args: argparse.Namespace) -> int:
    # the artifact goes to --emit (or stdout); the summary table goes wherever the artifact does not
    _write(artifact, args.emit)
    out = sys.stdout if args.emit else sys.stderr
    out.write(_summary(result))
    if args.dot:
        Path(args.dot).write_text(emit_dot(result.schedule))
    if result.verification is not None and not result.verification.ok:
        print(f"verify: schedule disagrees with the reference: {result.verification}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK if result.strategy.optimal else EXIT_TIMEOUT


def cmd_eval(args) -> int:
    g = load_graph(args.graph)
    _write(_outputs_json(eval_graph(g, _load_inputs(args.inputs, g, args.seed))), args.emit)
    return EXIT_OK


def cmd_fission(args) -> int:
    g = load_graph(args.graph)
    _write(dumps(graph_to_dict(apply_fission(g).graph)), args.emit)
    return EXIT_OK


def cmd_rewrite(args) -> int:
    g = _primitive(load_graph(args.graph))
    variants = search(g, max_depth=args.rewrite_depth, probes=2, seed=args.seed)
    doc = {
        "variants": [
            {"hash": canonical_hash(v), "primitives": len(v.nodes), "graph": graph_to_dict(v)} for v in variants
        ]
    }
    _write(dumps(doc), args.emit)
    return EXIT_OK


def cmd_identify(args) -> int:
    g = _primitive(load_graph(args.graph))
    ident = identify(g, args.max_kernel_primitives)
    if args.dump:
        _write(dumps(ident.to_json()), args.emit)
    else:
        doc = {
            "states": len(ident.states),
            "subgraphs": len(ident.subgraphs),
            "pruned": ident.pruned,
            "candidates": len(ident.candidates),
        }
        _write(dumps(doc), args.emit)
    return EXIT_OK


def cmd_optimize(args) -> int:
    result = run_pipeline(load_graph(args.graph), _config(args))
    return _report(result, dumps(_strategy_json(result)), args)


def cmd_schedule(args) -> int:
    result = run_pipeline(load_graph(args.graph), _config(args))
    return _report(result, dumps(schedule_to_json(result.schedule)), args)


def cmd_run(args) -> int:
    schedule = schedule_from_json(json.loads(Path(args.schedule).read_text()))
    inputs = _load_inputs(args.inputs, schedule.graph, args.seed)
    _write(_outputs_json(execute_schedule(schedule, inputs)), args.emit)
    return EXIT_OK


def cmd_compare(args) -> int:
    result = run_pipeline(load_graph(args.graph), _config(args))
    assert result.greedy is not None
    doc = {
        "optimal_cost_us": result.strategy.total_cost,
        "optimal_kernels": len(result.strategy.selected),
        "greedy_cost_us": result.greedy.strategy.total_cost,
        "greedy_kernels": len(result.greedy.kernels),
        "ratio": result.greedy_ratio,
        "optimal": result.strategy.optimal,
    }
    _write(dumps(doc), args.emit)
    return EXIT_OK if result.strategy.optimal else EXIT_TIMEOUT


def cmd_validate(args) -> int:
    report = validate(load_graph(args.graph))
    for v in report.violations:
        print(v)
    if report.ok:
        print("ok")
        return EXIT_OK
    return EXIT_ERROR


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--cost-model", help="cost model JSON (analytic coefficients)")
    common.add_argument("--profile", help="measured latency table JSON")
    common.add_argument("--rewrite-depth", type=int, default=3)
    common.add_argument("--max-kernel-primitives", type=int, default=DEFAULT_MAX_KERNEL_PRIMITIVES)
    common.add_argument("--partition-max", type=int, default=None)
    common.add_argument("--solver", choices=["bnb", "exhaustive"], default="bnb")
    common.add_argument("--timeout-s", type=float, default=DEFAULT_TIMEOUT_S)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1, help="accepted for compatibility; stages run sequentially")
    common.add_argument("--dot", help="also write a Graphviz rendering of the schedule here")
    common.add_argument("--dump", action="store_true", help="full output instead of a summary")
    common.add_argument("--emit", help="write the main artifact here instead of stdout")
    common.add_argument("--inputs", help="input tensors JSON: {name: {shape, data}} or nested lists")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kernorch", description="Optimal kernel orchestration for tensor programs.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, target, help_ in [
        ("eval", cmd_eval, "graph", "evaluate a graph with the reference interpreter"),
        ("fission", cmd_fission, "graph", "lower operators to primitives"),
        ("rewrite", cmd_rewrite, "graph", "list equivalent rewrite variants"),
        ("identify", cmd_identify, "graph", "enumerate states and candidate kernels"),
        ("optimize", cmd_optimize, "graph", "solve for the optimal orchestration strategy"),
        ("schedule", cmd_schedule, "graph", "optimize and emit an executable kernel schedule"),
        ("run", cmd_run, "schedule", "execute a schedule JSON"),
        ("compare", cmd_compare, "graph", "optimal orchestration versus the greedy baseline"),
        ("validate", cmd_validate, "graph", "check a graph file for structural and shape errors"),
    ]:
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.add_argument(target)
        sp.set_defaults(func=fn)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except StageError as e:
        inner = e.error
        if isinstance(inner, Infeasible):
            print(f"infeasible ({e.stage}): {inner}", file=sys.stderr)
            return EXIT_INFEASIBLE
        if isinstance(inner, SolverTimeout):
            print(f"timeout ({e.stage}): {inner}", file=sys.stderr)
            return EXIT_TIMEOUT
        print(f"error in {e.stage}: {inner}", file=sys.stderr)
        return EXIT_ERROR
    except Infeasible as e:
        print(f"infeasible ({args.command}): {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverTimeout as e:
        print(f"timeout ({args.command}): {e}", file=sys.stderr)
        return EXIT_TIMEOUT
    except (KernorchError, OSError, ValueError, KeyError) as e:
        print(f"error in {args.command}: {e}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
