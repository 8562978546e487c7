"""Exception types shared across the pipeline."""

from __future__ import annotations


class KernorchError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(KernorchError):
    def __init__(self, message: str, node: int | None = None):
        self.node = node
        prefix = f"node {node}: " if node is not None else ""
        super().__init__(prefix + message)


class CycleError(KernorchError):
    def __init__(self, nodes):
        self.nodes = sorted(nodes)
        super().__init__("cycle through {" + ", ".join(map(str, self.nodes)) + "}")


class ParseError(KernorchError):
    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class MissingInput(KernorchError):
    pass


class DuplicateRule(KernorchError):
    pass


class StateExplosion(KernorchError):
    def __init__(self, count: int, cap: int):
        self.count = count
        self.cap = cap
        super().__init__(f"execution state count reached {count} (cap {cap})")


class Infeasible(KernorchError):
    pass


class SolverTimeout(KernorchError):
    """The time budget ran out before any feasible selection was found."""

    def __init__(self, budget_s: float):
        self.budget_s = budget_s
        super().__init__(f"no feasible selection found within {budget_s:g} s")
