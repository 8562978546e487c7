"""Shape rules, forward shape inference and structural validation."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

from ..errors import CycleError, ShapeError
from .graph import (
    ELEMENTWISE_BINARY,
    ELEMENTWISE_UNARY,
    LEVELS,
    OPERATOR_KINDS,
    PRIMITIVE_KINDS,
    Graph,
    Shape,
    numel,
    topo_sort,
)

MAX_ELEMENTS = 2**63 - 1


@dataclass(frozen=True)
class OpaqueOp:
    """Shape and value semantics for an operator with no primitive decomposition."""

    name: str
    shape_fn: Callable[[Mapping[str, Any], list[Shape]], Shape]
    eval_fn: Callable[[Mapping[str, Any], list], Any] | None = None


OPAQUE_OPS: dict[str, OpaqueOp] = {}


def register_opaque(op: OpaqueOp) -> None:
    OPAQUE_OPS[op.name] = op


def _topk_shape(attrs, shapes):
    (s,) = shapes
    axis = _axis(attrs.get("axis", -1), len(s))
    k = int(attrs["k"])
    if not 1 <= k <= s[axis]:
        raise ShapeError(f"topk k={k} outside 1..{s[axis]}")
    return s[:axis] + (k,) + s[axis + 1 :]


def _topk_eval(attrs, inputs):
    import numpy as np

    (x,) = inputs
    axis = _axis(attrs.get("axis", -1), x.ndim)
    k = int(attrs["k"])
    return -np.take(np.sort(-x, axis=axis, kind="stable"), np.arange(k), axis=axis)


register_opaque(OpaqueOp("topk", _topk_shape, _topk_eval))


def _axis(a: int, rank: int) -> int:
    a = int(a)
    if a < 0:
        a += rank
    if not 0 <= a < rank:
        raise ShapeError(f"axis {a} out of range for rank {rank}")
    return a


def _arity(kind: str, attrs: Mapping[str, Any]) -> int | None:
    if kind in ELEMENTWISE_BINARY or kind in ("matmul", "batched_matmul", "conv2d"):
        return 2
    if kind == "constant":
        return 0
    if kind == "concat":
        return int(attrs.get("input_count", 0)) or None
    if kind == "opaque" or kind not in PRIMITIVE_KINDS | OPERATOR_KINDS:
        return None
    return 1


def _same(kind: str, shapes: list[Shape]) -> Shape:
    first = shapes[0]
    for s in shapes[1:]:
        if s != first:
            raise ShapeError(f"{kind} operand shapes differ: {list(first)} vs {list(s)}")
    return first


def _matmul(a: Shape, b: Shape) -> Shape:
    if len(a) != 2 or len(b) != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {list(a)} and {list(b)}")
    if a[1] != b[0]:
        raise ShapeError(f"contraction mismatch {a[1]}≠{b[0]}")
    return (a[0], b[1])


def _bmm(a: Shape, b: Shape) -> Shape:
    if len(a) < 3 or len(a) != len(b):
        raise ShapeError(f"batched_matmul expects equal rank >= 3, got {list(a)} and {list(b)}")
    if a[:-2] != b[:-2]:
        raise ShapeError(f"batch dims differ: {list(a[:-2])} vs {list(b[:-2])}")
    if a[-1] != b[-2]:
        raise ShapeError(f"contraction mismatch {a[-1]}≠{b[-2]}")
    return a[:-1] + (b[-1],)


def _conv2d(attrs, x: Shape, w: Shape) -> Shape:
    if len(x) != 4 or len(w) != 4:
        raise ShapeError("conv2d expects NCHW input and FCRS weight")
    stride = int(attrs.get("stride", 1))
    pad = int(attrs.get("padding", 0))
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d stride must be >= 1 and padding >= 0")
    n, c, h, wd = x
    f, c2, r, s = w
    if c != c2:
        raise ShapeError(f"channel mismatch {c}≠{c2}")
    ho = (h + 2 * pad - r) // stride + 1
    wo = (wd + 2 * pad - s) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d window larger than padded input")
    return (n, f, ho, wo)


def primitive_shape(kind: str, attrs: Mapping[str, Any], shapes: Sequence[Shape]) -> Shape:
    """Output shape of one primitive or operator applied to ``shapes``."""
    shapes = [tuple(s) for s in shapes]
    expected = _arity(kind, attrs)
    if expected is not None and len(shapes) != expected:
        raise ShapeError(f"{kind} expects {expected} inputs, got {len(shapes)}")

    if kind in ELEMENTWISE_UNARY or kind in ELEMENTWISE_BINARY:
        if kind == "scale" and "c" not in attrs:
            raise ShapeError("scale requires attribute 'c'")
        return _same(kind, shapes)
    if kind == "reduce":
        (s,) = shapes
        if attrs.get("aggregator", "sum") not in ("sum", "max", "mean"):
            raise ShapeError(f"unknown aggregator {attrs.get('aggregator')!r}")
        d = _axis(attrs["dim"], len(s))
        return s[:d] + s[d + 1 :]
    if kind == "broadcast":
        (s,) = shapes
        d = int(attrs["dim"])
        size = int(attrs["size"])
        if not 0 <= d <= len(s):
            raise ShapeError(f"broadcast dim {d} out of range for rank {len(s)}")
        if size < 1:
            raise ShapeError("broadcast size must be >= 1")
        return s[:d] + (size,) + s[d:]
    if kind == "transpose":
        (s,) = shapes
        perm = [int(p) for p in attrs["perm"]]
        if sorted(perm) != list(range(len(s))):
            raise ShapeError(f"perm {perm} is not a permutation of rank {len(s)}")
        return tuple(s[p] for p in perm)
    if kind == "reshape":
        (s,) = shapes
        new = tuple(int(d) for d in attrs["shape"])
        if any(d < 1 for d in new) or numel(new) != numel(s):
            raise ShapeError(f"cannot reshape {list(s)} to {list(new)}")
        return new
    if kind == "pad":
        (s,) = shapes
        pads = [tuple(int(v) for v in p) for p in attrs["pads"]]
        if len(pads) != len(s) or any(lo < 0 or hi < 0 for lo, hi in pads):
            raise ShapeError("pad needs one non-negative (low, high) pair per axis")
        return tuple(d + lo + hi for d, (lo, hi) in zip(s, pads))
    if kind == "slice":
        (s,) = shapes
        starts = [int(v) for v in attrs["starts"]]
        stops = [int(v) for v in attrs["stops"]]
        if len(starts) != len(s) or len(stops) != len(s):
            raise ShapeError("slice needs one start/stop per axis")
        for d, a, b in zip(s, starts, stops):
            if not 0 <= a < b <= d:
                raise ShapeError(f"slice [{a}:{b}] invalid for extent {d}")
        return tuple(b - a for a, b in zip(starts, stops))
    if kind == "split":
        (s,) = shapes
        ax = _axis(attrs["axis"], len(s))
        sizes = [int(v) for v in attrs["sizes"]]
        idx = int(attrs["index"])
        if sum(sizes) != s[ax] or any(v < 1 for v in sizes):
            raise ShapeError(f"split sizes {sizes} do not cover extent {s[ax]}")
        if not 0 <= idx < len(sizes):
            raise ShapeError(f"split index {idx} out of range")
        return s[:ax] + (sizes[idx],) + s[ax + 1 :]
    if kind == "concat":
        if not shapes:
            raise ShapeError("concat needs at least one input")
        ax = _axis(attrs["axis"], len(shapes[0]))
        for t in shapes[1:]:
            if len(t) != len(shapes[0]) or t[:ax] + t[ax + 1 :] != shapes[0][:ax] + shapes[0][ax + 1 :]:
                raise ShapeError(f"concat operands disagree off axis {ax}")
        return shapes[0][:ax] + (sum(t[ax] for t in shapes),) + shapes[0][ax + 1 :]
    if kind == "matmul":
        return _matmul(*shapes)
    if kind == "batched_matmul":
        return _bmm(*shapes)
    if kind == "conv2d":
        return _conv2d(attrs, *shapes)
    if kind == "constant":
        shape = tuple(int(d) for d in attrs["shape"])
        if not shape or any(d < 1 for d in shape):
            raise ShapeError(f"constant shape {list(shape)} must be non-empty with extents >= 1")
        fill = attrs.get("fill", "zeros")
        if fill == "literal":
            if len(attrs.get("data", ())) != numel(shape):
                raise ShapeError("constant literal data length does not match shape")
        elif fill not in ("ones", "zeros"):
            raise ShapeError(f"unknown constant fill {fill!r}")
        return shape
    if kind == "opaque":
        name = attrs.get("name")
        if name in OPAQUE_OPS:
            return tuple(OPAQUE_OPS[name].shape_fn(attrs, shapes))
        if "out_shape" in attrs:
            return tuple(int(d) for d in attrs["out_shape"])
        raise ShapeError(f"opaque primitive {name!r} has no shape function")
    # operator level
    if kind in ("softmax", "gelu"):
        (s,) = shapes
        if kind == "softmax":
            _axis(attrs.get("axis", -1), len(s))
        return s
    if kind == "layer_norm":
        (s,) = shapes
        _axis(attrs.get("axis", -1), len(s))
        return s
    if kind == "instance_norm":
        (s,) = shapes
        if len(s) < 3:
            raise ShapeError("instance_norm expects rank >= 3 (N, C, spatial...)")
        return s
    if kind == "reduce_mean":
        (s,) = shapes
        d = _axis(attrs.get("dim", -1), len(s))
        return s[:d] + s[d + 1 :]
    if kind in OPAQUE_OPS:
        return tuple(OPAQUE_OPS[kind].shape_fn(attrs, shapes))
    raise ShapeError(f"unknown kind {kind!r}")


def _compute_shapes(g: Graph) -> dict[int, Shape]:
    shapes: dict[int, Shape] = {}
    inputs = g.input_specs
    for nid in topo_sort(g):
        node = g.node(nid)
        in_shapes = []
        for r in node.inputs:
            if isinstance(r, str):
                if r not in inputs:
                    raise ShapeError(f"unknown graph input {r!r}", nid)
                in_shapes.append(inputs[r].shape)
            else:
                if r not in shapes:
                    raise ShapeError(f"dangling input reference to node {r}", nid)
                in_shapes.append(shapes[r])
        try:
            out = primitive_shape(node.kind, node.attrs, in_shapes)
        except ShapeError as e:
            raise ShapeError(str(e), nid) from None
        except (KeyError, TypeError, ValueError) as e:
            raise ShapeError(f"bad attributes for {node.kind}: {e}", nid) from None
        if numel(out) > MAX_ELEMENTS:
            raise ShapeError("tensor exceeds 63-bit element count", nid)
        shapes[nid] = out
    return shapes


def infer_shapes(g: Graph) -> Graph:
    """Return ``g`` with every node's output shape populated."""
    if g.shapes is not None:
        return g
    return replace(g, shapes=_compute_shapes(g))


def shapes_of(g: Graph) -> Mapping[int, Shape]:
    if g.shapes is not None:
        return g.shapes
    # graphs are immutable, so memoize on the instance
    cached = g.__dict__.get("_shape_cache")
    if cached is None:
        cached = _compute_shapes(g)
        object.__setattr__(g, "_shape_cache", cached)
    return cached


def ref_shape(g: Graph, ref) -> Shape:
    if isinstance(ref, str):
        return g.input_specs[ref].shape
    return shapes_of(g)[ref]


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(g: Graph) -> ValidationReport:
    """Collect structural and shape violations; never raises."""
    report = ValidationReport()
    v = report.violations
    if g.level not in LEVELS:
        v.append(f"unknown level {g.level!r}")
    seen: set[int] = set()
    for n in g.nodes:
        if n.id in seen:
            v.append(f"duplicate node id {n.id}")
        seen.add(n.id)
    names = set()
    for t in g.inputs:
        if t.name in names:
            v.append(f"duplicate graph input {t.name!r}")
        names.add(t.name)
        if not t.shape or any(d < 1 for d in t.shape):
            v.append(f"graph input {t.name!r} has invalid shape {list(t.shape)}")
    for n in g.nodes:
        known = n.kind in PRIMITIVE_KINDS
        if g.level == "operator":
            known = known or n.kind in OPERATOR_KINDS or n.kind in OPAQUE_OPS
        if not known:
            v.append(f"node {n.id}: unknown kind {n.kind!r}")
        for slot, r in enumerate(n.inputs):
            if isinstance(r, str):
                if r not in names:
                    v.append(f"node {n.id} slot {slot}: dangling graph input {r!r}")
            elif r not in seen:
                v.append(f"node {n.id} slot {slot}: dangling reference to node {r}")
    if not g.outputs:
        v.append("graph has no outputs")
    for o in g.outputs:
        if o not in seen:
            v.append(f"output {o} is not a node")
    if v:
        return report
    try:
        topo_sort(g)
    except CycleError as e:
        v.append(str(e))
        return report
    try:
        _compute_shapes(g)
    except ShapeError as e:
        v.append(str(e))
    return report
