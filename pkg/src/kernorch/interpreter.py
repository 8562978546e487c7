"""Reference evaluator for primitives, composite operators and whole graphs.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Nothing here is fast; it exists to be obviously correct.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import MissingInput, ShapeError
from .graph_ir import OPAQUE_OPS, PRIMITIVE_KINDS, Graph, primitive_shape, topo_sort

DenseTensor = np.ndarray

DEFAULT_ATOL = 1e-9
DEFAULT_RTOL = 1e-9


def as_tensor(x: Any) -> DenseTensor:
    # np.ascontiguousarray would promote 0-d results to shape (1,)
    a = np.asarray(x, dtype=np.float64)
    return a if a.flags.c_contiguous else a.copy(order="C")


def tensor_from_json(d: Mapping[str, Any]) -> DenseTensor:
    shape = tuple(int(s) for s in d["shape"])
    data = np.asarray(d["data"], dtype=np.float64)
    if data.size != math.prod(shape):
        raise ShapeError(f"literal has {data.size} elements, shape {list(shape)} needs {math.prod(shape)}")
    return data.reshape(shape)


def tensor_to_json(t: DenseTensor) -> dict[str, Any]:
    return {"shape": list(t.shape), "data": [float(v) for v in np.asarray(t).ravel()]}


def _check_shape(kind, attrs, inputs: Sequence[DenseTensor]):
    return primitive_shape(kind, attrs, [tuple(t.shape) for t in inputs])


def _conv2d(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    r, s = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (r, s), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # win: N C Ho Wo R S ; w: F C R S
    return np.einsum("nchwrs,fcrs->nfhw", win, w)


def _constant(attrs) -> np.ndarray:
    shape = tuple(int(d) for d in attrs["shape"])
    fill = attrs.get("fill", "zeros")
    if fill == "ones":
        return np.ones(shape)
    if fill == "zeros":
        return np.zeros(shape)
    return np.asarray(attrs["data"], dtype=np.float64).reshape(shape)


def eval_primitive(kind: str, attrs: Mapping[str, Any], inputs: Sequence[DenseTensor]) -> DenseTensor:
    """Evaluate one primitive. Division by zero follows IEEE rules."""
    inputs = [as_tensor(t) for t in inputs]
    out_shape = _check_shape(kind, attrs, inputs)
    with np.errstate(all="ignore"):
        out = _eval(kind, attrs, inputs)
    out = as_tensor(out)
    if out.shape != out_shape:
        raise ShapeError(f"{kind} produced {list(out.shape)}, expected {list(out_shape)}")
    return out


def _eval(kind, attrs, x):
    if kind == "add":
        return x[0] + x[1]
    if kind == "sub":
        return x[0] - x[1]
    if kind == "mul":
        return x[0] * x[1]
    if kind == "div":
        return x[0] / x[1]
    if kind == "relu":
        return np.maximum(x[0], 0.0)
    if kind == "sqrt":
        return np.sqrt(x[0])
    if kind == "erf":
        return erf(x[0])
    if kind == "exp":
        return np.exp(x[0])
    if kind == "neg":
        return -x[0]
    if kind == "scale":
        return float(attrs["c"]) * x[0]
    if kind == "reduce":
        agg = attrs.get("aggregator", "sum")
        dim = int(attrs["dim"])
        fn = {"sum": np.sum, "max": np.max, "mean": np.mean}[agg]
        return fn(x[0], axis=dim)
    if kind == "broadcast":
        dim, size = int(attrs["dim"]), int(attrs["size"])
        return np.repeat(np.expand_dims(x[0], dim), size, axis=dim)
    if kind == "transpose":
        return np.transpose(x[0], [int(p) for p in attrs["perm"]])
    if kind == "reshape":
        return x[0].reshape([int(d) for d in attrs["shape"]])
    if kind == "pad":
        pads = [(int(lo), int(hi)) for lo, hi in attrs["pads"]]
        return np.pad(x[0], pads, constant_values=float(attrs.get("value", 0.0)))
    if kind == "slice":
        idx = tuple(slice(int(a), int(b)) for a, b in zip(attrs["starts"], attrs["stops"]))
        return x[0][idx]
    if kind == "split":
        axis = int(attrs["axis"]) % x[0].ndim
        sizes = [int(s) for s in attrs["sizes"]]
        i = int(attrs["index"])
        start = sum(sizes[:i])
        return np.take(x[0], np.arange(start, start + sizes[i]), axis=axis)
    if kind == "concat":
        return np.concatenate(x, axis=int(attrs["axis"]) % x[0].ndim)
    if kind in ("matmul", "batched_matmul"):
        return np.matmul(x[0], x[1])
    if kind == "conv2d":
        return _conv2d(x[0], x[1], int(attrs.get("stride", 1)), int(attrs.get("padding", 0)))
    if kind == "constant":
        return _constant(attrs)
    if kind == "opaque":
        return _opaque(attrs["name"], attrs, x)
    raise ShapeError(f"cannot evaluate kind {kind!r} as a primitive")


def _opaque(name, attrs, x):
    op = OPAQUE_OPS.get(name)
    if op is None or op.eval_fn is None:
        raise ShapeError(f"no evaluator registered for opaque operator {name!r}")
    return op.eval_fn(attrs, x)


def _normalized(centered: np.ndarray, std: np.ndarray) -> np.ndarray:
    # with eps = 0 a constant row gives 0/0; take the limit value 0 there
    out = centered / std
    return np.where((centered == 0) & (std == 0), 0.0, out)


def eval_operator(kind: str, attrs: Mapping[str, Any], inputs: Sequence[DenseTensor]) -> DenseTensor:
    """Evaluate a composite operator directly from its textbook formula."""
    inputs = [as_tensor(t) for t in inputs]
    out_shape = _check_shape(kind, attrs, inputs)
    (x,) = inputs if len(inputs) == 1 else (None,)
    with np.errstate(all="ignore"):
        if kind == "softmax":
            e = np.exp(x)
            out = e / np.sum(e, axis=int(attrs.get("axis", -1)), keepdims=True)
        elif kind == "instance_norm":
            axes = tuple(range(2, x.ndim))
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            out = _normalized(x - mu, np.sqrt(var + float(attrs.get("eps", 1e-5))))
        elif kind == "layer_norm":
            axis = int(attrs.get("axis", -1)) % x.ndim
            axes = tuple(range(axis, x.ndim))
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            out = _normalized(x - mu, np.sqrt(var + float(attrs.get("eps", 1e-5))))
        elif kind == "gelu":
            out = 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))
        elif kind == "reduce_mean":
            out = x.mean(axis=int(attrs.get("dim", -1)))
        elif kind in OPAQUE_OPS:
            out = _opaque(kind, attrs, inputs)
        else:
            return eval_primitive(kind, attrs, inputs)
    out = as_tensor(out)
    assert out.shape == out_shape, (kind, out.shape, out_shape)
    return out


def eval_node(kind: str, attrs: Mapping[str, Any], inputs: Sequence[DenseTensor]) -> DenseTensor:
    if kind in PRIMITIVE_KINDS:
        return eval_primitive(kind, attrs, inputs)
    return eval_operator(kind, attrs, inputs)


def _bind_inputs(g: Graph, inputs: Mapping[str, DenseTensor]) -> dict[str, DenseTensor]:
    bound = {}
    for spec in g.inputs:
        if spec.name not in inputs:
            raise MissingInput(f"graph input {spec.name!r} not supplied")
        t = as_tensor(inputs[spec.name])
        if tuple(t.shape) != spec.shape:
            raise ShapeError(f"input {spec.name!r} has shape {list(t.shape)}, expected {list(spec.shape)}")
        bound[spec.name] = t
    return bound


def eval_all(g: Graph, inputs: Mapping[str, DenseTensor]) -> dict[int, DenseTensor]:
    """Value of every node, evaluated once each in topological order."""
    bound = _bind_inputs(g, inputs)
    values: dict[int, DenseTensor] = {}
    for nid in topo_sort(g):
        n = g.node(nid)
        args = [bound[r] if isinstance(r, str) else values[r] for r in n.inputs]
        try:
            values[nid] = eval_node(n.kind, n.attrs, args)
        except ShapeError as e:
            raise ShapeError(str(e), nid) from None
    return values


def eval_graph(g: Graph, inputs: Mapping[str, DenseTensor]) -> dict[int, DenseTensor]:
    values = eval_all(g, inputs)
    return {o: values[o] for o in g.outputs}


def random_inputs(g: Graph, rng: np.random.Generator, scale: float = 1.0) -> dict[str, DenseTensor]:
    return {t.name: rng.standard_normal(t.shape) * scale for t in g.inputs}


@dataclass(frozen=True)
class Comparison:
    ok: bool
    max_abs_diff: float
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


def compare(a: DenseTensor, b: DenseTensor, atol: float = DEFAULT_ATOL, rtol: float = DEFAULT_RTOL) -> Comparison:
    """``|a - b| <= atol + rtol * |b|`` elementwise; matching nan/inf positions count as equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        return Comparison(False, math.inf, f"shape {list(a.shape)} vs {list(b.shape)}")
    if a.size == 0:
        return Comparison(True, 0.0)
    same_special = (np.isnan(a) & np.isnan(b)) | (np.isinf(a) & (a == b))
    with np.errstate(all="ignore"):
        diff = np.where(same_special, 0.0, np.abs(a - b))
        bound = atol + rtol * np.abs(np.where(same_special, 0.0, b))
    diff = np.where(np.isnan(diff), math.inf, diff)
    ok = bool(np.all(diff <= bound))
    return Comparison(ok, float(diff.max()))


def compare_maps(a: Mapping[int, DenseTensor], b: Mapping[int, DenseTensor], atol=DEFAULT_ATOL, rtol=DEFAULT_RTOL) -> Comparison:
    if set(a) != set(b):
        return Comparison(False, math.inf, f"keys {sorted(a)} vs {sorted(b)}")
    worst = 0.0
    for k in a:
        c = compare(a[k], b[k], atol, rtol)
        if not c.ok:
            return Comparison(False, c.max_abs_diff, f"output {k}: {c.reason or 'values differ'}")
        worst = max(worst, c.max_abs_diff)
    return Comparison(True, worst)
