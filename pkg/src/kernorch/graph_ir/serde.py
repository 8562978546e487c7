"""JSON serialization of graphs and canonical structural hashing."""

from __future__ import annotations

import hashlib
import heapq
import json
from typing import Any

from ..errors import ParseError
from .graph import LEVELS, OPERATOR_KINDS, PRIMITIVE_KINDS, Graph, Node, TensorSpec, topo_sort
from .shapes import OPAQUE_OPS

SCHEMA_VERSION = 1


def graph_to_dict(g: Graph) -> dict[str, Any]:
    nodes = []
    for n in g.nodes:
        ins = [{"node": r if isinstance(r, int) else {"input": r}, "slot": i} for i, r in enumerate(n.inputs)]
        nodes.append({"id": n.id, "kind": n.kind, "attrs": dict(n.attrs), "inputs": ins})
    return {
        "version": SCHEMA_VERSION,
        "level": g.level,
        "inputs": [{"name": t.name, "shape": list(t.shape)} for t in g.inputs],
        "nodes": nodes,
        "outputs": list(g.outputs),
    }


def dumps(obj: Any) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def serialize(g: Graph) -> bytes:
    return dumps(graph_to_dict(g)).encode("utf-8")


def _req(obj: Any, key: str, path: str, typ=None):
    if not isinstance(obj, dict):
        raise ParseError("expected an object", path)
    if key not in obj:
        raise ParseError(f"missing field '{key}'", path)
    val = obj[key]
    if typ is not None and (not isinstance(val, typ) or isinstance(val, bool)):
        raise ParseError(f"field '{key}' has wrong type {type(val).__name__}", f"{path}.{key}" if path else key)
    return val


def _int_list(val: Any, path: str) -> list[int]:
    if not isinstance(val, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in val):
        raise ParseError("expected a list of integers", path)
    return val


def graph_from_dict(d: Any) -> Graph:
    if not isinstance(d, dict):
        raise ParseError("top level must be an object")
    version = _req(d, "version", "", int)
    if version != SCHEMA_VERSION:
        raise ParseError(f"unsupported version {version}", "version")
    level = _req(d, "level", "", str)
    if level not in LEVELS:
        raise ParseError(f"unknown level '{level}'", "level")
    inputs = []
    for i, t in enumerate(_req(d, "inputs", "", list)):
        path = f"inputs[{i}]"
        name = _req(t, "name", path, str)
        shape = _int_list(_req(t, "shape", path), f"{path}.shape")
        inputs.append(TensorSpec(name, tuple(shape), t.get("dtype", "f64")))
    nodes = []
    for i, nd in enumerate(_req(d, "nodes", "", list)):
        path = f"nodes[{i}]"
        nid = _req(nd, "id", path, int)
        kind = _req(nd, "kind", path, str)
        known = kind in PRIMITIVE_KINDS or (level == "operator" and (kind in OPERATOR_KINDS or kind in OPAQUE_OPS))
        if not known:
            raise ParseError(f"unknown kind '{kind}'", f"{path}.kind")
        attrs = nd.get("attrs", {})
        if not isinstance(attrs, dict):
            raise ParseError("attrs must be an object", f"{path}.attrs")
        slots: dict[int, Any] = {}
        for j, ref in enumerate(_req(nd, "inputs", path, list)):
            rpath = f"{path}.inputs[{j}]"
            slot = _req(ref, "slot", rpath, int)
            src = _req(ref, "node", rpath)
            if isinstance(src, dict):
                src = _req(src, "input", f"{rpath}.node", str)
            elif not isinstance(src, int) or isinstance(src, bool):
                raise ParseError("node must be an integer or {\"input\": name}", f"{rpath}.node")
            if slot in slots:
                raise ParseError(f"slot {slot} connected twice", rpath)
            slots[slot] = src
        if sorted(slots) != list(range(len(slots))):
            raise ParseError(f"input slots {sorted(slots)} are not contiguous from 0", f"{path}.inputs")
        nodes.append(Node(nid, kind, attrs, tuple(slots[k] for k in range(len(slots)))))
    outputs = _int_list(_req(d, "outputs", ""), "outputs")
    return Graph(tuple(inputs), tuple(nodes), tuple(outputs), level)


def deserialize(data: bytes | str) -> Graph:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        d = json.loads(data)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return graph_from_dict(d)


def load_graph(path) -> Graph:
    with open(path, "rb") as f:
        return deserialize(f.read())


def save_graph(g: Graph, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(g))


def _merkle(g: Graph) -> dict[int, str]:
    keys: dict[int, str] = {}
    for nid in topo_sort(g):
        n = g.node(nid)
        ins = [keys[r] if isinstance(r, int) else "$" + r for r in n.inputs]
        doc = json.dumps([n.kind, n.attrs, ins], sort_keys=True)
        keys[nid] = hashlib.sha256(doc.encode()).hexdigest()
    return keys


def canonical_order(g: Graph) -> list[int]:
    """Topological order with ties broken by structure rather than by id."""
    keys = _merkle(g)
    indeg = {n.id: len(set(n.node_inputs())) for n in g.nodes}
    heap = [(keys[nid], nid) for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, nid = heapq.heappop(heap)
        order.append(nid)
        for c in g.consumers[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, (keys[c], c))
    return order


def canonical_hash(g: Graph) -> str:
    """Structural hash independent of node numbering.

    Nodes are listed in a structure-keyed topological order and references
    become positions in that order, so relabeled copies hash equal.
    """
    order = canonical_order(g)
    pos = {nid: i for i, nid in enumerate(order)}
    body = []
    for nid in order:
        n = g.node(nid)
        body.append([n.kind, n.attrs, [pos[r] if isinstance(r, int) else "$" + r for r in n.inputs]])
    doc = {
        "inputs": [[t.name, list(t.shape)] for t in g.inputs],
        "nodes": body,
        "outputs": sorted(pos[o] for o in g.outputs),
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()
