"""Example graphs shipped with the package, plus a synthetic scale generator.

The JSON files under ``data/graphs`` are generated from the builders below
(``python -m kernorch.bundled`` rewrites them); tests check they agree.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

from .cost import ProfileTable
from .graph_ir import Graph, GraphBuilder, dumps, graph_to_dict, load_graph

DATA = "data/graphs"


def softmax() -> Graph:
    b = GraphBuilder("operator")
    x = b.input("x", [4, 16])
    y = b.add("softmax", x, axis=-1)
    return b.build([y])


def softmax_matmul() -> Graph:
    """Scaled dot-product attention fragment: softmax(Q K^T) V."""
    b = GraphBuilder("operator")
    q = b.input("q", [8, 16])
    k = b.input("k", [8, 16])
    v = b.input("v", [8, 16])
    kt = b.add("transpose", k, perm=[1, 0])
    s = b.add("matmul", q, kt)
    p = b.add("softmax", s, axis=-1)
    o = b.add("matmul", p, v)
    return b.build([o])


def efficientvit_attention() -> Graph:
    """ReLU linear attention: relu(Q) (relu(K)^T V) normalized by relu(Q) sum(relu(K))."""
    b = GraphBuilder("operator")
    q = b.input("q", [32, 8])
    k = b.input("k", [32, 8])
    v = b.input("v", [32, 8])
    qr = b.add("relu", q)
    kr = b.add("relu", k)
    kt = b.add("transpose", kr, perm=[1, 0])
    kv = b.add("matmul", kt, v)
    ksum = b.add("reduce", kt, dim=1, aggregator="sum")
    kcol = b.add("reshape", ksum, shape=[8, 1])
    num = b.add("matmul", qr, kv)
    den = b.add("matmul", qr, kcol)
    eps = b.add("constant", shape=[32, 1], fill="literal", data=[1e-6] * 32)
    den_eps = b.add("add", den, eps)
    den_flat = b.add("reshape", den_eps, shape=[32])
    spread = b.add("broadcast", den_flat, dim=1, size=8)
    out = b.add("div", num, spread)
    return b.build([out])


def instance_norm_relu_pad() -> Graph:
    b = GraphBuilder("operator")
    x = b.input("x", [1, 4, 8, 8])
    w = b.input("w", [4, 4, 3, 3])
    n = b.add("instance_norm", x, eps=1e-5)
    r = b.add("relu", n)
    p = b.add("pad", r, pads=[[0, 0], [0, 0], [1, 1], [1, 1]], value=0.0)
    c = b.add("conv2d", p, w, stride=1, padding=0)
    return b.build([c])


def fanout() -> Graph:
    """One producer feeding two outputs; recomputing it in both consumers pays off."""
    b = GraphBuilder("primitive")
    x = b.input("x", [64])
    p1 = b.add("relu", x)
    p2 = b.add("exp", p1)
    p3 = b.add("neg", p1)
    return b.build([p2, p3])


FANOUT_COSTS = {(0,): 5.0, (0, 1): 6.0, (0, 2): 6.0, (1,): 4.0, (2,): 4.0}


def fanout_profile() -> ProfileTable:
    return ProfileTable(by_members={(m, None): c for m, c in FANOUT_COSTS.items()}, fallback="reject")


def segformer_fragment() -> Graph:
    """Mix-FFN style block at batch 16: layer norm, two projections, GELU, residual."""
    b = GraphBuilder("operator")
    x = b.input("x", [16, 16, 16])
    w1 = b.input("w1", [16, 32])
    w2 = b.input("w2", [32, 16])
    ln = b.add("layer_norm", x, axis=-1, eps=1e-6)
    flat = b.add("reshape", ln, shape=[256, 16])
    h = b.add("matmul", flat, w1)
    a = b.add("gelu", h)
    y = b.add("matmul", a, w2)
    y3 = b.add("reshape", y, shape=[16, 16, 16])
    out = b.add("add", y3, x)
    return b.build([out])


def diamond() -> Graph:
    b = GraphBuilder("primitive")
    x = b.input("x", [8])
    a = b.add("relu", x)
    l = b.add("exp", a)
    r = b.add("neg", a)
    d = b.add("add", l, r)
    return b.build([d])


def mutual_cycle() -> Graph:
    """Two independent chains q->x and r->v; kernels {x, r} and {q, v} would wait on each other."""
    b = GraphBuilder("primitive")
    a = b.input("a", [16])
    q = b.add("relu", a)
    r = b.add("exp", a)
    x = b.add("neg", q)
    v = b.add("sqrt", r)
    return b.build([x, v])


def mutual_cycle_profile() -> ProfileTable:
    """Makes the mutually dependent pair the cheapest cover; everything else explicit."""
    q, r, x, v = 0, 1, 2, 3
    entries = {
        ((x, r), (x, r)): 1.0,
        ((q, v), (q, v)): 1.0,
        ((q,), None): 3.0,
        ((r,), None): 3.0,
        ((x,), None): 3.0,
        ((v,), None): 3.0,
    }
    return ProfileTable(by_members=entries, fallback="reject")


def deep_narrow(blocks: int = 146, width: int = 2, length: int = 1) -> Graph:
    """Long chain of fan-out/fan-in blocks over a [64] tensor.

    Each block spreads the running tensor into ``width`` elementwise lanes of
    ``length`` primitives and joins them with adds. The defaults give 586
    execution states over 439 primitives.
    """
    b = GraphBuilder("primitive")
    ops = ["relu", "exp", "neg"]
    cur = b.add("neg", b.input("x", [64]))
    for blk in range(blocks):
        lanes = []
        for lane in range(width):
            t = cur
            for step in range(length):
                t = b.add(ops[(blk + lane + step) % 3], t)
            lanes.append(t)
        acc = lanes[0]
        for t in lanes[1:]:
            acc = b.add("add", acc, t)
        cur = acc
    return b.build([cur])


BUILDERS = {
    "softmax": softmax,
    "softmax_matmul": softmax_matmul,
    "efficientvit_attention": efficientvit_attention,
    "instance_norm_relu_pad": instance_norm_relu_pad,
    "fanout": fanout,
    "segformer_fragment": segformer_fragment,
    "diamond": diamond,
    "mutual_cycle": mutual_cycle,
}

# extra cost tables that belong to particular examples
PROFILES = {"fanout": fanout_profile, "mutual_cycle": mutual_cycle_profile}


def example_names() -> list[str]:
    return sorted(BUILDERS)


def example_path(name: str) -> Path:
    return Path(str(resources.files("kernorch").joinpath(DATA, f"{name}.json")))


def load_example(name: str) -> Graph:
    return load_graph(example_path(name))


def profile_to_dict(table: ProfileTable) -> dict:
    entries = []
    for (mem, out), lat in sorted(table.by_members.items(), key=lambda kv: (kv[0][0], kv[0][1] or ())):
        e = {"members": list(mem), "latency_us": lat}
        if out is not None:
            e["outputs"] = list(out)
        entries.append(e)
    for sig, lat in sorted(table.by_signature.items()):
        entries.append({"signature": sig, "latency_us": lat})
    return {"entries": entries, "fallback": table.fallback}


def write_all(root: Path | None = None) -> None:
    root = root or Path(__file__).parent / DATA
    root.mkdir(parents=True, exist_ok=True)
    for name, build in BUILDERS.items():
        (root / f"{name}.json").write_text(dumps(graph_to_dict(build())) + "\n")
    for name, make in PROFILES.items():
        (root / f"{name}.profile.json").write_text(json.dumps(profile_to_dict(make()), indent=2, sort_keys=True) + "\n")


if __name__ == "__main__":
    write_all()
