from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kernorch.errors import MissingInput, ShapeError
from kernorch.fission import apply_fission
from kernorch.graph_ir import GraphBuilder
from kernorch.interpreter import compare, eval_graph, eval_operator, eval_primitive, tensor_from_json, tensor_to_json


def test_reduce_sum_rows():
    out = eval_primitive("reduce", {"dim": 1, "aggregator": "sum"}, [np.array([[1.0, 2, 3], [4, 5, 6]])])
    assert out.tolist() == [6.0, 15.0]


def test_broadcast_columns():
    out = eval_primitive("broadcast", {"dim": 1, "size": 2}, [np.array([7.0, 9.0])])
    assert out.tolist() == [[7.0, 7.0], [9.0, 9.0]]


def test_identity_matmul():
    x = np.random.default_rng(0).standard_normal((2, 5))
    assert np.array_equal(eval_primitive("matmul", {}, [np.eye(2), x]), x)


def test_softmax_primitives_on_zeros():
    b = GraphBuilder("operator")
    y = b.add("softmax", b.input("x", [2, 2]), axis=-1)
    g = apply_fission(b.build([y])).graph
    (out,) = eval_graph(g, {"x": np.zeros((2, 2))}).values()
    assert out.tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_exp_reduce_sum():
    b = GraphBuilder("primitive")
    e = b.add("exp", b.input("x", [2]))
    r = b.add("reduce", e, dim=0, aggregator="sum")
    out = eval_graph(b.build([r]), {"x": np.array([0.0, math.log(2.0)])})[r]
    assert out.shape == () and abs(float(out) - 3.0) < 1e-12


def test_softmax_operator():
    out = eval_operator("softmax", {"axis": -1}, [np.array([0.0, math.log(3.0)])])
    assert np.allclose(out, [0.25, 0.75], atol=1e-12, rtol=0)


def test_instance_norm_of_constant_is_zero():
    out = eval_operator("instance_norm", {"eps": 0.0}, [np.full((1, 2, 3, 3), 4.0)])
    assert np.all(out == 0.0)


def test_gelu_zero_and_independent_values():
    assert eval_operator("gelu", {}, [np.zeros(3)]).tolist() == [0.0, 0.0, 0.0]
    xs = np.array([-2.0, -0.3, 0.7, 3.1])
    expected = [0.5 * x * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    assert np.allclose(eval_operator("gelu", {}, [xs]), expected, atol=1e-15, rtol=1e-14)


def test_erf_matches_math():
    xs = np.linspace(-4, 4, 33)
    assert np.allclose(eval_primitive("erf", {}, [xs]), [math.erf(x) for x in xs], atol=1e-15, rtol=1e-14)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = eval_primitive("conv2d", {"stride": 1, "padding": 1}, [x, w])
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for f in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, f, i, j] = sum(
                    xp[0, c, i + r, j + s] * w[f, c, r, s] for c in range(2) for r in range(3) for s in range(3)
                )
    assert np.allclose(out, ref, atol=1e-12, rtol=0)


def test_topk_opaque():
    out = eval_operator("topk", {"k": 2}, [np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 4.0]])])
    assert out.tolist() == [[3.0, 2.0], [5.0, 4.0]]


def test_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        eval_primitive("add", {}, [np.zeros(2), np.zeros(3)])


def test_missing_input():
    b = GraphBuilder("primitive")
    r = b.add("relu", b.input("x", [2]))
    with pytest.raises(MissingInput):
        eval_graph(b.build([r]), {})


def test_compare_cases():
    a = np.arange(6.0).reshape(2, 3)
    assert compare(a, a.copy()).ok and compare(a, a.copy()).max_abs_diff == 0.0
    assert not compare(a, a.reshape(3, 2)).ok
    assert compare(a, a + 1e-12).ok
    assert not compare(a, a + 1e-6).ok


def test_tensor_json_round_trip():
    t = np.arange(12.0).reshape(3, 4) / 7
    assert np.array_equal(tensor_from_json(tensor_to_json(t)), t)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    out = eval_operator("softmax", {"axis": -1}, [x])
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)
