import json

import numpy as np
import pytest

from graphprune.fixtures import NAMES, fixture_text, load_fixture
from graphprune.ir import CycleError, Edge, GraphError, TraceGraph, Vertex, topo_order
from graphprune.modelio import (ModelSpecError, decode_blob, encode_blob, model_hash, parse_model_spec,
                                read_blob, serialize_model, write_blob)
from graphprune.shapes import ShapeError, count_flops, count_params, infer_shapes

from _graphs import Builder


def _doc(**over):
    doc = {
        "inputs": [{"id": "x", "shape": [1, 4, 4]}],
        "outputs": ["out"],
        "nodes": [
            {"id": "c", "op": "Conv2d", "inputs": ["x"],
             "attrs": {"in_channels": 1, "out_channels": 2, "kernel": 3, "stride": 1, "padding": 1}},
            {"id": "g", "op": "GlobalAvgPool", "inputs": ["c"]},
            {"id": "fc", "op": "Linear", "inputs": ["g"], "attrs": {"in_features": 2, "out_features": 3}},
            {"id": "out", "op": "Output", "inputs": ["fc"]},
        ],
    }
    doc.update(over)
    return doc


def test_parse_minimal():
    g, values = parse_model_spec(json.dumps(_doc()))
    assert set(g.vertices) == {"x", "c", "g", "fc", "out"}
    assert values == {}
    assert [s.name for s in g.param_specs()] == ["c.weight", "c.bias", "fc.weight", "fc.bias"]


def test_malformed_json():
    with pytest.raises(ModelSpecError, match="malformed JSON"):
        parse_model_spec("{not json")


def test_dangling_reference_named():
    doc = _doc()
    doc["nodes"][1]["inputs"] = ["nope"]
    with pytest.raises(GraphError, match="nope"):
        parse_model_spec(doc)


def test_unknown_op_and_attrs():
    doc = _doc()
    doc["nodes"][1]["op"] = "Softmax"
    with pytest.raises(GraphError, match="Softmax"):
        parse_model_spec(doc)
    doc = _doc()
    doc["nodes"][0]["attrs"]["dilation"] = 2
    with pytest.raises(ModelSpecError, match="dilation"):
        parse_model_spec(doc)
    doc = _doc()
    del doc["nodes"][0]["attrs"]["kernel"]
    with pytest.raises(ModelSpecError, match="kernel"):
        parse_model_spec(doc)


def test_cycle_detected():
    v = [Vertex("x", "Input", {"shape": [2]}),
         Vertex("a", "Linear", {"in_features": 2, "out_features": 2}),
         Vertex("b", "Add", {}), Vertex("o", "Output", {})]
    e = [Edge("x", "b", 0), Edge("a", "b", 1), Edge("b", "a", 0), Edge("b", "o", 0)]
    with pytest.raises(CycleError) as ei:
        TraceGraph(v, e, ["x"], ["o"])
    assert set(ei.value.cycle) >= {"a", "b"}


def test_arity_and_dead_ends():
    b = Builder((2,))
    b.linear("l", "x", 2)
    b.add("j", "Add", ["l"])
    b.add("o", "Output", ["j"])
    with pytest.raises(GraphError, match="joint"):
        b.graph()
    b = Builder((2,))
    b.linear("l", "x", 2)
    b.linear("dead", "x", 2)
    b.add("o", "Output", ["l"])
    with pytest.raises(GraphError, match="dead"):
        b.graph()


def test_no_trainable_operator():
    b = Builder((2, 3, 3))
    b.add("r", "ReLU", ["x"])
    b.add("o", "Output", ["r"])
    with pytest.raises(GraphError, match="no trainable"):
        b.graph()


def test_topo_order_deterministic():
    g = load_fixture("demonet_s")
    order = topo_order(g)
    assert order == topo_order(g)
    pos = {v: i for i, v in enumerate(order)}
    assert all(pos[e.src] < pos[e.dst] for e in g.edges)


@pytest.mark.parametrize("name", NAMES)
def test_round_trip(name):
    g = load_fixture(name)
    g2, _ = parse_model_spec(serialize_model(g))
    assert g == g2


def test_demonet_counts():
    g = load_fixture("demonet_s")
    assert len(g.vertices) == 24 and len(g.edges) == 26
    assert count_params(g) == 42474
    s = infer_shapes(g)
    assert s["Concat"] == (48, 28, 28)
    assert s.concat_ranges["Concat"] == [("BN2", 0, 0, 16), ("BN3", 1, 16, 32), ("BN5", 2, 32, 48)]
    # hand count for Conv6: 2 * 32*28*28 * 48*9 + 32*28*28 bias
    from graphprune.shapes import vertex_flops
    assert vertex_flops(g, s, "Conv6") == 2 * 32 * 784 * 48 * 9 + 32 * 784
    assert count_flops(g, s) == 65_944_458


def test_shape_errors():
    b = Builder((3, 4, 4))
    b.conv("c", "x", 2)
    b.vertices[-1] = Vertex("c", "Conv2d", {"in_channels": 5, "out_channels": 2, "kernel": 3,
                                            "stride": 1, "padding": 1})
    b.add("g", "GlobalAvgPool", ["c"])
    b.linear("fc", "g", 2)
    b.add("o", "Output", ["fc"])
    with pytest.raises(ShapeError, match="c"):
        infer_shapes(b.graph())
    b = Builder((1, 2, 2))
    b.add("p", "MaxPool", ["x"], {"kernel": 5, "stride": 1, "padding": 0})
    b.add("g", "GlobalAvgPool", ["p"])
    b.linear("fc", "g", 2)
    b.add("o", "Output", ["fc"])
    with pytest.raises(ShapeError, match="window"):
        infer_shapes(b.graph())


def test_embedded_params_inline_and_offset():
    doc = _doc(params={"fc.bias": {"shape": [3], "data": [1, 2, 3]}})
    _, values = parse_model_spec(doc)
    assert values["fc.bias"].tolist() == [1, 2, 3]
    flat = np.arange(10.0)
    doc = _doc(params={"fc.bias": {"shape": [3], "offset": 4}})
    _, values = parse_model_spec(doc, flat)
    assert values["fc.bias"].tolist() == [4, 5, 6]
    doc = _doc(params={"fc.bias": {"shape": [4], "data": [1, 2, 3, 4]}})
    with pytest.raises(ModelSpecError):
        parse_model_spec(doc)


def test_blob_round_trip(tmp_path):
    t = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.linspace(0, 1, 5)}
    data = encode_blob(t)
    back = decode_blob(data)
    assert back["a"].dtype == np.float32 and back["b"].dtype == np.float64
    assert all(np.array_equal(t[k], back[k]) for k in t)
    with pytest.raises(ValueError, match="truncated"):
        decode_blob(data[:-3])
    write_blob(tmp_path / "p.bin", t)
    assert np.array_equal(read_blob(tmp_path / "p.bin")["a"], t["a"])
    assert not list(tmp_path.glob("*.tmp"))


def test_model_hash_stable():
    assert model_hash(fixture_text("chain_net")) == model_hash(fixture_text("chain_net"))
    assert model_hash("a") != model_hash("b")
