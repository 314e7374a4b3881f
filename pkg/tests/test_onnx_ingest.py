"""Tests for the ONNX converter package.

The converter is optional: the rest of the suite must pass without it, so
everything here skips when the package is not installed.  Fixture models are
built directly with the converter's wire codec -- independent of any ONNX
runtime -- and checked against the known source architectures.
"""

import json

import pytest

onnx_ingest = pytest.importorskip("onnx_ingest")

from onnx_ingest import UnsupportedModel, export_graph
from onnx_ingest import wire as W
from onnx_ingest.cli import main as export_main

DOUBLE = 11
INT64 = 7


# ---------------------------------------------------------------------------
# Fixture model builders (protobuf wire encoding by hand)


def _dim(d):
    return W.field_varint(1, d) if isinstance(d, int) else W.field_string(2, d)


def vi(name, elem_type, dims):
    shape = b"".join(W.field_bytes(1, _dim(d)) for d in dims)
    tensor_type = W.field_varint(1, elem_type) + W.field_bytes(2, shape)
    return W.field_string(1, name) + W.field_bytes(2, W.field_bytes(1, tensor_type))


def tensor(name, data_type, dims, int64_values=None):
    body = b"".join(W.field_varint(1, d) for d in dims)
    body += W.field_varint(2, data_type) + W.field_string(8, name)
    if int64_values:
        body += W.field_packed_int64(7, int64_values)
    return body


def node(op_type, name, inputs, outputs, attrs_int=None):
    body = b"".join(W.field_string(1, i) for i in inputs)
    body += b"".join(W.field_string(2, o) for o in outputs)
    body += W.field_string(3, name) + W.field_string(4, op_type)
    for key, value in (attrs_int or {}).items():
        attr = W.field_string(1, key) + W.field_varint(3, value) + W.field_varint(20, 2)
        body += W.field_bytes(5, attr)
    return body


def model(nodes, inits=(), inputs=(), outputs=(), value_infos=()):
    g = b"".join(W.field_bytes(1, n) for n in nodes)
    g += W.field_string(2, "g")
    g += b"".join(W.field_bytes(5, t) for t in inits)
    g += b"".join(W.field_bytes(11, v) for v in inputs)
    g += b"".join(W.field_bytes(12, v) for v in outputs)
    g += b"".join(W.field_bytes(13, v) for v in value_infos)
    return W.field_varint(1, 8) + W.field_bytes(7, g)


def mlp_model(batch_dim=4):
    return model(
        nodes=[
            node("MatMul", "/layer0/MatMul", ["x", "W1"], ["h1"]),
            node("Relu", "/act0/Relu", ["h1"], ["h2"]),
            node("MatMul", "/layer1/MatMul", ["h2", "W2"], ["y"]),
        ],
        inits=[tensor("W1", DOUBLE, (16, 32)), tensor("W2", DOUBLE, (32, 8))],
        inputs=[vi("x", DOUBLE, (batch_dim, 16))],
        outputs=[vi("y", DOUBLE, (batch_dim, 8))],
    )


def encoder_model():
    d, f = 8, 32
    act = (2, 4, d)
    nodes = [
        node("LayerNormalization", "/enc/ln1/LayerNormalization", ["x"], ["a"]),
        node("Softmax", "/enc/gate/Softmax", ["a"], ["g"]),
        node("MatMul", "/enc/attn/q/MatMul", ["g", "Wq"], ["qv"]),
        node("MatMul", "/enc/attn/k/MatMul", ["g", "Wk"], ["kv"]),
        node("MatMul", "/enc/attn/v/MatMul", ["g", "Wv"], ["vv"]),
        node("Mul", "/enc/attn/scores/Mul", ["qv", "kv"], ["s"]),
        node("Mul", "/enc/attn/ctx/Mul", ["s", "vv"], ["c"]),
        node("MatMul", "/enc/attn/out/MatMul", ["c", "Wo"], ["ao"]),
        node("Add", "/enc/res1/Add", ["x", "ao"], ["r1"]),
        node("LayerNormalization", "/enc/ln2/LayerNormalization", ["r1"], ["b"]),
        node("MatMul", "/enc/ffn/up/MatMul", ["b", "Wu"], ["u"]),
        node("Relu", "/enc/ffn/act/Relu", ["u"], ["uact"]),
        node("MatMul", "/enc/ffn/down/MatMul", ["uact", "Wd"], ["dn"]),
        node("Add", "/enc/res2/Add", ["r1", "dn"], ["y"]),
    ]
    inits = [
        tensor("Wq", DOUBLE, (d, d)), tensor("Wk", DOUBLE, (d, d)),
        tensor("Wv", DOUBLE, (d, d)), tensor("Wo", DOUBLE, (d, d)),
        tensor("Wu", DOUBLE, (d, f)), tensor("Wd", DOUBLE, (f, d)),
    ]
    return model(nodes, inits, [vi("x", DOUBLE, act)], [vi("y", DOUBLE, act)])


def trainable_elements(doc):
    return sum(
        _prod(n["weight"]["shape"])
        for n in doc["nodes"]
        if n.get("weight") and n["weight"]["trainable"]
    )


def _prod(shape):
    out = 1
    for d in shape:
        out *= d
    return out


# ---------------------------------------------------------------------------
# Conversion


class TestConvert:
    def test_mlp_two_matmul_groups_after_trimming(self):
        shardplan = pytest.importorskip("shardplan")
        doc, report = export_graph(mlp_model())
        grouped = shardplan.trim_and_group(shardplan.load_graph(json.dumps(doc)))
        matmuls = [s for s in grouped.nodes
                   if grouped.nodes[s].op is shardplan.OpKind.MATMUL]
        assert len(matmuls) == 2
        assert {s.split("/")[0] for s in matmuls} == {"layer0", "layer1"}

    def test_mlp_parameter_conservation(self):
        doc, report = export_graph(mlp_model())
        assert report.initializer_elements == 16 * 32 + 32 * 8
        assert trainable_elements(doc) == report.trainable_elements
        assert report.trainable_elements + report.skipped_elements \
            == report.initializer_elements
        assert report.skipped_elements == 0

    def test_encoder_six_trainable_weights(self):
        doc, report = export_graph(encoder_model())
        weighted = [n for n in doc["nodes"] if n.get("weight")]
        assert len(weighted) == 6
        assert trainable_elements(doc) == report.initializer_elements

    def test_loop_rejected(self):
        bad = model([node("Loop", "/loop", ["x"], ["y"])],
                    inputs=[vi("x", DOUBLE, (2,))], outputs=[vi("y", DOUBLE, (2,))])
        with pytest.raises(UnsupportedModel, match="control-flow"):
            export_graph(bad)

    def test_dynamic_dim_rejected_unless_batch_given(self):
        dyn = model(
            [node("MatMul", "/layer0/MatMul", ["x", "W1"], ["y"])],
            inits=[tensor("W1", DOUBLE, (16, 8))],
            inputs=[vi("x", DOUBLE, ("N", 16))],
            outputs=[vi("y", DOUBLE, ("N", 8))],
        )
        with pytest.raises(UnsupportedModel, match="dynamic"):
            export_graph(dyn)
        doc, _ = export_graph(dyn, batch=6)
        by_name = {n["name"]: n for n in doc["nodes"]}
        assert by_name["x"]["output"]["shape"] == [6, 16]
        assert by_name["output"]["output"]["shape"] == [6, 8]

    def test_unknown_op_falls_back_with_warning(self):
        odd = model(
            [node("Erf", "/odd/Erf", ["x"], ["y"])],
            inputs=[vi("x", DOUBLE, (2, 3))], outputs=[vi("y", DOUBLE, (2, 3))],
        )
        doc, report = export_graph(odd)
        assert any("Erf" in w for w in report.warnings)
        assert doc["nodes"][1]["op"] == "elementwise"

    def test_reshape_shape_operand_skipped(self):
        m = model(
            [node("Reshape", "/r/Reshape", ["x", "shape"], ["y"])],
            inits=[tensor("shape", INT64, (2,), int64_values=[3, 8])],
            inputs=[vi("x", DOUBLE, (4, 6))], outputs=[vi("y", DOUBLE, (3, 8))],
        )
        doc, report = export_graph(m)
        assert report.skipped == ["shape"]
        assert report.skipped_elements == 2
        by_name = {n["name"]: n for n in doc["nodes"]}
        assert by_name["r/Reshape"]["op"] == "reshape"
        assert by_name["r/Reshape"]["output"]["shape"] == [3, 8]

    def test_gather_on_initializer_becomes_embedding(self):
        m = model(
            [node("Gather", "/emb/Gather", ["E", "x"], ["y"])],
            inits=[tensor("E", DOUBLE, (16, 8))],
            inputs=[vi("x", DOUBLE, (2, 4))], outputs=[vi("y", DOUBLE, (2, 4, 8))],
        )
        doc, report = export_graph(m)
        by_name = {n["name"]: n for n in doc["nodes"]}
        assert by_name["emb/Gather"]["op"] == "embedding"
        assert by_name["emb/Gather"]["weight"]["shape"] == [16, 8]
        assert report.trainable_elements == 128

    def test_unnamed_nodes_get_positional_scopes(self):
        m = model(
            [node("Relu", "", ["x"], ["y"])],
            inputs=[vi("x", DOUBLE, (2,))], outputs=[vi("y", DOUBLE, (2,))],
        )
        doc, _ = export_graph(m)
        assert doc["nodes"][1]["name"] == "block_0/relu"

    def test_deterministic_output(self):
        data = encoder_model()
        assert export_graph(data)[0] == export_graph(data)[0]

    def test_garbage_bytes_rejected(self):
        from onnx_ingest import ModelParseError
        with pytest.raises(ModelParseError):
            export_graph(b"\xff\xfe not a protobuf")


class TestCli:
    def test_export_writes_graph(self, tmp_path, capsys):
        src = tmp_path / "mlp.onnx"
        src.write_bytes(mlp_model())
        out = tmp_path / "graph.json"
        assert export_main([str(src), "-o", str(out)]) == 0
        err = capsys.readouterr().err
        assert "trainable elements" in err
        assert json.loads(out.read_text())["version"] == 1

    def test_missing_file_exit_2(self, capsys):
        assert export_main(["/no/such.onnx", "-o", "/tmp/x.json"]) == 2
        assert json.loads(capsys.readouterr().err)["error"]["kind"] == "io"

    def test_unsupported_exit_1(self, tmp_path, capsys):
        src = tmp_path / "loop.onnx"
        src.write_bytes(model([node("Loop", "/l", ["x"], ["y"])],
                              inputs=[vi("x", DOUBLE, (2,))],
                              outputs=[vi("y", DOUBLE, (2,))]))
        assert export_main([str(src)]) == 1
        assert json.loads(capsys.readouterr().err)["error"]["kind"] == "unsupported"


# ---------------------------------------------------------------------------
# End-to-end with the planner


def test_criterion_9_onnx_round_trip(tmp_path, capfd):
    pytest.importorskip("shardplan")
    from shardplan.cli import main as plan_main

    results = []
    for label, data in (("mlp", mlp_model()), ("encoder", encoder_model())):
        src = tmp_path / f"{label}.onnx"
        src.write_bytes(data)
        graph_path = tmp_path / f"{label}.json"
        assert export_main([str(src), "-o", str(graph_path)]) == 0

        doc = json.loads(graph_path.read_text())
        _, report = export_graph(data)
        assert trainable_elements(doc) == report.initializer_elements \
            - report.skipped_elements  # exact parameter-count conservation

        out_dir = tmp_path / f"{label}_run"
        code = plan_main(["pipeline", "--graph", str(graph_path), "--mesh", "1x2",
                          "--trials", "10", "--out-dir", str(out_dir)])
        assert code == 0
        verify = json.loads((out_dir / "verify.json").read_text())
        assert verify["passed"] and verify["trials"] == 10
        results.append(f"{label}: {trainable_elements(doc)} params, verified")
    with capfd.disabled():
        print(f"[criterion 9] PASS onnx round trip: {'; '.join(results)}")
