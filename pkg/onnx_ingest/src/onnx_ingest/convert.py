"""Convert a parsed ONNX graph into the planner's schema-1 JSON graph format.

Initializers become weight tensor descriptors on their consuming nodes; the
planner synthesizes values, so only names, shapes, and dtypes cross over.
Every operator maps through OP_MAPPING; unmapped operators fall back to
elementwise with a logged warning so conversion is total.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import DTYPE_LABEL, INT_TYPES, Graph, Node, Tensor, parse_model

CONTROL_FLOW_OPS = {"Loop", "If", "Scan"}

#: ONNX op type -> planner op kind (Gather resolves to embedding only when its
#: data operand is an initializer; anything absent falls back to elementwise).
OP_MAPPING = {
    "Gemm": "matmul",
    "MatMul": "matmul",
    "Add": "elementwise",
    "Mul": "elementwise",
    "Relu": "elementwise",
    "LayerNormalization": "layernorm",
    "Softmax": "softmax",
    "Gather": "embedding",
    "Reshape": "reshape",
    "Transpose": "reshape",
    "Constant": "auxiliary",
    "Identity": "auxiliary",
}

ELEMENTWISE_FN = {"Add": "add", "Mul": "mul", "Relu": "add"}


class UnsupportedModel(ValueError):
    """Model uses dynamic shapes, control flow, or an unconvertible idiom."""


@dataclass
class ConversionReport:
    trainable_elements: int = 0
    skipped_elements: int = 0
    skipped: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    initializer_elements: int = 0


def _resolve_shape(dims, batch: int | None, owner: str) -> tuple[int, ...]:
    shape = []
    for i, d in enumerate(dims):
        if d.value is not None and d.value > 0:
            shape.append(d.value)
        elif i == 0 and batch is not None:
            shape.append(batch)
        else:
            label = d.param or "?"
            raise UnsupportedModel(
                f"dynamic dimension {label!r} in {owner!r}; static shapes are "
                "required (pass --batch N to fix a leading batch dimension)"
            )
    return tuple(shape)


def _scope_name(node: Node, index: int, taken: set[str]) -> str:
    base = node.name.strip("/").strip() if node.name else ""
    if not base:
        base = f"block_{index}/{node.op_type.lower()}"
    base = base.replace("\\", "/")
    name = base
    suffix = 1
    while name in taken:
        suffix += 1
        name = f"{base}_{suffix}"
    taken.add(name)
    return name


def _sanitize_value(value: str) -> str:
    return value.strip("/").strip() or "value"


def convert_graph(graph: Graph, batch: int | None = None):
    """Produce (schema-1 JSON document, ConversionReport)."""
    report = ConversionReport()
    for node in graph.nodes:
        if node.op_type in CONTROL_FLOW_OPS:
            raise UnsupportedModel(f"control-flow operator {node.op_type} is not supported")

    inits = graph.initializers
    report.initializer_elements = sum(t.num_elements for t in inits.values())

    # value name -> (shape, dtype label), seeded from declared value infos
    shapes: dict[str, tuple[tuple[int, ...], str]] = {}
    for vi in [*graph.inputs, *graph.outputs, *graph.value_infos.values()]:
        if vi.name and vi.dims:
            shapes[vi.name] = (
                _resolve_shape(vi.dims, batch, vi.name),
                DTYPE_LABEL.get(vi.elem_type, "f32"),
            )

    taken: set[str] = set()
    out_nodes: list[dict] = []
    producer: dict[str, str] = {}  # ONNX value name -> planner node name
    consumed_weights: set[str] = set()

    def skip(tensor: Tensor, why: str) -> None:
        if tensor.name not in report.skipped:
            report.skipped.append(tensor.name)
            report.skipped_elements += tensor.num_elements
            report.warnings.append(f"skipped non-trainable {tensor.name!r}: {why}")

    def weight_spec(tensor: Tensor, dims: tuple[int, ...] | None = None) -> dict:
        label = DTYPE_LABEL.get(tensor.data_type)
        if label is None:
            raise UnsupportedModel(
                f"weight {tensor.name!r} has unsupported element type {tensor.data_type}"
            )
        if tensor.name not in consumed_weights:
            consumed_weights.add(tensor.name)
            report.trainable_elements += tensor.num_elements
        return {"shape": list(dims or tensor.dims), "dtype": label, "trainable": True}

    def emit(name, op, inputs, shape, dtype, weight=None, attrs=None) -> str:
        doc = {
            "name": name,
            "op": op,
            "inputs": list(inputs),
            "weight": weight,
            "output": {"shape": list(shape), "dtype": dtype, "trainable": False},
        }
        if attrs:
            doc["attrs"] = attrs
        out_nodes.append(doc)
        return name

    for vi in graph.inputs:
        if vi.name in inits:
            continue
        shape, dtype = shapes.get(vi.name) or (_resolve_shape(vi.dims, batch, vi.name),
                                               DTYPE_LABEL.get(vi.elem_type, "f32"))
        name = _sanitize_value(vi.name)
        taken.add(name)
        producer[vi.name] = emit(name, "input", (), shape, dtype)
        shapes[vi.name] = (shape, dtype)

    for index, node in enumerate(graph.nodes):
        kind = OP_MAPPING.get(node.op_type)
        if kind is None:
            kind = "elementwise"
            report.warnings.append(
                f"no mapping for operator {node.op_type!r}; treating as elementwise"
            )
        name = _scope_name(node, index, taken)

        operands = [v for v in node.inputs if v and v not in inits]
        weight_tensors = [inits[v] for v in node.inputs if v in inits]
        missing = [v for v in operands if v not in producer]
        if missing:
            raise UnsupportedModel(
                f"node {name!r} consumes undeclared value {missing[0]!r}"
            )
        in_names = [producer[v] for v in operands]

        def operand_shape(i=0):
            v = operands[i]
            if v not in shapes:
                raise UnsupportedModel(f"no static shape known for value {v!r}")
            return shapes[v]

        weight = None
        attrs = None
        bias: Tensor | None = None

        if kind == "matmul":
            if len(weight_tensors) == 0:
                raise UnsupportedModel(
                    f"{node.op_type} node {name!r} has no constant weight operand"
                )
            wt = weight_tensors[0]
            dims = tuple(wt.dims)
            if node.op_type == "Gemm" and node.attrs_int.get("transB"):
                dims = dims[::-1]
            weight = weight_spec(weight_tensors[0], dims)
            if len(weight_tensors) > 1:
                bias = weight_tensors[1]
            in_shape, dtype = operand_shape()
            shape = in_shape[:-1] + (dims[-1],)
        elif kind == "embedding":
            data = weight_tensors[0] if weight_tensors else None
            if data is None or node.attrs_int.get("axis", 0) != 0:
                kind = "elementwise"
                report.warnings.append(
                    f"Gather node {name!r} is not an embedding lookup; "
                    "treating as elementwise"
                )
                shape, dtype = operand_shape()
            else:
                weight = weight_spec(data)
                idx_shape, _ = operand_shape()
                shape = idx_shape + tuple(data.dims[1:])
                dtype = weight["dtype"]
        elif kind == "layernorm":
            in_shape, dtype = operand_shape()
            shape = in_shape
            if weight_tensors:
                weight = weight_spec(weight_tensors[0])
            if len(weight_tensors) > 1:
                bias = weight_tensors[1]
        elif kind == "reshape":
            for wt in weight_tensors:
                skip(wt, "shape operand")
            _, dtype = operand_shape()
            if node.outputs[0] in shapes:
                shape = shapes[node.outputs[0]][0]
            elif weight_tensors and weight_tensors[0].int64_values and all(
                v > 0 for v in weight_tensors[0].int64_values
            ):
                shape = tuple(weight_tensors[0].int64_values)
            elif node.op_type == "Transpose":
                shape = operand_shape()[0][::-1]
            else:
                raise UnsupportedModel(f"cannot determine output shape of {name!r}")
        elif kind == "auxiliary":
            for wt in weight_tensors:
                skip(wt, "constant payload")
            if operands:
                shape, dtype = operand_shape()
            else:
                shape, dtype = shapes.get(node.outputs[0], ((1,), "f32"))
        else:  # elementwise, softmax, fallbacks
            shape, dtype = operand_shape()
            if kind == "elementwise":
                attrs = {"fn": ELEMENTWISE_FN.get(node.op_type, "add")}
                if weight_tensors:
                    weight = weight_spec(weight_tensors[0])
                    for extra in weight_tensors[1:]:
                        skip(extra, "surplus constant operand")

        if node.outputs[0] in shapes:
            shape = shapes[node.outputs[0]][0]
        emit(name, kind, in_names, shape, dtype, weight, attrs)
        if bias is not None:
            bias_name = _scope_name(Node("Add", f"{name}_bias", (), ()), index, taken)
            emit(bias_name, "elementwise", [name], shape, dtype,
                 weight_spec(bias), {"fn": "add"})
            name = bias_name
        producer[node.outputs[0]] = name
        shapes[node.outputs[0]] = (tuple(shape), dtype)
        for extra in node.outputs[1:]:
            producer[extra] = name
            shapes[extra] = (tuple(shape), dtype)

    for i, vi in enumerate(graph.outputs):
        if vi.name not in producer:
            raise UnsupportedModel(f"graph output {vi.name!r} is never produced")
        shape, dtype = shapes[vi.name]
        name = "output" if len(graph.outputs) == 1 else f"output_{i}"
        while name in taken:
            name += "_"
        taken.add(name)
        emit(name, "output", [producer[vi.name]], shape, dtype)

    for init_name, tensor in inits.items():
        if init_name not in consumed_weights and init_name not in report.skipped:
            skip(tensor, "unused initializer")

    return {"version": 1, "nodes": out_nodes}, report


def export_graph(data: bytes, batch: int | None = None):
    """ONNX model bytes -> (schema-1 JSON document, ConversionReport)."""
    return convert_graph(parse_model(data), batch=batch)
