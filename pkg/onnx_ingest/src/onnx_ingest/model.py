"""Typed view over the subset of the ONNX protobuf schema the converter needs.

Field numbers follow the published onnx.proto; unknown fields are ignored so
models from any exporter parse as long as the structural subset is present.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .wire import WireError, fields_by_number, read_packed_int64, varint_to_signed64

# TensorProto.DataType values we care about
FLOAT = 1
INT32 = 6
INT64 = 7
DOUBLE = 11

DTYPE_LABEL = {FLOAT: "f32", DOUBLE: "f64"}
INT_TYPES = {INT32, INT64}


class ModelParseError(ValueError):
    """File is not a readable ONNX model."""


def _utf8(value: bytes) -> str:
    try:
        return value.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelParseError(f"invalid UTF-8 in string field: {exc}") from exc


@dataclass
class Dim:
    value: int | None  # concrete size, or None when symbolic
    param: str = ""


@dataclass
class ValueInfo:
    name: str
    elem_type: int = 0
    dims: tuple[Dim, ...] = ()


@dataclass
class Tensor:
    name: str
    data_type: int
    dims: tuple[int, ...]
    int64_values: tuple[int, ...] = ()  # decoded only for shape-like tensors

    @property
    def num_elements(self) -> int:
        n = 1
        for d in self.dims:
            n *= d
        return n


@dataclass
class Node:
    op_type: str
    name: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    attrs_int: dict[str, int] = field(default_factory=dict)


@dataclass
class Graph:
    name: str
    nodes: list[Node]
    initializers: dict[str, Tensor]
    inputs: list[ValueInfo]
    outputs: list[ValueInfo]
    value_infos: dict[str, ValueInfo]


def _parse_dims(shape_body: bytes) -> tuple[Dim, ...]:
    dims = []
    for dim_body in fields_by_number(shape_body).get(1, []):
        f = fields_by_number(dim_body)
        if 1 in f:
            dims.append(Dim(value=varint_to_signed64(f[1][-1])))
        elif 2 in f:
            dims.append(Dim(value=None, param=_utf8(f[2][-1])))
        else:
            dims.append(Dim(value=None))
    return tuple(dims)


def _parse_value_info(body: bytes) -> ValueInfo:
    f = fields_by_number(body)
    name = _utf8(f[1][-1]) if 1 in f else ""
    elem_type, dims = 0, ()
    if 2 in f:  # TypeProto
        t = fields_by_number(f[2][-1])
        if 1 in t:  # tensor_type
            tt = fields_by_number(t[1][-1])
            if 1 in tt:
                elem_type = tt[1][-1]
            if 2 in tt:
                dims = _parse_dims(tt[2][-1])
    return ValueInfo(name, elem_type, dims)


def _parse_tensor(body: bytes) -> Tensor:
    f = fields_by_number(body)
    dims = tuple(varint_to_signed64(v) for v in f.get(1, []))
    data_type = f.get(2, [0])[-1]
    name = _utf8(f[8][-1]) if 8 in f else ""
    int64_values: tuple[int, ...] = ()
    if data_type == INT64:
        if 7 in f:  # packed int64_data
            int64_values = tuple(v for chunk in f[7] for v in read_packed_int64(chunk))
        elif 9 in f:  # raw_data, little-endian
            raw = f[9][-1]
            int64_values = tuple(
                int.from_bytes(raw[i:i + 8], "little", signed=True)
                for i in range(0, len(raw), 8)
            )
    return Tensor(name, data_type, dims, int64_values)


def _parse_node(body: bytes) -> Node:
    f = fields_by_number(body)
    attrs_int: dict[str, int] = {}
    for attr_body in f.get(5, []):
        a = fields_by_number(attr_body)
        if 1 in a and 3 in a:  # name + int value
            attrs_int[_utf8(a[1][-1])] = varint_to_signed64(a[3][-1])
    return Node(
        op_type=_utf8(f[4][-1]) if 4 in f else "",
        name=_utf8(f[3][-1]) if 3 in f else "",
        inputs=tuple(_utf8(v) for v in f.get(1, [])),
        outputs=tuple(_utf8(v) for v in f.get(2, [])),
        attrs_int=attrs_int,
    )


def parse_model(data: bytes) -> Graph:
    """Decode ModelProto bytes into the structural subset."""
    try:
        model = fields_by_number(data)
        if 7 not in model:
            raise ModelParseError("model has no graph")
        g = fields_by_number(model[7][-1])
        initializers = {}
        for body in g.get(5, []):
            tensor = _parse_tensor(body)
            if not tensor.name:
                raise ModelParseError("initializer without a name")
            initializers[tensor.name] = tensor
        return Graph(
            name=_utf8(g[2][-1]) if 2 in g else "",
            nodes=[_parse_node(b) for b in g.get(1, [])],
            initializers=initializers,
            inputs=[_parse_value_info(b) for b in g.get(11, [])],
            outputs=[_parse_value_info(b) for b in g.get(12, [])],
            value_infos={
                vi.name: vi for vi in (_parse_value_info(b) for b in g.get(13, []))
            },
        )
    except WireError as exc:
        raise ModelParseError(f"not a protobuf model file: {exc}") from exc
