"""Computation-graph IR: tensors, nodes, graphs, JSON (de)serialization, trimming.

Graphs enter as fine-grained ``RawNode`` DAGs with hierarchical '/'-scoped
names.  ``trim_and_group`` strips auxiliary operators and clusters the rest
into ``GraphNode`` units, the granularity at which sharding decisions are made.
"""

from __future__ import annotations

import heapq
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Mapping, Optional, Union

from .errors import CycleError, DanglingRef, EmptyGraph, ParseError

log = logging.getLogger(__name__)


class DType(Enum):
    F32 = ("f32", 4)
    F64 = ("f64", 8)

    def __init__(self, label: str, width: int):
        self.label = label
        self.width = width

    @classmethod
    def from_label(cls, label: str) -> "DType":
        for d in cls:
            if d.label == label:
                return d
        raise ParseError(f"unknown dtype {label!r}")

    @property
    def np(self) -> str:
        """Numpy-compatible dtype name."""
        return "float32" if self is DType.F32 else "float64"


class OpKind(Enum):
    MATMUL = "matmul"
    ELEMENTWISE = "elementwise"
    LAYERNORM = "layernorm"
    SOFTMAX = "softmax"
    EMBEDDING = "embedding"
    RESHAPE = "reshape"
    INPUT = "input"
    OUTPUT = "output"
    AUXILIARY = "auxiliary"
    COLLECTIVE = "collective"

    @classmethod
    def from_label(cls, label: str) -> "OpKind":
        for k in cls:
            if k.value == label:
                return k
        log.warning("unknown op %r mapped to elementwise", label)
        return cls.ELEMENTWISE


#: OpKinds that survive trimming.
COMPUTE_KINDS = frozenset(
    {
        OpKind.MATMUL,
        OpKind.ELEMENTWISE,
        OpKind.LAYERNORM,
        OpKind.SOFTMAX,
        OpKind.EMBEDDING,
        OpKind.RESHAPE,
        OpKind.INPUT,
        OpKind.OUTPUT,
        OpKind.COLLECTIVE,
    }
)


@dataclass(frozen=True)
class TensorSpec:
    """Shape/dtype/trainability descriptor of a tensor edge."""

    shape: tuple[int, ...]
    dtype: DType = DType.F32
    trainable: bool = False

    def __post_init__(self):
        if not self.shape:
            raise ParseError("tensor shape must be non-empty")
        if any((not isinstance(d, int)) or d < 1 for d in self.shape):
            raise ParseError(f"tensor dimensions must be positive integers: {self.shape}")

    @property
    def rank(self) -> int:
        return len(self.shape)

    @property
    def num_elements(self) -> int:
        return math.prod(self.shape)

    @property
    def byte_size(self) -> int:
        return self.num_elements * self.dtype.width

    def with_dtype(self, dtype: DType) -> "TensorSpec":
        return TensorSpec(self.shape, dtype, self.trainable)

    def to_json(self) -> dict:
        return {
            "shape": list(self.shape),
            "dtype": self.dtype.label,
            "trainable": self.trainable,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "TensorSpec":
        try:
            shape = tuple(int(d) for d in doc["shape"])
            dtype = DType.from_label(doc.get("dtype", "f32"))
            trainable = bool(doc.get("trainable", False))
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"bad tensor descriptor: {doc!r}") from exc
        return cls(shape, dtype, trainable)


@dataclass(frozen=True)
class RawNode:
    """Fine-grained operator with a hierarchical '/'-scoped name."""

    name: str
    op: OpKind
    inputs: tuple[str, ...]
    output: TensorSpec
    weight: Optional[TensorSpec] = None
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, key: str, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    @property
    def scope_parts(self) -> tuple[str, ...]:
        return tuple(self.name.split("/"))

    @property
    def depth(self) -> int:
        return len(self.scope_parts)

    def with_dtype(self, dtype: DType) -> "RawNode":
        return RawNode(
            self.name,
            self.op,
            self.inputs,
            self.output.with_dtype(dtype),
            self.weight.with_dtype(dtype) if self.weight else None,
            self.attrs,
        )


@dataclass(frozen=True)
class GraphNode:
    """Name-scoped operator group: the basic sharding unit.

    After trimming every group holds exactly one surviving compute operator
    (``member``); auxiliary siblings are recorded in the trim side table.
    """

    scope: str
    member: RawNode
    inputs: tuple[str, ...]  # producer GraphNode scopes

    @property
    def name(self) -> str:
        return self.scope

    @property
    def op(self) -> OpKind:
        return self.member.op

    @property
    def weight(self) -> Optional[TensorSpec]:
        return self.member.weight

    @property
    def activation(self) -> TensorSpec:
        return self.member.output

    @property
    def members(self) -> tuple[str, ...]:
        return (self.member.name,)

    @property
    def scope_parts(self) -> tuple[str, ...]:
        return tuple(self.scope.split("/"))

    @property
    def depth(self) -> int:
        return len(self.scope_parts)


@dataclass(frozen=True)
class AuxRecord:
    """Removed auxiliary node plus its original attachment points."""

    node: RawNode
    producers: tuple[str, ...]
    consumers: tuple[str, ...]


class ModelGraph:
    """Immutable DAG over RawNode or GraphNode values.

    Topological order is deterministic: ready nodes are emitted in
    lexicographic name order.
    """

    def __init__(self, nodes: Iterable, aux_table: Optional[dict[str, AuxRecord]] = None):
        self.nodes: dict[str, Union[RawNode, GraphNode]] = {}
        for node in nodes:
            if node.name in self.nodes:
                raise ParseError(f"duplicate node name {node.name!r}")
            self.nodes[node.name] = node
        if not self.nodes:
            raise EmptyGraph("graph has no nodes")
        self.aux_table: dict[str, AuxRecord] = dict(aux_table or {})
        self._validate_refs()
        self.consumers: dict[str, tuple[str, ...]] = self._build_consumers()
        self.topo_order: tuple[str, ...] = self._toposort()
        self.roots = tuple(n for n in self.topo_order if not self.nodes[n].inputs)
        self.leaves = tuple(n for n in self.topo_order if not self.consumers[n])
        self.depth = max(self.nodes[n].depth for n in self.nodes)

    def _validate_refs(self):
        for node in self.nodes.values():
            for ref in node.inputs:
                if ref not in self.nodes:
                    raise DanglingRef(f"node {node.name!r} references unknown input {ref!r}")

    def _build_consumers(self) -> dict[str, tuple[str, ...]]:
        cons: dict[str, list[str]] = {n: [] for n in self.nodes}
        for name in sorted(self.nodes):
            for ref in self.nodes[name].inputs:
                cons[ref].append(name)
        return {n: tuple(v) for n, v in cons.items()}

    def _toposort(self) -> tuple[str, ...]:
        indeg = {n: len(set(self.nodes[n].inputs)) for n in self.nodes}
        ready = [n for n, d in sorted(indeg.items()) if d == 0]
        heapq.heapify(ready)
        order: list[str] = []
        seen_edges: set[tuple[str, str]] = set()
        while ready:
            name = heapq.heappop(ready)
            order.append(name)
            for consumer in self.consumers[name]:
                if (name, consumer) in seen_edges:
                    continue
                seen_edges.add((name, consumer))
                indeg[consumer] -= 1
                if indeg[consumer] == 0:
                    heapq.heappush(ready, consumer)
        if len(order) != len(self.nodes):
            remaining = [n for n in self.nodes if n not in set(order)]
            offender = remaining[0]
            # report the offending back edge deterministically
            for ref in self.nodes[offender].inputs:
                if ref in remaining or ref == offender:
                    raise CycleError(ref, offender)
            raise CycleError(offender, offender)
        return tuple(order)

    @property
    def edges(self) -> tuple[tuple[str, str], ...]:
        out = []
        for name in self.topo_order:
            for ref in self.nodes[name].inputs:
                out.append((ref, name))
        return tuple(out)

    def node(self, name: str):
        return self.nodes[name]

    def __len__(self) -> int:
        return len(self.nodes)

    def with_dtype(self, dtype: DType) -> "ModelGraph":
        """Cast every tensor descriptor; only meaningful for raw graphs."""
        return ModelGraph([self.nodes[n].with_dtype(dtype) for n in self.topo_order])


# ---------------------------------------------------------------------------
# JSON graph format (schema version 1; version 2 adds device/collective
# fields emitted by the rewriter).

SCHEMA_VERSIONS = (1, 2)


def _node_from_json(doc: Mapping) -> RawNode:
    if "name" not in doc:
        raise ParseError("node document missing mandatory 'name'")
    name = str(doc["name"])
    op = OpKind.from_label(str(doc.get("op", "")))
    inputs = tuple(str(i) for i in doc.get("inputs", []))
    if doc.get("output") is None:
        raise ParseError(f"node {name!r} missing output descriptor")
    output = TensorSpec.from_json(doc["output"])
    weight = TensorSpec.from_json(doc["weight"]) if doc.get("weight") else None
    attrs = tuple(sorted((str(k), v) for k, v in (doc.get("attrs") or {}).items()))
    for extra in ("device", "collective"):
        if extra in doc:
            attrs = attrs + ((extra, doc[extra]),)
    return RawNode(name, op, inputs, output, weight, attrs)


def load_graph(source: Union[bytes, str, IO]) -> ModelGraph:
    """Parse the JSON graph format into a validated RawNode DAG."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict) or "nodes" not in doc:
        raise ParseError("top-level document must be an object with a 'nodes' list")
    if doc.get("version", 1) not in SCHEMA_VERSIONS:
        raise ParseError(f"unsupported schema version {doc.get('version')!r}")
    nodes = [_node_from_json(nd) for nd in doc["nodes"]]
    graph = ModelGraph(nodes)
    for node in nodes:
        if node.name in node.inputs:
            raise CycleError(node.name, node.name)
    return graph


def _node_to_json(node: RawNode) -> dict:
    doc = {
        "name": node.name,
        "op": node.op.value,
        "inputs": list(node.inputs),
        "weight": node.weight.to_json() if node.weight else None,
        "output": node.output.to_json(),
    }
    attrs = {k: v for k, v in node.attrs if k not in ("device", "collective")}
    if attrs:
        doc["attrs"] = attrs
    for k, v in node.attrs:
        if k in ("device", "collective"):
            doc[k] = v
    return doc


def save_graph(graph: ModelGraph, version: int = 1) -> bytes:
    """Canonical serialization: topological node order with name tie-break."""
    nodes = []
    for name in graph.topo_order:
        node = graph.nodes[name]
        if isinstance(node, GraphNode):
            node = node.member
        nodes.append(_node_to_json(node))
    doc = {"version": version, "nodes": nodes}
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")


# ---------------------------------------------------------------------------
# Trimming and grouping


def _parent_scope(name: str) -> str:
    return name.rsplit("/", 1)[0] if "/" in name else ""


def trim_and_group(graph: ModelGraph) -> ModelGraph:
    """Delete auxiliary operators and cluster the rest into GraphNodes.

    Bypass edges are re-stitched producer -> consumer; removed nodes land in
    the result's ``aux_table`` so the rewriter can restore them later.
    Compute nodes are grouped by their deepest containing name scope; scopes
    holding several compute operators fall back to one group per operator so
    every GraphNode carries at most one weight tensor.
    """
    if all(isinstance(graph.nodes[n], GraphNode) for n in graph.nodes):
        return graph  # already grouped; the pass is idempotent
    aux_table: dict[str, AuxRecord] = {}
    inputs_of: dict[str, tuple[str, ...]] = {
        n: graph.nodes[n].inputs for n in graph.topo_order
    }
    for name in graph.topo_order:
        node = graph.nodes[name]
        if node.op is not OpKind.AUXILIARY:
            continue
        producers = tuple(p for p in inputs_of[name] if p not in aux_table)
        consumers = tuple(
            c for c in graph.consumers[name] if graph.nodes[c].op is not OpKind.AUXILIARY
        )
        aux_table[name] = AuxRecord(node, producers, consumers)
    removed = set(aux_table)
    stitched: dict[str, RawNode] = {}
    for name in graph.topo_order:
        if name in removed:
            continue
        node = graph.nodes[name]
        # duplicate direct edges are semantic (e.g. x*x) and must survive
        new_inputs: list[str] = []
        for ref in node.inputs:
            if ref in removed:
                # bypass through (possibly chained) auxiliary nodes
                seen: set[str] = set()
                stack = [ref]
                while stack:
                    a = stack.pop()
                    for p in graph.nodes[a].inputs:
                        if p in removed:
                            if p not in seen:
                                seen.add(p)
                                stack.append(p)
                        elif p not in new_inputs:
                            new_inputs.append(p)
            else:
                new_inputs.append(ref)
        stitched[name] = RawNode(
            node.name, node.op, tuple(new_inputs), node.output, node.weight, node.attrs
        )
    if not stitched:
        raise EmptyGraph("no compute nodes remain after trimming")

    # group by parent scope, splitting scopes with more than one compute node
    by_scope: dict[str, list[str]] = {}
    for name in stitched:
        key = _parent_scope(name) or name
        by_scope.setdefault(key, []).append(name)
    scope_of: dict[str, str] = {}
    for key, names in by_scope.items():
        if len(names) == 1:
            scope_of[names[0]] = key
        else:
            for n in names:
                scope_of[n] = n
    # scopes must be unique across groups; fall back to own names on collision
    claimed: dict[str, list[str]] = {}
    for n, s in scope_of.items():
        claimed.setdefault(s, []).append(n)
    for s, names in claimed.items():
        if len(names) > 1:
            for n in names:
                scope_of[n] = n

    grouped: list[GraphNode] = []
    for name, raw in stitched.items():
        producer_scopes: list[str] = []
        for ref in raw.inputs:
            s = scope_of[ref]
            if s != scope_of[name] and s not in producer_scopes:
                producer_scopes.append(s)
        grouped.append(GraphNode(scope_of[name], raw, tuple(producer_scopes)))
    return ModelGraph(grouped, aux_table=aux_table)
