"""Graph rewriting: materialize a routed plan as a distributed graph.

The rewriter emits a lock-step program of per-device compute and explicit
collective steps, restores the auxiliary operators removed during trimming,
and packs small gradients into fused synchronization buckets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Union

from .errors import BadConfig, IndivisibleShard
from .ir import AuxRecord, ModelGraph, OpKind, RawNode, TensorSpec, _node_to_json
from .patterns import (
    Collective,
    CollectiveKind,
    PARTIAL,
    REPLICA,
    ShardKind,
    ShardSpec,
    apply_collective,
    patterns_for,
)

PARALLEL_SCHEMA_VERSION = 2


@dataclass(frozen=True)
class ComputeStep:
    """One operator executed lock-step on every device."""

    node: RawNode  # member operator with full (unsharded) tensor specs
    scope: str
    input_values: tuple[str, ...]  # value names feeding each operand
    input_states: tuple[ShardSpec, ...]
    weight_state: Optional[ShardSpec]
    output_state: ShardSpec  # state produced locally, before any collective


@dataclass(frozen=True)
class CollectiveStep:
    """Cross-device data motion producing a fresh named value."""

    name: str
    collective: Collective
    source_value: str
    payload: TensorSpec
    participants: tuple[int, ...]
    result_state: ShardSpec


@dataclass(frozen=True)
class ParallelGraph:
    device_count: int
    steps: tuple[Union[ComputeStep, CollectiveStep], ...]
    aux_table: dict[str, AuxRecord]
    provenance: dict[str, str]  # step/value name -> source GraphNode scope
    outputs: dict[str, str]  # graph leaf scope -> final value name

    @property
    def compute_steps(self) -> tuple[ComputeStep, ...]:
        return tuple(s for s in self.steps if isinstance(s, ComputeStep))

    @property
    def collective_steps(self) -> tuple[CollectiveStep, ...]:
        return tuple(s for s in self.steps if isinstance(s, CollectiveStep))


@dataclass(frozen=True)
class FusionBucket:
    members: tuple[TensorSpec, ...]
    total_bytes: int
    chunk_index: int


def pack_gradients(
    gradients: list[TensorSpec], mu: int, chunk_size: int
) -> tuple[list[FusionBucket], list[TensorSpec]]:
    """Greedy first-fit fusion of small gradients into fixed-size chunks.

    Gradients at or above the threshold pass through unfused; smaller ones
    accumulate in order until the next would overflow the chunk.  Order is
    preserved within and across buckets so synchronization and weight update
    can pipeline.
    """
    if mu > chunk_size:
        raise BadConfig(f"fusion threshold {mu} exceeds chunk size {chunk_size}")
    buckets: list[FusionBucket] = []
    unfused: list[TensorSpec] = []
    current: list[TensorSpec] = []
    current_bytes = 0

    def flush():
        nonlocal current, current_bytes
        if current:
            buckets.append(FusionBucket(tuple(current), current_bytes, len(buckets)))
            current, current_bytes = [], 0

    for grad in gradients:
        size = grad.byte_size
        if size >= mu:
            unfused.append(grad)
            continue
        if current_bytes + size > chunk_size:
            flush()
        current.append(grad)
        current_bytes += size
    flush()
    return buckets, unfused


def shard_shape(
    spec: TensorSpec, state: ShardSpec, devices: int, scope: str = "?"
) -> tuple[int, ...]:
    """Per-device shape of a tensor under a shard state."""
    if state.kind is not ShardKind.SPLIT or devices == 1:
        return spec.shape
    axis = state.normalized(spec.rank).axis
    if spec.shape[axis] % devices:
        raise IndivisibleShard(scope, axis, spec.shape[axis], devices)
    return tuple(d // devices if i == axis else d for i, d in enumerate(spec.shape))


def _pattern_of(routing_entry, op: OpKind):
    for pattern in patterns_for(op):
        if pattern.name == routing_entry.pattern:
            return pattern
    raise BadConfig(f"routing references unknown pattern {routing_entry.pattern!r}")


def rewrite_graph(graph: ModelGraph, routing: dict, mesh) -> ParallelGraph:
    """Emit the distributed form of a grouped graph under a routed plan.

    ``routing`` maps every GraphNode scope to its NodeRouting.  Split weights
    carry per-device shard shapes (divisibility was enforced at routing time,
    so IndivisibleShard here is an internal error), replica weights are
    duplicated, and collective steps appear exactly where the plan's edge
    conversions and pattern collectives dictate.  Conversions produce fresh
    values, leaving the producer's canonical value intact for its other
    consumers.
    """
    devices = mesh.device_count
    participants = tuple(range(devices))
    steps: list[Union[ComputeStep, CollectiveStep]] = []
    provenance: dict[str, str] = {}
    canonical_value: dict[str, str] = {}
    canonical_state: dict[str, ShardSpec] = {}

    scope_of_raw = {graph.nodes[s].member.name: s for s in graph.nodes}
    for scope in graph.topo_order:
        gnode = graph.nodes[scope]
        entry = routing[scope]
        pattern = _pattern_of(entry, gnode.op)
        conv = {p: c for p, c, _ in entry.input_conversions}
        input_values: list[str] = []
        input_states: list[ShardSpec] = []
        emitted: dict[str, tuple[str, ShardSpec]] = {}
        # member inputs keep edge multiplicity (e.g. x*x squares); a repeated
        # producer reuses the conversion value emitted for its first edge
        for raw_ref in (gnode.member.inputs or gnode.inputs):
            producer = scope_of_raw.get(raw_ref, raw_ref)
            src_value = canonical_value[producer]
            src_state = canonical_state[producer]
            coll = conv.get(producer)
            if producer in emitted:
                value, state = emitted[producer]
            elif coll is not None and coll.kind is not CollectiveKind.IDENTITY and devices > 1:
                payload = graph.nodes[producer].activation
                name = f"{scope}::in::{producer}::{coll.label}"
                result = apply_collective(src_state, coll)
                steps.append(CollectiveStep(name, coll, src_value, payload, participants, result))
                provenance[name] = scope
                value, state = name, result
                emitted[producer] = (value, state)
            else:
                value, state = src_value, src_state
                emitted[producer] = (value, state)
            input_values.append(value)
            input_states.append(state)

        weight_state = None
        if gnode.weight is not None:
            weight_state = (
                pattern.weight_spec.normalized(gnode.weight.rank)
                if pattern.weight_spec is not None
                else REPLICA
            )
            shard_shape(gnode.weight, weight_state, devices, scope)  # divisibility guard

        local_state = (
            PARTIAL
            if entry.output_collective.kind is CollectiveKind.ALL_REDUCE_SUM
            else entry.state
        )
        member = gnode.member
        steps.append(
            ComputeStep(
                member, scope, tuple(input_values), tuple(input_states),
                weight_state, local_state,
            )
        )
        provenance[member.name] = scope
        canonical_value[scope] = member.name
        canonical_state[scope] = local_state

        out_coll = entry.output_collective
        if out_coll.kind is not CollectiveKind.IDENTITY and devices > 1:
            name = f"{scope}::out::{out_coll.label}"
            result = apply_collective(local_state, out_coll)
            steps.append(
                CollectiveStep(name, out_coll, canonical_value[scope], gnode.activation,
                               participants, result)
            )
            provenance[name] = scope
            canonical_value[scope] = name
            canonical_state[scope] = result

        exit_coll = getattr(entry, "exit_conversion", None)
        if exit_coll is not None and exit_coll.kind is not CollectiveKind.IDENTITY and devices > 1:
            name = f"{scope}::exit::{exit_coll.label}"
            steps.append(
                CollectiveStep(name, exit_coll, canonical_value[scope], gnode.activation,
                               participants, REPLICA)
            )
            provenance[name] = scope
            canonical_value[scope] = name
            canonical_state[scope] = REPLICA

    outputs = {leaf: canonical_value[leaf] for leaf in graph.leaves}
    return ParallelGraph(devices, tuple(steps), dict(graph.aux_table), provenance, outputs)


# ---------------------------------------------------------------------------
# Schema-v2 serialization


def save_parallel_graph(pgraph: ParallelGraph) -> bytes:
    """Serialize in the JSON graph schema extended with device/collective
    fields (version 2)."""
    nodes = []
    coll_names = {s.name for s in pgraph.collective_steps}

    def ref(value: str, device: int) -> str:
        # collective outputs are single shared nodes; device values are per-device
        return value if value in coll_names else f"dev{device}/{value}"

    for step in pgraph.steps:
        if isinstance(step, ComputeStep):
            for device in range(pgraph.device_count):
                doc = _node_to_json(step.node)
                doc["name"] = f"dev{device}/{step.node.name}"
                doc["inputs"] = [ref(v, device) for v in step.input_values]
                doc["device"] = device
                attrs = doc.setdefault("attrs", {})
                attrs["scope"] = step.scope
                attrs["output_state"] = step.output_state.label
                if step.weight_state is not None:
                    attrs["weight_state"] = step.weight_state.label
                nodes.append(doc)
        else:
            nodes.append(
                {
                    "name": step.name,
                    "op": OpKind.COLLECTIVE.value,
                    "inputs": sorted({ref(step.source_value, d) for d in step.participants}),
                    "weight": None,
                    "output": step.payload.to_json(),
                    "collective": {
                        "kind": step.collective.kind.value,
                        "axis": step.collective.axis,
                        "participants": list(step.participants),
                    },
                    "attrs": {
                        "source": step.source_value,
                        "result_state": step.result_state.label,
                    },
                }
            )
    for aux_name in sorted(pgraph.aux_table):
        rec = pgraph.aux_table[aux_name]
        for device in range(pgraph.device_count):
            doc = _node_to_json(rec.node)
            doc["name"] = f"dev{device}/{rec.node.name}"
            doc["inputs"] = [
                f"dev{device}/{p}" for p in rec.producers
            ]
            doc["device"] = device
            doc.setdefault("attrs", {})["restored"] = True
            nodes.append(doc)
    doc = {
        "version": PARALLEL_SCHEMA_VERSION,
        "devices": pgraph.device_count,
        "nodes": nodes,
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n").encode("utf-8")
