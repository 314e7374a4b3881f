"""Analytical communication-cost model.

Pure-communication objective: ring-collective volume terms with per-kind
efficiency multipliers and a fixed per-call setup latency.  Forward time is
the worst root-to-leaf chain of activation collectives; backward time is the
gradient traffic of replicated trainable weights (split weights own their
shard gradients locally), discounted by the overlap fraction and bucketed by
the gradient-fusion plan.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Mapping, Union

from .errors import BadConfig
from .ir import TensorSpec
from .patterns import Collective, CollectiveKind

DEFAULT_EFFICIENCY = {
    CollectiveKind.ALL_REDUCE_SUM: 1.0,
    CollectiveKind.ALL_GATHER: 1.2,
    CollectiveKind.REDUCE_SCATTER: 1.2,
    CollectiveKind.ALL_TO_ALL: 1.5,
}

_EFF_KEYS = {
    "allreduce": CollectiveKind.ALL_REDUCE_SUM,
    "allgather": CollectiveKind.ALL_GATHER,
    "reducescatter": CollectiveKind.REDUCE_SCATTER,
    "alltoall": CollectiveKind.ALL_TO_ALL,
}


@dataclass(frozen=True)
class ClusterSpec:
    """Device mesh: m worker nodes with n accelerators each."""

    m: int
    n: int
    intra_bw: float = 2.0e11
    inter_bw: float = 2.0e11
    efficiency: tuple[tuple[CollectiveKind, float], ...] = tuple(
        sorted(DEFAULT_EFFICIENCY.items(), key=lambda kv: kv[0].value)
    )
    overlap_fraction: float = 0.5
    setup_latency_s: float = 3.0e-5

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise BadConfig(f"mesh must be at least 1x1, got {self.m}x{self.n}")
        if self.intra_bw <= 0 or self.inter_bw <= 0:
            raise BadConfig("bandwidths must be positive")
        if not 0.0 <= self.overlap_fraction <= 1.0:
            raise BadConfig("overlap_fraction must lie in [0, 1]")
        eff = dict(self.efficiency)
        if any(v < 1.0 for v in eff.values()):
            raise BadConfig("efficiency factors must be >= 1")
        if eff.get(CollectiveKind.ALL_REDUCE_SUM, 1.0) != 1.0:
            raise BadConfig("allreduce efficiency is the reference and must be 1.0")

    @property
    def device_count(self) -> int:
        return self.m * self.n

    @property
    def bandwidth(self) -> float:
        # inter-node links dominate as soon as the mesh spans several nodes
        return self.inter_bw if self.m > 1 else self.intra_bw

    def eff(self, kind: CollectiveKind) -> float:
        return dict(self.efficiency).get(kind, 1.0)

    @classmethod
    def from_mesh(cls, mesh: str, **kwargs) -> "ClusterSpec":
        try:
            m, n = (int(p) for p in mesh.lower().split("x"))
        except ValueError as exc:
            raise BadConfig(f"mesh must look like 'MxN', got {mesh!r}") from exc
        return cls(m=m, n=n, **kwargs)

    def to_json(self) -> dict:
        return {
            "m": self.m,
            "n": self.n,
            "intra_bw": self.intra_bw,
            "inter_bw": self.inter_bw,
            "efficiency": {
                {v: k for k, v in _EFF_KEYS.items()}[kind]: val
                for kind, val in self.efficiency
            },
            "overlap_fraction": self.overlap_fraction,
            "setup_latency_s": self.setup_latency_s,
        }

    @classmethod
    def from_json(cls, doc: Union[Mapping, str, bytes, IO]) -> "ClusterSpec":
        if hasattr(doc, "read"):
            doc = doc.read()
        if isinstance(doc, (str, bytes)):
            doc = json.loads(doc)
        eff = dict(DEFAULT_EFFICIENCY)
        for key, val in (doc.get("efficiency") or {}).items():
            if key not in _EFF_KEYS:
                raise BadConfig(f"unknown efficiency key {key!r}")
            eff[_EFF_KEYS[key]] = float(val)
        try:
            return cls(
                m=int(doc["m"]),
                n=int(doc["n"]),
                intra_bw=float(doc.get("intra_bw", 2.0e11)),
                inter_bw=float(doc.get("inter_bw", 2.0e11)),
                efficiency=tuple(sorted(eff.items(), key=lambda kv: kv[0].value)),
                overlap_fraction=float(doc.get("overlap_fraction", 0.5)),
                setup_latency_s=float(doc.get("setup_latency_s", 3.0e-5)),
            )
        except KeyError as exc:
            raise BadConfig(f"cluster config missing key {exc}") from exc


def collective_cost_bytes(kind: CollectiveKind, nbytes: int, mesh: ClusterSpec) -> float:
    """Transfer seconds for one collective call (setup latency excluded)."""
    if kind is CollectiveKind.IDENTITY:
        return 0.0
    d = mesh.device_count
    if d == 1:
        return 0.0
    bw = mesh.bandwidth
    if kind is CollectiveKind.ALL_REDUCE_SUM:
        volume = 2.0 * (d - 1) / d * nbytes
    else:
        volume = (d - 1) / d * nbytes
    return volume / bw * mesh.eff(kind)


def collective_cost(kind: CollectiveKind, tensor: TensorSpec, mesh: ClusterSpec) -> float:
    return collective_cost_bytes(kind, tensor.byte_size, mesh)


def collective_call_cost(coll: Collective, nbytes: int, mesh: ClusterSpec) -> float:
    """Transfer plus setup; Identity and single-device meshes are free."""
    if coll.kind is CollectiveKind.IDENTITY or mesh.device_count == 1:
        return 0.0
    return mesh.setup_latency_s + collective_cost_bytes(coll.kind, nbytes, mesh)


@dataclass
class CostReport:
    forward_comm: float = 0.0
    backward_comm: float = 0.0
    overlap_fraction: float = 0.5
    bytes_by_collective: dict[str, int] = field(default_factory=dict)
    collective_calls: int = 0
    flops: int = 0

    @property
    def effective_backward(self) -> float:
        return self.backward_comm * (1.0 - self.overlap_fraction)

    @property
    def total(self) -> float:
        return self.forward_comm + self.effective_backward

    def add_bytes(self, kind: CollectiveKind, nbytes: int) -> None:
        if kind is CollectiveKind.IDENTITY:
            return
        key = kind.value
        self.bytes_by_collective[key] = self.bytes_by_collective.get(key, 0) + nbytes
        self.collective_calls += 1

    def to_json(self) -> dict:
        return {
            "forward_comm_s": self.forward_comm,
            "backward_comm_s": self.backward_comm,
            "effective_backward_s": self.effective_backward,
            "total_s": self.total,
            "overlap_fraction": self.overlap_fraction,
            "bytes_by_collective": dict(sorted(self.bytes_by_collective.items())),
            "collective_calls": self.collective_calls,
            "flops": self.flops,
        }


def _node_flops(node) -> int:
    from .ir import OpKind

    if node.op is OpKind.MATMUL and node.weight is not None:
        return 2 * node.activation.num_elements * node.weight.shape[0]
    return 0


def plan_cost(
    routed,
    graph,
    mesh: ClusterSpec,
    mu: int = 1 << 20,
    chunk_size: int = 4 << 20,
) -> CostReport:
    """Communication cost of one routed subgraph plan (single instance).

    Forward time is the most expensive root-to-leaf chain of activation
    collectives (conversions plus pattern collectives, one setup each).
    Backward time covers gradient synchronization for replicated trainable
    weights only: small gradients are fused per the bucket plan, each bucket
    or unfused gradient paying one allreduce, then the whole phase is
    discounted by the overlap fraction.
    """
    from .patterns import ShardKind
    from .rewrite import pack_gradients

    sub = routed.plan.subgraph
    members = set(sub.template)
    report = CostReport(overlap_fraction=mesh.overlap_fraction)
    rmap = routed.routing_map
    exit_map = {scope: (coll, b) for scope, coll, b in routed.exit_conversions}

    # forward: longest-path DP over the template DAG
    reach: dict[str, float] = {}
    for scope in sub.template:
        node = graph.nodes[scope]
        routing = rmap[scope]
        conv_cost = {
            p: collective_call_cost(c, b, mesh) for p, c, b in routing.input_conversions
        }
        for _, coll, b in routing.input_conversions:
            report.add_bytes(coll.kind, b)
        base = 0.0
        for producer in node.inputs:
            if producer in members:
                base = max(base, reach[producer] + conv_cost.get(producer, 0.0))
        own = collective_call_cost(routing.output_collective, routing.output_bytes, mesh)
        if routing.output_collective.kind is not CollectiveKind.IDENTITY:
            report.add_bytes(routing.output_collective.kind, routing.output_bytes)
        reach[scope] = base + own
        report.flops += _node_flops(node)
    forward = 0.0
    for scope in sub.template:
        tail = reach[scope]
        if scope in exit_map:
            coll, b = exit_map[scope]
            tail += collective_call_cost(coll, b, mesh)
            report.add_bytes(coll.kind, b)
        forward = max(forward, tail)
    report.forward_comm = forward

    # backward: replicated trainable weights synchronize gradients
    grads = []
    assignment = routed.plan.assignment_map
    for scope in sub.template:
        node = graph.nodes[scope]
        w = node.weight
        if w is None or not w.trainable:
            continue
        if assignment[scope].kind is not ShardKind.SPLIT:
            grads.append(w)
    buckets, unfused = pack_gradients(grads, mu, chunk_size)
    backward = 0.0
    if mesh.device_count > 1:
        payloads = [b.total_bytes for b in buckets] + [g.byte_size for g in unfused]
        for nbytes in payloads:
            backward += mesh.setup_latency_s + collective_cost_bytes(
                CollectiveKind.ALL_REDUCE_SUM, nbytes, mesh
            )
            report.add_bytes(CollectiveKind.ALL_REDUCE_SUM, nbytes)
    report.backward_comm = backward
    return report
