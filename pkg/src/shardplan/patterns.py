"""Split/Replica/Communication sharding patterns.

Each pattern maps the shard state of an operator's activation inputs and
weight to an output shard state plus the collective needed for mathematical
equivalence.  The registry is a closed table keyed by operator kind; every
kind includes the all-replica fallback, so plan search can always retreat to
replication.

Axis conventions: split axes are stored as-is for weights (always concrete)
and may be ``LAST`` (-1) for activations, normalized against the concrete
tensor rank at use sites.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import NoRouteError, SpecMismatch
from .ir import OpKind, TensorSpec

LAST = -1


class ShardKind(Enum):
    REPLICA = "replica"
    SPLIT = "split"
    PARTIAL = "partial"


@dataclass(frozen=True)
class ShardSpec:
    kind: ShardKind
    axis: Optional[int] = None

    def __post_init__(self):
        if self.kind is ShardKind.SPLIT:
            if self.axis is None:
                raise SpecMismatch("split spec requires an axis")
        elif self.axis is not None:
            raise SpecMismatch(f"{self.kind.value} spec carries no axis")

    def normalized(self, rank: int) -> "ShardSpec":
        if self.kind is ShardKind.SPLIT:
            axis = self.axis if self.axis >= 0 else rank + self.axis
            if not 0 <= axis < rank:
                raise SpecMismatch(f"split axis {self.axis} out of range for rank {rank}")
            return ShardSpec(ShardKind.SPLIT, axis)
        return self

    @property
    def label(self) -> str:
        if self.kind is ShardKind.SPLIT:
            return f"split{self.axis}"
        return self.kind.value

    @classmethod
    def from_label(cls, label: str) -> "ShardSpec":
        if label == "replica":
            return REPLICA
        if label == "partial":
            return PARTIAL
        if label.startswith("split"):
            return cls(ShardKind.SPLIT, int(label[len("split"):]))
        raise SpecMismatch(f"unknown shard spec label {label!r}")


REPLICA = ShardSpec(ShardKind.REPLICA)
PARTIAL = ShardSpec(ShardKind.PARTIAL)


def split(axis: int) -> ShardSpec:
    return ShardSpec(ShardKind.SPLIT, axis)


class CollectiveKind(Enum):
    IDENTITY = "identity"
    ALL_REDUCE_SUM = "allreduce"
    ALL_GATHER = "allgather"
    REDUCE_SCATTER = "reducescatter"
    ALL_TO_ALL = "alltoall"


@dataclass(frozen=True)
class Collective:
    kind: CollectiveKind
    axis: Optional[int] = None

    @property
    def label(self) -> str:
        return self.kind.value if self.axis is None else f"{self.kind.value}({self.axis})"


IDENTITY = Collective(CollectiveKind.IDENTITY)


@dataclass(frozen=True)
class ShardingPattern:
    """One way of sharding an operator kind.

    ``input_spec`` applies uniformly to every activation input (all operators
    here have either one activation input or a symmetric pair).
    """

    name: str
    op: OpKind
    input_spec: ShardSpec
    weight_spec: Optional[ShardSpec]
    output_spec: ShardSpec
    collective: Collective


def _p(name, op, inp, weight, out, coll=IDENTITY):
    return ShardingPattern(name, op, inp, weight, out, coll)


_REGISTRY: dict[OpKind, tuple[ShardingPattern, ...]] = {
    OpKind.MATMUL: (
        _p("matmul.replicate", OpKind.MATMUL, REPLICA, REPLICA, REPLICA),
        _p("matmul.col", OpKind.MATMUL, REPLICA, split(1), split(LAST)),
        _p(
            "matmul.row.allreduce",
            OpKind.MATMUL,
            split(LAST),
            split(0),
            PARTIAL,
            Collective(CollectiveKind.ALL_REDUCE_SUM),
        ),
        _p("matmul.data_parallel", OpKind.MATMUL, split(0), REPLICA, split(0)),
    ),
    OpKind.ELEMENTWISE: (
        _p("elementwise.replicate", OpKind.ELEMENTWISE, REPLICA, REPLICA, REPLICA),
        _p("elementwise.split0", OpKind.ELEMENTWISE, split(0), REPLICA, split(0)),
        _p("elementwise.split_last", OpKind.ELEMENTWISE, split(LAST), split(0), split(LAST)),
    ),
    OpKind.LAYERNORM: (
        _p("layernorm.replicate", OpKind.LAYERNORM, REPLICA, None, REPLICA),
        _p("layernorm.split0", OpKind.LAYERNORM, split(0), None, split(0)),
    ),
    OpKind.SOFTMAX: (
        _p("softmax.replicate", OpKind.SOFTMAX, REPLICA, None, REPLICA),
        _p("softmax.split0", OpKind.SOFTMAX, split(0), None, split(0)),
    ),
    OpKind.EMBEDDING: (
        _p("embedding.replicate", OpKind.EMBEDDING, REPLICA, REPLICA, REPLICA),
        _p("embedding.col", OpKind.EMBEDDING, REPLICA, split(1), split(LAST)),
        _p("embedding.data_parallel", OpKind.EMBEDDING, split(0), REPLICA, split(0)),
    ),
    OpKind.RESHAPE: (
        _p("reshape.replicate", OpKind.RESHAPE, REPLICA, None, REPLICA),
    ),
    OpKind.INPUT: (
        _p("input.replicate", OpKind.INPUT, REPLICA, None, REPLICA),
    ),
    OpKind.OUTPUT: (
        _p("output.replicate", OpKind.OUTPUT, REPLICA, None, REPLICA),
    ),
}


#: Read-only view of the full registry, keyed by compute kind.
PATTERN_REGISTRY = _REGISTRY


def patterns_for(op: OpKind) -> tuple[ShardingPattern, ...]:
    """Registry entries for a compute kind; never empty (replica fallback)."""
    if op not in _REGISTRY:
        raise SpecMismatch(f"{op.value} is not a shardable compute kind")
    return _REGISTRY[op]


def apply_collective(state: ShardSpec, coll: Collective) -> ShardSpec:
    """Shard state after a collective runs on the tensor."""
    if coll.kind is CollectiveKind.IDENTITY:
        return state
    if coll.kind is CollectiveKind.ALL_REDUCE_SUM:
        return REPLICA
    if coll.kind is CollectiveKind.ALL_GATHER:
        return REPLICA
    if coll.kind is CollectiveKind.REDUCE_SCATTER:
        return split(coll.axis)
    if coll.kind is CollectiveKind.ALL_TO_ALL:
        return split(coll.axis)
    raise SpecMismatch(f"unknown collective {coll!r}")


def infer_output(
    pattern: ShardingPattern, input_states: list[ShardSpec], rank: int = 3
) -> tuple[ShardSpec, Collective]:
    """Output shard state (after the pattern's collective) for given inputs."""
    want = pattern.input_spec.normalized(rank)
    for st in input_states:
        if st.normalized(rank) != want:
            raise SpecMismatch(
                f"pattern {pattern.name}: input state {st.label} != required {want.label}"
            )
    out = apply_collective(pattern.output_spec, pattern.collective)
    return out, pattern.collective


def conversion_collective(frm: ShardSpec, to: ShardSpec, tensor: TensorSpec) -> Collective:
    """Single collective realizing a shard-state conversion on an edge.

    Raises NoRouteError when no single collective exists (the router treats
    that edge as unroutable).
    """
    a = frm.normalized(tensor.rank)
    b = to.normalized(tensor.rank)
    if a == b:
        return IDENTITY
    if b.kind is ShardKind.REPLICA:
        if a.kind is ShardKind.SPLIT:
            return Collective(CollectiveKind.ALL_GATHER, a.axis)
        if a.kind is ShardKind.PARTIAL:
            return Collective(CollectiveKind.ALL_REDUCE_SUM)
    if a.kind is ShardKind.SPLIT and b.kind is ShardKind.SPLIT and a.axis != b.axis:
        return Collective(CollectiveKind.ALL_TO_ALL, b.axis)
    if a.kind is ShardKind.PARTIAL and b.kind is ShardKind.SPLIT:
        return Collective(CollectiveKind.REDUCE_SCATTER, b.axis)
    raise NoRouteError(f"no single collective converts {a.label} -> {b.label}")
