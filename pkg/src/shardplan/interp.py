"""Reference interpreter: single-device execution, lock-step multi-device
simulation of a rewritten graph, and numerical equivalence checking."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeMismatch, SpecMismatch
from .ir import DType, ModelGraph, OpKind, RawNode
from .patterns import CollectiveKind, ShardKind, ShardSpec
from .rewrite import CollectiveStep, ComputeStep, ParallelGraph

_EPS = 1e-5  # layer normalization stabilizer

#: Relative-error tolerance for declaring two executions equivalent.
TOLERANCE = {np.float64: 1e-10, np.float32: 1e-5}


# ---------------------------------------------------------------------------
# Collective primitives (lists indexed by device)


def all_reduce_sum(shards: list[np.ndarray]) -> list[np.ndarray]:
    total = np.sum(np.stack(shards, axis=0), axis=0)
    return [total.copy() for _ in shards]


def all_gather(shards: list[np.ndarray], axis: int) -> list[np.ndarray]:
    full = np.concatenate(shards, axis=axis)
    return [full.copy() for _ in shards]


def reduce_scatter(shards: list[np.ndarray], axis: int) -> list[np.ndarray]:
    total = np.sum(np.stack(shards, axis=0), axis=0)
    return [c.copy() for c in np.split(total, len(shards), axis=axis)]


def all_to_all(shards: list[np.ndarray], src_axis: int, dst_axis: int) -> list[np.ndarray]:
    full = np.concatenate(shards, axis=src_axis)
    return [c.copy() for c in np.split(full, len(shards), axis=dst_axis)]


# ---------------------------------------------------------------------------
# Deterministic tensor material


def _rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def init_weight(node: RawNode, seed: int) -> np.ndarray:
    """Full weight tensor for a node, reproducible from (seed, node name)."""
    spec = node.weight
    if spec is None:
        raise SpecMismatch(f"node {node.name!r} has no weight")
    rng = _rng_for(seed, node.name)
    scale = 1.0 / np.sqrt(max(spec.shape[0], 1))
    data = rng.uniform(-scale, scale, size=spec.shape)
    return data.astype(spec.dtype.np, copy=False)


def make_inputs(graph: ModelGraph, seed: int) -> dict[str, np.ndarray]:
    """Deterministic input values for every root Input node of a graph."""
    inputs = {}
    for scope in graph.topo_order:
        node = graph.nodes[scope]
        if node.op is OpKind.INPUT:
            spec = node.member.output if hasattr(node, "member") else node.output
            rng = _rng_for(seed, f"input/{scope}")
            inputs[scope] = rng.uniform(-1.0, 1.0, size=spec.shape).astype(spec.dtype.np)
    return inputs


# ---------------------------------------------------------------------------
# Operator semantics


def _embedding_indices(x: np.ndarray, vocab: int) -> np.ndarray:
    return (np.floor(np.abs(x) * vocab).astype(np.int64)) % vocab


def eval_op(node: RawNode, operands: list[np.ndarray], weight: Optional[np.ndarray]) -> np.ndarray:
    op = node.op
    if op is OpKind.INPUT:
        return operands[0]
    if op is OpKind.OUTPUT:
        return operands[0]
    if op is OpKind.MATMUL:
        return np.matmul(operands[0], weight)
    if op is OpKind.EMBEDDING:
        idx = _embedding_indices(operands[0], weight.shape[0])
        return weight[idx]
    if op is OpKind.ELEMENTWISE:
        fn = node.attr("fn", "add")
        if fn == "mul":
            out = operands[0]
            for extra in operands[1:]:
                out = out * extra
        elif fn == "add":
            out = operands[0]
            for extra in operands[1:]:
                out = out + extra
        else:
            raise SpecMismatch(f"unknown elementwise fn {fn!r} on {node.name!r}")
        if weight is not None:
            out = out + weight
        return out
    if op is OpKind.LAYERNORM:
        x = operands[0]
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        out = (x - mean) / np.sqrt(var + _EPS)
        if weight is not None:
            out = out * weight
        return out
    if op is OpKind.SOFTMAX:
        x = operands[0]
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=-1, keepdims=True)
    if op is OpKind.RESHAPE:
        return operands[0].reshape(node.output.shape)
    if op is OpKind.AUXILIARY:
        return operands[0]
    raise SpecMismatch(f"cannot execute op {op.value!r} on node {node.name!r}")


# ---------------------------------------------------------------------------
# Single-device reference execution


def execute_single(
    graph: ModelGraph, inputs: dict[str, np.ndarray], seed: int = 0
) -> dict[str, np.ndarray]:
    """Execute a grouped graph on one device; returns leaf scope -> value."""
    values: dict[str, np.ndarray] = {}
    scope_of_raw = {graph.nodes[s].member.name: s for s in graph.nodes}
    for scope in graph.topo_order:
        gnode = graph.nodes[scope]
        member = gnode.member
        if gnode.op is OpKind.INPUT:
            if scope not in inputs:
                raise SpecMismatch(f"missing input value for {scope!r}")
            operands = [np.asarray(inputs[scope], dtype=member.output.dtype.np)]
        else:
            # member inputs keep edge multiplicity (e.g. x*x squares)
            operands = [values[scope_of_raw[p]] for p in member.inputs]
        weight = init_weight(member, seed) if member.weight is not None else None
        out = eval_op(member, operands, weight)
        if tuple(out.shape) != member.output.shape:
            raise ShapeMismatch(
                f"{scope}: produced {tuple(out.shape)}, declared {member.output.shape}"
            )
        values[scope] = out
    return {leaf: values[leaf] for leaf in graph.leaves}


# ---------------------------------------------------------------------------
# Multi-device lock-step simulation


def _slice_shard(full: np.ndarray, state: ShardSpec, devices: int, device: int) -> np.ndarray:
    if state.kind is not ShardKind.SPLIT or devices == 1:
        return full
    axis = state.normalized(full.ndim).axis
    return np.split(full, devices, axis=axis)[device]


def _split_axis_of(local_shape: tuple[int, ...], full_shape: tuple[int, ...], devices: int) -> int:
    for axis, (loc, dim) in enumerate(zip(local_shape, full_shape)):
        if loc != dim:
            if loc * devices != dim:
                raise ShapeMismatch(
                    f"local shape {local_shape} is not a {devices}-way shard of {full_shape}"
                )
            return axis
    raise ShapeMismatch(f"value of shape {local_shape} is not sharded")


def _run_collective(step: CollectiveStep, shards: list[np.ndarray]) -> list[np.ndarray]:
    kind = step.collective.kind
    devices = len(shards)
    full_shape = step.payload.shape
    if kind is CollectiveKind.ALL_REDUCE_SUM:
        return all_reduce_sum(shards)
    if kind is CollectiveKind.ALL_GATHER:
        axis = _split_axis_of(shards[0].shape, full_shape, devices)
        return all_gather(shards, axis)
    if kind is CollectiveKind.REDUCE_SCATTER:
        axis = ShardSpec(ShardKind.SPLIT, step.collective.axis).normalized(len(full_shape)).axis
        return reduce_scatter(shards, axis)
    if kind is CollectiveKind.ALL_TO_ALL:
        src = _split_axis_of(shards[0].shape, full_shape, devices)
        dst = ShardSpec(ShardKind.SPLIT, step.collective.axis).normalized(len(full_shape)).axis
        return all_to_all(shards, src, dst)
    return shards


def execute_sharded(
    pgraph: ParallelGraph, inputs: dict[str, np.ndarray], seed: int = 0
) -> dict[str, np.ndarray]:
    """Simulate a rewritten graph across its devices in lock step.

    Weights are drawn exactly as in single-device execution and sliced
    per device, so a correct plan reproduces the reference bit patterns up
    to floating-point reassociation in reductions.  Returns leaf scope ->
    device-0 value (leaves are fully replicated on exit).
    """
    devices = pgraph.device_count
    values: dict[str, list[np.ndarray]] = {}
    for step in pgraph.steps:
        if isinstance(step, CollectiveStep):
            values[step.name] = _run_collective(step, values[step.source_value])
            continue
        member = step.node
        per_device: list[np.ndarray] = []
        full_weight = init_weight(member, seed) if member.weight is not None else None
        for device in range(devices):
            if member.op is OpKind.INPUT:
                if step.scope not in inputs:
                    raise SpecMismatch(f"missing input value for {step.scope!r}")
                operands = [np.asarray(inputs[step.scope], dtype=member.output.dtype.np)]
            else:
                operands = [values[v][device] for v in step.input_values]
            weight = (
                _slice_shard(full_weight, step.weight_state, devices, device)
                if full_weight is not None
                else None
            )
            per_device.append(eval_op(member, operands, weight))
        values[member.name] = per_device
    return {leaf: values[value][0] for leaf, value in pgraph.outputs.items()}


# ---------------------------------------------------------------------------
# Equivalence


def relative_error(result: np.ndarray, reference: np.ndarray) -> float:
    """max |a-b| / max(max|b|, tiny) over the tensor pair."""
    a = np.asarray(result, dtype=np.float64)
    b = np.asarray(reference, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"compared shapes differ: {a.shape} vs {b.shape}")
    denom = max(float(np.max(np.abs(b))), np.finfo(np.float64).tiny)
    return float(np.max(np.abs(a - b))) / denom


def compare_outputs(
    sharded: dict[str, np.ndarray], reference: dict[str, np.ndarray]
) -> dict[str, float]:
    """Per-output relative error between two executions."""
    if set(sharded) != set(reference):
        raise SpecMismatch(
            f"output sets differ: {sorted(sharded)} vs {sorted(reference)}"
        )
    return {name: relative_error(sharded[name], ref) for name, ref in reference.items()}


@dataclass(frozen=True)
class EquivalenceReport:
    trials: int
    tolerance: float
    max_errors: dict[str, float]  # output scope -> worst error across trials
    passed: bool

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "tolerance": self.tolerance,
            "max_errors": {k: self.max_errors[k] for k in sorted(self.max_errors)},
            "passed": self.passed,
        }


def check_equivalence(
    graph: ModelGraph,
    pgraph: ParallelGraph,
    trials: int = 10,
    tolerance: Optional[float] = None,
    seed: int = 0,
) -> EquivalenceReport:
    """Run both executions over random input draws and compare outputs.

    The default tolerance is keyed off the graph dtype: 1e-10 for 64-bit
    values, 1e-5 for 32-bit (cross-device reductions may reassociate sums).
    Failures are reported, not raised.
    """
    if trials < 1:
        raise SpecMismatch("equivalence check needs at least one trial")
    if tolerance is None:
        widths = {graph.nodes[s].member.output.dtype for s in graph.topo_order}
        tolerance = 1e-10 if widths == {DType.F64} else 1e-5
    worst: dict[str, float] = {}
    for trial in range(trials):
        inputs = make_inputs(graph, seed + trial)
        reference = execute_single(graph, inputs, seed)
        sharded = execute_sharded(pgraph, inputs, seed)
        for name, err in compare_outputs(sharded, reference).items():
            worst[name] = max(worst.get(name, 0.0), err)
    passed = all(err <= tolerance for err in worst.values())
    return EquivalenceReport(trials, tolerance, worst, passed)
