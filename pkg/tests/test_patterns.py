import numpy as np
import pytest

from shardplan import (
    Collective,
    CollectiveKind,
    DType,
    NoRouteError,
    OpKind,
    PATTERN_REGISTRY,
    REPLICA,
    ShardKind,
    ShardSpec,
    SpecMismatch,
    TensorSpec,
    conversion_collective,
    patterns_for,
)
from shardplan.interp import all_gather, all_reduce_sum, all_to_all, eval_op, reduce_scatter
from shardplan.ir import RawNode
from shardplan.patterns import LAST, infer_output, split


class TestShardSpec:
    def test_normalize_last(self):
        assert split(LAST).normalized(3) == split(2)
        assert split(1).normalized(2) == split(1)

    def test_axis_out_of_range(self):
        with pytest.raises(SpecMismatch):
            split(3).normalized(2)

    def test_labels_round_trip(self):
        for spec in (REPLICA, split(0), split(1)):
            assert ShardSpec.from_label(spec.label) == spec

    def test_replica_carries_no_axis(self):
        with pytest.raises(SpecMismatch):
            ShardSpec(ShardKind.REPLICA, 1)


class TestRegistry:
    def test_matmul_contains_required_patterns(self):
        pats = {p.name: p for p in patterns_for(OpKind.MATMUL)}
        col = pats["matmul.col"]
        assert (col.input_spec, col.weight_spec) == (REPLICA, split(1))
        row = pats["matmul.row.allreduce"]
        assert row.weight_spec == split(0)
        assert row.collective.kind is CollectiveKind.ALL_REDUCE_SUM
        dp = pats["matmul.data_parallel"]
        assert (dp.input_spec, dp.weight_spec, dp.output_spec) == (split(0), REPLICA, split(0))
        assert "matmul.replicate" in pats

    def test_layernorm_replica_and_rowwise(self):
        names = {p.name for p in patterns_for(OpKind.LAYERNORM)}
        assert names == {"layernorm.replicate", "layernorm.split0"}

    def test_reshape_replica_only(self):
        pats = patterns_for(OpKind.RESHAPE)
        assert len(pats) == 1 and pats[0].input_spec == REPLICA

    def test_fallback_totality(self):
        for op, pats in PATTERN_REGISTRY.items():
            assert pats, op
            assert any(
                p.input_spec == REPLICA
                and p.output_spec == REPLICA
                and p.collective.kind is CollectiveKind.IDENTITY
                for p in pats
            ), op

    def test_non_compute_kind_rejected(self):
        with pytest.raises(SpecMismatch):
            patterns_for(OpKind.AUXILIARY)


class TestInferOutput:
    def test_row_pattern_resolves_to_replica(self):
        row = next(p for p in patterns_for(OpKind.MATMUL) if p.name == "matmul.row.allreduce")
        out, coll = infer_output(row, [split(LAST)], rank=3)
        assert out == REPLICA
        assert coll.kind is CollectiveKind.ALL_REDUCE_SUM

    def test_replicate_identity(self):
        rep = next(p for p in patterns_for(OpKind.MATMUL) if p.name == "matmul.replicate")
        out, coll = infer_output(rep, [REPLICA], rank=2)
        assert (out, coll.kind) == (REPLICA, CollectiveKind.IDENTITY)

    def test_data_parallel_keeps_batch_split(self):
        dp = next(p for p in patterns_for(OpKind.MATMUL) if p.name == "matmul.data_parallel")
        out, coll = infer_output(dp, [split(0)], rank=3)
        assert (out, coll.kind) == (split(0), CollectiveKind.IDENTITY)

    def test_incompatible_input_state(self):
        rep = next(p for p in patterns_for(OpKind.MATMUL) if p.name == "matmul.replicate")
        with pytest.raises(SpecMismatch):
            infer_output(rep, [split(0)], rank=2)


class TestConversionCollective:
    t = TensorSpec((8, 6), DType.F32)

    def test_table(self):
        assert conversion_collective(REPLICA, REPLICA, self.t).kind is CollectiveKind.IDENTITY
        ag = conversion_collective(split(1), REPLICA, self.t)
        assert (ag.kind, ag.axis) == (CollectiveKind.ALL_GATHER, 1)
        assert (
            conversion_collective(ShardSpec(ShardKind.PARTIAL), REPLICA, self.t).kind
            is CollectiveKind.ALL_REDUCE_SUM
        )
        a2a = conversion_collective(split(0), split(1), self.t)
        assert (a2a.kind, a2a.axis) == (CollectiveKind.ALL_TO_ALL, 1)
        rs = conversion_collective(ShardSpec(ShardKind.PARTIAL), split(0), self.t)
        assert (rs.kind, rs.axis) == (CollectiveKind.REDUCE_SCATTER, 0)

    def test_replica_to_split_has_no_route(self):
        with pytest.raises(NoRouteError):
            conversion_collective(REPLICA, split(0), self.t)

    def test_last_axis_normalized(self):
        coll = conversion_collective(split(LAST), REPLICA, self.t)
        assert coll.axis == 1


# ---------------------------------------------------------------------------
# Soundness certificate: sharded op + collective == unsharded op


def _apply(coll, shards, full_shape):
    if coll.kind is CollectiveKind.IDENTITY:
        return shards
    if coll.kind is CollectiveKind.ALL_REDUCE_SUM:
        return all_reduce_sum(shards)
    if coll.kind is CollectiveKind.ALL_GATHER:
        return all_gather(shards, coll.axis)
    raise AssertionError(coll)


def _slice(full, spec, devices, rank):
    if spec is None or spec.kind is not ShardKind.SPLIT:
        return [full] * devices
    axis = spec.normalized(full.ndim).axis
    return np.split(full, devices, axis=axis)


def _random_node(rng, op, devices):
    """Random shapes with every axis divisible by the device count."""
    d = devices
    b, s, k, n = (int(rng.integers(1, 4)) * d for _ in range(4))
    mk = lambda shape, trainable=False: TensorSpec(shape, DType.F64, trainable)
    if op is OpKind.MATMUL:
        return RawNode("t/matmul", op, ("x",), mk((b, s, n)), mk((k, n), True)), (b, s, k)
    if op is OpKind.EMBEDDING:
        return RawNode("t/emb", op, ("x",), mk((b, s, n)), mk((k, n), True)), (b, s)
    if op is OpKind.ELEMENTWISE:
        return RawNode("t/mul", op, ("x", "y"), mk((b, s, n)), None,
                       (("fn", "mul"),)), (b, s, n)
    if op is OpKind.LAYERNORM:
        return RawNode("t/ln", op, ("x",), mk((b, s, n))), (b, s, n)
    if op is OpKind.SOFTMAX:
        return RawNode("t/sm", op, ("x",), mk((b, s, n))), (b, s, n)
    if op is OpKind.RESHAPE:
        return RawNode("t/rs", op, ("x",), mk((b * s, n))), (b, s, n)
    raise AssertionError(op)


def _certify(pattern, node, in_shape, rng, devices):
    """Check SR(Y) = Comm(Op(SR(A), SR(B))) on one random instance."""
    inputs = [rng.uniform(-1, 1, in_shape) for _ in node.inputs]
    weight = None
    if node.weight is not None:
        weight = rng.uniform(-1, 1, node.weight.shape)
    reference = eval_op(node, inputs, weight)

    in_shards = [_slice(x, pattern.input_spec, devices, x.ndim) for x in inputs]
    w_shards = _slice(weight, pattern.weight_spec, devices, 2) if weight is not None else None
    locals_ = [
        eval_op(node, [sh[d] for sh in in_shards], w_shards[d] if weight is not None else None)
        for d in range(devices)
    ]
    after = _apply(pattern.collective, locals_, reference.shape)
    final = apply_state = pattern.output_spec
    if pattern.collective.kind is not CollectiveKind.IDENTITY:
        # collective resolved the value to replica
        got = after[0]
        assert all(np.array_equal(a, got) for a in after)
        np.testing.assert_allclose(got, reference, rtol=1e-10, atol=1e-12)
        return
    if apply_state.kind is ShardKind.SPLIT:
        axis = apply_state.normalized(reference.ndim).axis
        got = np.concatenate(after, axis=axis)
    else:
        got = after[0]
        assert all(np.array_equal(a, got) for a in after)
    np.testing.assert_allclose(got, reference, rtol=1e-10, atol=1e-12)


CERT_OPS = [
    OpKind.MATMUL,
    OpKind.EMBEDDING,
    OpKind.ELEMENTWISE,
    OpKind.LAYERNORM,
    OpKind.SOFTMAX,
    OpKind.RESHAPE,
]


@pytest.mark.parametrize("devices", [2, 4])
def test_certificate_every_pattern_100_random_shapes(devices):
    rng = np.random.default_rng(1234 + devices)
    cases = 0
    while cases < 100:
        for op in CERT_OPS:
            node, in_shape = _random_node(rng, op, devices)
            for pattern in patterns_for(op):
                if pattern.name == "elementwise.split_last":
                    continue  # weighted variant certified separately below
                _certify(pattern, node, in_shape, rng, devices)
            cases += 1


@pytest.mark.parametrize("devices", [2, 4])
def test_certificate_elementwise_bias_split_last(devices):
    rng = np.random.default_rng(77 + devices)
    pattern = next(
        p for p in patterns_for(OpKind.ELEMENTWISE) if p.name == "elementwise.split_last"
    )
    for _ in range(100):
        n = int(rng.integers(1, 4)) * devices
        b = int(rng.integers(1, 5))
        node = RawNode(
            "t/bias", OpKind.ELEMENTWISE, ("x",), TensorSpec((b, n), DType.F64),
            TensorSpec((n,), DType.F64, True), (("fn", "add"),),
        )
        x = rng.uniform(-1, 1, (b, n))
        w = rng.uniform(-1, 1, (n,))
        reference = eval_op(node, [x], w)
        xs = np.split(x, devices, axis=1)
        ws = np.split(w, devices, axis=0)
        locals_ = [eval_op(node, [xs[d]], ws[d]) for d in range(devices)]
        got = np.concatenate(locals_, axis=1)
        np.testing.assert_allclose(got, reference, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("devices", [2, 4])
def test_conversion_certificates(devices):
    rng = np.random.default_rng(9 + devices)
    for _ in range(100):
        shape = tuple(int(rng.integers(1, 4)) * devices for _ in range(2))
        full = rng.uniform(-1, 1, shape)
        # Split(a) -> Replica via AllGather
        for axis in (0, 1):
            shards = [c.copy() for c in np.split(full, devices, axis=axis)]
            for out in all_gather(shards, axis):
                np.testing.assert_array_equal(out, full)
        # Split(0) -> Split(1) via AllToAll
        shards = [c.copy() for c in np.split(full, devices, axis=0)]
        cols = all_to_all(shards, 0, 1)
        np.testing.assert_array_equal(np.concatenate(cols, axis=1), full)
        # Partial -> Replica via AllReduceSum
        parts = [rng.uniform(-1, 1, shape) for _ in range(devices)]
        total = np.sum(parts, axis=0)
        for out in all_reduce_sum(parts):
            np.testing.assert_allclose(out, total, rtol=1e-12)
        # Partial -> Split(0) via ReduceScatter
        scattered = reduce_scatter(parts, 0)
        np.testing.assert_allclose(np.concatenate(scattered, axis=0), total, rtol=1e-12)
