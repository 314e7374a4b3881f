"""End-to-end acceptance gate.

Each test exercises one release criterion and emits a single PASS line on the
real stdout (bypassing capture) so the gate is auditable from the test log.
"""

import itertools
import sys
import time

import numpy as np

from shardplan import (
    ClusterSpec,
    DType,
    broadcast_routing,
    check_equivalence,
    derive_plan,
    enumerate_all_plans,
    gen_transformer_stack,
    gen_wide_classifier,
    pattern_routing,
    prune_graph,
    rewrite_graph,
    routed_plan_for_assignments,
    trim_and_group,
)
from shardplan.cli import bench_scaling, main as cli_main
from shardplan.interp import all_gather, all_reduce_sum, all_to_all, reduce_scatter
from shardplan.rewrite import pack_gradients
from shardplan.search import RoutingFailure, count_candidates, weight_nodes


def report(capfd, line: str) -> None:
    # bypass capture so each criterion leaves one audit line in the test log
    with capfd.disabled():
        sys.stdout.write(line + "\n")
        sys.stdout.flush()


def transformer_graph(layers=2, d_model=8, heads=2, dtype=DType.F32, **kw):
    return trim_and_group(
        gen_transformer_stack(layers, d_model=d_model, heads=heads, dtype=dtype, **kw)
    )


def layer_subgraph(graph):
    subs = prune_graph(graph, 2)
    for sub in subs:
        if any("ffn" in t for t in sub.template):
            return sub
    raise AssertionError("no repeated layer subgraph found")


def test_criterion_1_plan_count_anchor(capfd):
    start = time.perf_counter()
    graph = transformer_graph()
    sub = layer_subgraph(graph)
    assert len(weight_nodes(graph, sub)) == 6
    candidates = list(enumerate_all_plans(graph, sub))
    assert len(candidates) == 729
    assert len({c.index for c in candidates}) == 729
    # general law: V shardable weights -> 3^V candidates, against brute force
    from tests.conftest import chain_graph

    for v in range(1, 7):
        g = chain_graph(v)
        weighted = [s for s in prune_graph(g, 1) if weight_nodes(g, s)]
        assert len(weighted) == 1
        sub_v = weighted[0]
        assert len(weight_nodes(g, sub_v)) == v
        oracle = len(list(itertools.product(range(3), repeat=v)))
        assert count_candidates(g, sub_v) == oracle == 3 ** v
        assert len(list(enumerate_all_plans(g, sub_v))) == oracle
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(capfd, f"[criterion 1] PASS plan-count anchor: 729 candidates, 3^V law "
           f"V=1..6, {elapsed:.2f}s")


def test_criterion_2_equivalence_suite(capfd):
    start = time.perf_counter()
    cases = [
        ("transformer", transformer_graph(dtype=DType.F64)),
        ("classifier", trim_and_group(gen_wide_classifier(64, 16, dtype=DType.F64))),
    ]
    meshes = [ClusterSpec(m=1, n=2), ClusterSpec(m=2, n=2)]
    checked = invalid = 0
    worst = 0.0
    for label, graph in cases:
        all_weights = [n for n in graph.nodes if graph.nodes[n].weight is not None]
        for mesh in meshes:
            for sub in prune_graph(graph, 2):
                for cand in enumerate_all_plans(graph, sub):
                    if isinstance(pattern_routing(graph, cand, mesh), RoutingFailure):
                        invalid += 1
                        continue
                    assigns = {n: "replica" for n in all_weights}
                    assigns.update({s: spec.label for s, spec in cand.assignments})
                    rep = routed_plan_for_assignments(graph, mesh, assigns)
                    pgraph = rewrite_graph(graph, broadcast_routing(rep), mesh)
                    eq = check_equivalence(graph, pgraph, trials=10, tolerance=1e-10)
                    assert eq.passed, f"{label} {mesh.m}x{mesh.n} cand {cand.index}"
                    worst = max(worst, max(eq.max_errors.values()))
                    checked += 1
    elapsed = time.perf_counter() - start
    assert checked > 100 and elapsed < 300.0
    report(capfd, f"[criterion 2] PASS equivalence: {checked} valid routed plans "
           f"({invalid} invalid skipped), worst rel err {worst:.2e} <= 1e-10, "
           f"{elapsed:.1f}s")


def test_criterion_3_search_space_folding(capfd):
    start = time.perf_counter()
    cluster = ClusterSpec(m=1, n=2)
    rows = bench_scaling([2, 4, 8, 16, 32, 48], cluster, d_model=8, heads=2)
    cands = {r["candidates"] for r in rows}
    uniques = {r["unique_subgraphs"] for r in rows}
    assert len(cands) == 1 and len(uniques) == 1
    # wall time at most linear in L (with slack for timer noise)
    t2, t48 = rows[0]["wall_time_s"], rows[-1]["wall_time_s"]
    assert t48 <= max(t2, 0.01) * (48 / 2) * 5
    elapsed = time.perf_counter() - start
    assert elapsed < 120.0
    report(capfd, f"[criterion 3] PASS folding: candidates {cands.pop()} and "
           f"{uniques.pop()} subgraphs constant for L=2..48, "
           f"t(2)={t2:.3f}s t(48)={t48:.3f}s, {elapsed:.1f}s")


def test_criterion_4_pruning_robustness(capfd):
    graph24 = transformer_graph(layers=24, d_model=8)
    counts = {d: len(prune_graph(graph24, d)) for d in range(2, 9)}
    assert len(set(counts.values())) == 1
    wide = trim_and_group(gen_wide_classifier(64, 16, blocks=150))
    start = time.perf_counter()
    prune_graph(wide, 2)
    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(capfd, f"[criterion 4] PASS pruning: {counts[2]} subgraphs constant for "
           f"minDuplicates=2..8; 150-block prune {elapsed * 1000:.0f}ms")


def test_criterion_5_bandwidth_regime_flip(capfd):
    graph = transformer_graph(layers=4, d_model=512, heads=8, batch=96, seq=16)
    config_a = ClusterSpec(m=2, n=8, intra_bw=2e11, inter_bw=2e11)
    config_b = ClusterSpec(m=2, n=8, intra_bw=2e11, inter_bw=2e11 / 32)

    def split_scopes(rep):
        return sorted(s for s, label in rep.assignments.items() if label != "replica")

    rep_a = derive_plan(graph, config_a)
    rep_b = derive_plan(graph, config_b)
    splits_a, splits_b = split_scopes(rep_a), split_scopes(rep_b)
    assert any("attention" in s for s in splits_a)
    assert any("ffn" in s for s in splits_a)
    assert splits_a != splits_b
    assert len(splits_b) < len(splits_a)
    assert all("attention" not in s for s in splits_b)  # FFN-only or data-parallel
    winner_b = {s: rep_b.assignments[s] for s in splits_b}
    report(capfd, f"[criterion 5] PASS bandwidth flip: high-bw splits {len(splits_a)} "
           f"tensors (MHA+FFN), low-bw splits {len(splits_b)}; low-bw winner "
           f"recorded: {winner_b or 'data-parallel/replica'}")


def test_criterion_6_gradient_packing(capfd):
    from shardplan import TensorSpec

    def grad(nbytes):
        assert nbytes % 4 == 0
        return TensorSpec((nbytes // 4,), DType.F32, trainable=True)

    buckets, unfused = pack_gradients([grad(64)] * 1000, mu=1024, chunk_size=4096)
    assert not unfused
    sizes = [b.total_bytes for b in buckets]
    assert sizes == [4096] * 15 + [2560]
    counts = [len(b.members) for b in buckets]
    assert counts == [64] * 15 + [40]
    assert sum(sizes) == 1000 * 64

    rng = np.random.default_rng(0)
    for _ in range(1000):
        grads = [grad(4 * int(rng.integers(1, 750)))
                 for _ in range(int(rng.integers(0, 40)))]
        mu = int(rng.integers(1, 2048))
        chunk = mu * int(rng.integers(1, 8))
        buckets, unfused = pack_gradients(grads, mu=mu, chunk_size=chunk)
        packed = sum(b.total_bytes for b in buckets) + sum(u.byte_size for u in unfused)
        assert packed == sum(g.byte_size for g in grads)
        assert all(b.total_bytes <= chunk for b in buckets)
        assert all(u.byte_size >= mu for u in unfused)
    report(capfd, "[criterion 6] PASS gradient packing: 15 full + 1 partial bucket "
           "anchor; byte conservation over 1000 randomized lists")


def test_criterion_7_collective_oracle(capfd):
    rng = np.random.default_rng(7)
    for _ in range(100):
        d = int(rng.choice([2, 4, 8]))
        shape = (d * int(rng.integers(1, 4)), d * int(rng.integers(1, 4)))
        full = rng.uniform(-1, 1, shape)
        parts = [rng.uniform(-1, 1, shape) for _ in range(d)]
        total = np.sum(np.stack(parts), axis=0)
        for out in all_reduce_sum(parts):
            np.testing.assert_array_equal(out, total)
        shards = [c.copy() for c in np.split(full, d, axis=0)]
        for out in all_gather(shards, 0):
            np.testing.assert_array_equal(out, full)
        scattered = reduce_scatter(parts, 0)
        np.testing.assert_array_equal(np.concatenate(scattered, axis=0), total)
        back = all_to_all(all_to_all(shards, 0, 1), 1, 0)
        for a, b in zip(back, shards):
            np.testing.assert_array_equal(a, b)
    report(capfd, "[criterion 7] PASS collective oracle: AllReduce/AllGather/"
           "ReduceScatter/AllToAll identities exact over 100 random cases")


def test_criterion_8_determinism(tmp_path, capfd):
    graph_path = tmp_path / "graph.json"
    assert cli_main(["gen", "transformer", "--layers", "2", "--d-model", "8",
                     "--heads", "2", "--dtype", "f64", "-o", str(graph_path)]) == 0
    outputs = {}
    for jobs in ("1", "8"):
        out_dir = tmp_path / f"jobs{jobs}"
        assert cli_main(["pipeline", "--graph", str(graph_path), "--mesh", "2x2",
                         "--trials", "3", "--jobs", jobs,
                         "--out-dir", str(out_dir)]) == 0
        outputs[jobs] = {
            name: (out_dir / name).read_bytes()
            for name in ("plan.json", "parallel.json", "verify.json")
        }
    assert outputs["1"] == outputs["8"]
    report(capfd, "[criterion 8] PASS determinism: --jobs 1 and --jobs 8 pipeline "
           "outputs byte-identical (plan, parallel, verify)")
