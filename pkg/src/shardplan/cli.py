"""Command-line entry point wiring every pass into reproducible pipelines.

Errors surface as machine-readable JSON on stderr with exit code 2 for
configuration and I/O problems and 1 for pass failures.  Reports omit wall
times unless --timing is given so identical runs stay byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

from . import generators
from .costmodel import ClusterSpec, plan_cost
from .errors import ShardplanError, BadConfig
from .interp import check_equivalence
from .ir import DType, load_graph, save_graph, trim_and_group
from .patterns import PATTERN_REGISTRY
from .pruning import prune_graph
from .rewrite import rewrite_graph, save_parallel_graph
from .search import (
    broadcast_routing,
    derive_plan,
    routed_plan_for_assignments,
)

CLUSTER_ENV = "SHARDPLAN_CLUSTER"

DEFAULT_MU = 1 << 20
DEFAULT_CHUNK = 4 << 20


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = 2):
        super().__init__(message)
        self.kind = kind
        self.code = code


def _fail(kind: str, message: str, code: int = 2) -> "CliError":
    return CliError(kind, message, code)


def _read_file(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise _fail("io", f"cannot read {path}: {exc.strerror or exc}")


def _write_file(path: str, data: bytes) -> None:
    try:
        target = Path(path)
        if target.parent != Path("."):
            target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(data)
    except OSError as exc:
        raise _fail("io", f"cannot write {path}: {exc.strerror or exc}")


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    if out:
        _write_file(out, text.encode("utf-8"))
    else:
        sys.stdout.write(text)


def _load_cluster(args) -> ClusterSpec:
    """Cluster config resolution: --cluster file, else env var, else --mesh."""
    path = getattr(args, "cluster", None) or os.environ.get(CLUSTER_ENV)
    if path:
        try:
            spec = ClusterSpec.from_json(_read_file(path))
        except (ValueError, KeyError, TypeError) as exc:
            raise _fail("config", f"bad cluster config {path}: {exc}")
        if getattr(args, "mesh", None):
            mesh = ClusterSpec.from_mesh(args.mesh)
            if (mesh.m, mesh.n) != (spec.m, spec.n):
                raise _fail(
                    "config",
                    f"--mesh {args.mesh} contradicts cluster config mesh "
                    f"{spec.m}x{spec.n}",
                )
        return spec
    mesh = getattr(args, "mesh", None)
    if not mesh:
        raise _fail("config", "no mesh given: pass --mesh MxN or a cluster config")
    return ClusterSpec.from_mesh(mesh)


def _load_grouped(path: str):
    return trim_and_group(load_graph(_read_file(path)))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    dtype = DType.from_label(args.dtype)
    if args.model == "transformer":
        graph = generators.gen_transformer_stack(
            args.layers, d_model=args.d_model, heads=args.heads, batch=args.batch,
            seq=args.seq, vocab=args.vocab, ffn_mult=args.ffn_mult, dtype=dtype,
            aux_per_weight=args.aux_per_weight,
        )
    elif args.model == "encdec":
        graph = generators.gen_encoder_decoder(
            args.layers, args.dec_layers or args.layers, d_model=args.d_model,
            heads=args.heads, batch=args.batch, seq=args.seq, vocab=args.vocab,
            dtype=dtype,
        )
    else:  # classifier
        graph = generators.gen_wide_classifier(
            args.num_classes, args.feature_dim, blocks=args.blocks,
            batch=args.batch, dtype=dtype,
        )
    data = save_graph(graph)
    if args.out:
        _write_file(args.out, data)
    else:
        sys.stdout.buffer.write(data)
    return 0


def cmd_prune(args) -> int:
    raw = load_graph(_read_file(args.graph))
    grouped = trim_and_group(raw)
    subgraphs = prune_graph(grouped, args.min_dup)
    unique = [s for s in subgraphs]
    doc = {
        "min_duplicates": args.min_dup,
        "raw_nodes": len(raw.nodes),
        "grouped_nodes": len(grouped.nodes),
        "unique_subgraphs": len(unique),
        "pruning_ratio": {
            "raw_to_grouped": len(raw.nodes) / len(grouped.nodes),
            "grouped_to_unique_templates": len(grouped.nodes)
            / sum(len(s.template) for s in unique),
        },
        "subgraphs": [
            {
                "template_prefix": s.template_prefix,
                "multiplicity": s.multiplicity,
                "nodes": len(s.template),
                "template_ops": [grouped.nodes[t].op.value for t in s.template],
            }
            for s in subgraphs
        ],
    }
    _emit(doc, args.out)
    return 0


def cmd_patterns(args) -> int:
    doc = {}
    for op, patterns in sorted(PATTERN_REGISTRY.items(), key=lambda kv: kv[0].value):
        doc[op.value] = [
            {
                "name": p.name,
                "input": p.input_spec.label,
                "weight": p.weight_spec.label if p.weight_spec else None,
                "output": p.output_spec.label,
                "collective": p.collective.label,
            }
            for p in patterns
        ]
    _emit(doc, args.out)
    return 0


def _plan_report(args, graph, cluster):
    start = time.perf_counter()
    report = derive_plan(
        graph, cluster, min_duplicates=args.min_dup, mu=args.mu,
        chunk_size=args.chunk_size, jobs=args.jobs, want_table=args.table,
    )
    elapsed = time.perf_counter() - start
    return report, elapsed


def cmd_plan(args) -> int:
    graph = _load_grouped(args.graph)
    cluster = _load_cluster(args)
    report, elapsed = _plan_report(args, graph, cluster)
    doc = report.to_json(with_table=args.table)
    if args.timing:
        doc["wall_time_s"] = elapsed
    print(f"searched {report.candidates} candidates in {elapsed:.3f}s", file=sys.stderr)
    _emit(doc, args.out)
    return 0


def _routed_from_plan_file(args, graph, cluster):
    doc = json.loads(_read_file(args.plan))
    assignments = doc.get("assignments")
    if not isinstance(assignments, dict):
        raise _fail("config", f"plan file {args.plan} has no assignments map")
    return routed_plan_for_assignments(
        graph, cluster, assignments, min_duplicates=doc.get("min_duplicates", args.min_dup),
        mu=args.mu, chunk_size=args.chunk_size,
    )


def cmd_cost(args) -> int:
    graph = _load_grouped(args.graph)
    cluster = _load_cluster(args)
    report = _routed_from_plan_file(args, graph, cluster)
    doc = {
        "cluster": cluster.to_json(),
        "total_cost_s": report.total_cost,
        "subgraphs": [
            {
                "template_prefix": res.subgraph.template_prefix,
                "multiplicity": res.subgraph.multiplicity,
                "cost": res.best.cost.to_json(),
            }
            for res in report.results
        ],
    }
    _emit(doc, args.out)
    return 0


def cmd_rewrite(args) -> int:
    graph = _load_grouped(args.graph)
    cluster = _load_cluster(args)
    report = _routed_from_plan_file(args, graph, cluster)
    routing = broadcast_routing(report)
    pgraph = rewrite_graph(graph, routing, cluster)
    data = save_parallel_graph(pgraph)
    if args.out:
        _write_file(args.out, data)
    else:
        sys.stdout.buffer.write(data)
    return 0


def cmd_verify(args) -> int:
    graph = _load_grouped(args.graph)
    cluster = _load_cluster(args)
    report = _routed_from_plan_file(args, graph, cluster)
    pgraph = rewrite_graph(graph, broadcast_routing(report), cluster)
    eq = check_equivalence(graph, pgraph, trials=args.trials, seed=args.seed)
    _emit(eq.to_json(), args.out)
    return 0 if eq.passed else 1


def cmd_pipeline(args) -> int:
    graph = _load_grouped(args.graph)
    cluster = _load_cluster(args)
    report, elapsed = _plan_report(args, graph, cluster)
    out_dir = Path(args.out_dir)
    plan_doc = report.to_json(with_table=args.table)
    if args.timing:
        plan_doc["wall_time_s"] = elapsed
    _emit(plan_doc, str(out_dir / "plan.json"))
    routing = broadcast_routing(report)
    pgraph = rewrite_graph(graph, routing, cluster)
    _write_file(str(out_dir / "parallel.json"), save_parallel_graph(pgraph))
    eq = check_equivalence(graph, pgraph, trials=args.trials, seed=args.seed)
    _emit(eq.to_json(), str(out_dir / "verify.json"))
    print(
        f"pipeline: {report.candidates} candidates, total cost "
        f"{report.total_cost:.6e}s, verification "
        f"{'passed' if eq.passed else 'FAILED'}",
        file=sys.stderr,
    )
    return 0 if eq.passed else 1


def bench_scaling(layer_counts, cluster, min_dup=2, jobs=1, **gen_kwargs):
    """Search-time scaling rows for growing transformer stacks."""
    rows = []
    for layers in layer_counts:
        if layers < 2:
            raise BadConfig("bench needs at least 2 layers per point")
        graph = trim_and_group(generators.gen_transformer_stack(layers, **gen_kwargs))
        start = time.perf_counter()
        report = derive_plan(graph, cluster, min_duplicates=min_dup, jobs=jobs)
        elapsed = time.perf_counter() - start
        routing_steps = sum(
            len(res.best.routings) * res.subgraph.multiplicity
            for res in report.results
        )
        rows.append(
            {
                "layers": layers,
                "nodes": len(graph.nodes),
                "unique_subgraphs": len(report.results),
                "candidates": report.candidates,
                "routing_steps": routing_steps,
                "wall_time_s": elapsed,
            }
        )
    return rows


def cmd_bench(args) -> int:
    cluster = _load_cluster(args)
    try:
        layer_counts = [int(x) for x in args.layers.split(",") if x]
    except ValueError:
        raise _fail("config", f"bad --layers list: {args.layers!r}")
    rows = bench_scaling(layer_counts, cluster, min_dup=args.min_dup, jobs=args.jobs)
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf,
        fieldnames=[
            "layers", "nodes", "unique_subgraphs", "candidates",
            "routing_steps", "wall_time_s",
        ],
    )
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    if args.out:
        _write_file(args.out, buf.getvalue().encode("utf-8"))
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# ---------------------------------------------------------------------------
# Argument wiring


def _add_cluster_flags(p):
    p.add_argument("--mesh", help="device mesh as MxN (e.g. 2x4)")
    p.add_argument(
        "--cluster",
        help=f"cluster config JSON path (default: ${CLUSTER_ENV} if set)",
    )


def _add_search_flags(p):
    p.add_argument("--min-dup", type=int, default=2,
                   help="minimum duplicates for subgraph sharing (default 2)")
    p.add_argument("--mu", type=int, default=DEFAULT_MU,
                   help="gradient fusion threshold in bytes (default 1 MiB)")
    p.add_argument("--chunk-size", type=int, default=DEFAULT_CHUNK,
                   help="gradient fusion chunk size in bytes (default 4 MiB)")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes for plan search (default 1)")
    p.add_argument("--table", action="store_true",
                   help="include the per-candidate cost table in the report")
    p.add_argument("--timing", action="store_true",
                   help="embed wall times in report files (off keeps runs byte-identical)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shardplan",
        description="Derive, cost, and verify tensor-sharding plans for "
        "computation graphs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic model graph")
    p.add_argument("model", choices=["transformer", "encdec", "classifier"])
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dec-layers", type=int, default=0)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seq", type=int, default=16)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--ffn-mult", type=int, default=4)
    p.add_argument("--aux-per-weight", type=int, default=2)
    p.add_argument("--num-classes", type=int, default=64)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--dtype", choices=["f32", "f64"], default="f32")
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("prune", help="report shared-subgraph structure")
    p.add_argument("--graph", required=True)
    p.add_argument("--min-dup", type=int, default=2)
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_prune)

    p = sub.add_parser("patterns", help="dump the sharding-pattern registry")
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_patterns)

    p = sub.add_parser("plan", help="search for the cost-minimal sharding plan")
    p.add_argument("--graph", required=True)
    _add_cluster_flags(p)
    _add_search_flags(p)
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("cost", help="cost a plan report against a cluster")
    p.add_argument("--graph", required=True)
    p.add_argument("--plan", required=True)
    _add_cluster_flags(p)
    _add_search_flags(p)
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_cost)

    p = sub.add_parser("rewrite", help="materialize a plan as a distributed graph")
    p.add_argument("--graph", required=True)
    p.add_argument("--plan", required=True)
    _add_cluster_flags(p)
    _add_search_flags(p)
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_rewrite)

    p = sub.add_parser("verify", help="check a rewritten plan against reference execution")
    p.add_argument("--graph", required=True)
    p.add_argument("--plan", required=True)
    _add_cluster_flags(p)
    _add_search_flags(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("pipeline", help="plan, rewrite, and verify in one run")
    p.add_argument("--graph", required=True)
    _add_cluster_flags(p)
    _add_search_flags(p)
    p.add_argument("--trials", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("bench", help="search-time scaling benchmark (CSV)")
    p.add_argument("--layers", default="2,4,8,16,32",
                   help="comma-separated transformer layer counts")
    _add_cluster_flags(p)
    p.add_argument("--min-dup", type=int, default=2)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", "-o")
    p.set_defaults(fn=cmd_bench)

    return parser


_ERROR_KINDS = {
    "ParseError": "parse",
    "CycleError": "parse",
    "DanglingRef": "parse",
    "EmptyGraph": "parse",
    "BadConfig": "config",
    "SpecMismatch": "verify",
    "NoRouteError": "route",
    "IndivisibleShard": "route",
    "ShapeMismatch": "verify",
    "ProtocolError": "verify",
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        json.dump({"error": {"kind": exc.kind, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return exc.code
    except ShardplanError as exc:
        kind = _ERROR_KINDS.get(type(exc).__name__, "internal")
        code = 2 if kind in ("config", "parse") else 1
        json.dump({"error": {"kind": kind, "message": str(exc)}}, sys.stderr)
        sys.stderr.write("\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
