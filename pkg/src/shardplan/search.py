"""Candidate plan enumeration, pattern routing, and best-plan derivation.

Per unique subgraph the search walks the full {replica, row-split, col-split}
product over weight tensors, validates each candidate by chaining sharding
patterns from the subgraph roots to its leaves, costs the valid ones, and
keeps the argmin.  The winning per-subgraph plan is broadcast to every
instance.  Candidates are index-addressable, so a worker pool can split the
range and still reduce to the exact sequential argmin.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional

from .costmodel import ClusterSpec, CostReport, collective_call_cost, plan_cost
from .errors import ShardplanError
from .ir import ModelGraph
from .patterns import (
    Collective,
    CollectiveKind,
    IDENTITY,
    NoRouteError,
    REPLICA,
    ShardKind,
    ShardSpec,
    apply_collective,
    patterns_for,
)
from .pruning import Subgraph, prune_graph

#: Shard decisions offered per weight tensor, in enumeration order.
WEIGHT_OPTIONS_2D = (REPLICA, ShardSpec(ShardKind.SPLIT, 0), ShardSpec(ShardKind.SPLIT, 1))
WEIGHT_OPTIONS_1D = (REPLICA, ShardSpec(ShardKind.SPLIT, 0))


@dataclass(frozen=True)
class CandidatePlan:
    subgraph: Subgraph
    assignments: tuple[tuple[str, ShardSpec], ...]  # (template scope, weight spec)
    index: int

    @property
    def assignment_map(self) -> dict[str, ShardSpec]:
        return dict(self.assignments)

    @property
    def num_split(self) -> int:
        return sum(1 for _, s in self.assignments if s.kind is ShardKind.SPLIT)


@dataclass(frozen=True)
class NodeRouting:
    """Routing outcome for one template node."""

    scope: str
    pattern: str
    input_conversions: tuple[tuple[str, Collective, int], ...]  # internal producer, coll, payload bytes
    output_collective: Collective
    output_bytes: int
    state: ShardSpec  # output shard state after the pattern collective
    exit_conversion: Optional[Collective] = None  # restores replica at subgraph exit


@dataclass(frozen=True)
class RoutedPlan:
    plan: CandidatePlan
    routings: tuple[NodeRouting, ...]  # template topological order
    exit_conversions: tuple[tuple[str, Collective, int], ...]
    cost: CostReport

    @property
    def routing_map(self) -> dict[str, NodeRouting]:
        return {r.scope: r for r in self.routings}


@dataclass(frozen=True)
class RoutingFailure:
    node: str
    reason: str


def weight_nodes(graph: ModelGraph, subgraph: Subgraph) -> tuple[str, ...]:
    return tuple(
        s for s in sorted(subgraph.template) if graph.nodes[s].weight is not None
    )


def _options(graph: ModelGraph, scope: str):
    weight = graph.nodes[scope].weight
    return WEIGHT_OPTIONS_2D if weight.rank >= 2 else WEIGHT_OPTIONS_1D


def count_candidates(graph: ModelGraph, subgraph: Subgraph) -> int:
    total = 1
    for scope in weight_nodes(graph, subgraph):
        total *= len(_options(graph, scope))
    return total


def candidate_by_index(graph: ModelGraph, subgraph: Subgraph, index: int) -> CandidatePlan:
    """Decode a mixed-radix candidate index (last weight varies fastest)."""
    scopes = weight_nodes(graph, subgraph)
    radices = [len(_options(graph, s)) for s in scopes]
    digits = []
    rem = index
    for radix in reversed(radices):
        digits.append(rem % radix)
        rem //= radix
    digits.reverse()
    assignments = tuple(
        (scope, _options(graph, scope)[d]) for scope, d in zip(scopes, digits)
    )
    return CandidatePlan(subgraph, assignments, index)


def enumerate_all_plans(graph: ModelGraph, subgraph: Subgraph) -> Iterator[CandidatePlan]:
    """Lazily yield the full Cartesian product of weight shard decisions."""
    scopes = weight_nodes(graph, subgraph)
    for index, chosen in enumerate(
        itertools.product(*(_options(graph, s) for s in scopes))
    ):
        yield CandidatePlan(subgraph, tuple(zip(scopes, chosen)), index)


def _divisible(spec: ShardSpec, shape: tuple[int, ...], devices: int) -> bool:
    if spec.kind is not ShardKind.SPLIT:
        return True
    return shape[spec.axis] % devices == 0


def pattern_routing(
    graph: ModelGraph, plan: CandidatePlan, mesh: ClusterSpec
):
    """Validate one candidate by chaining patterns through the subgraph.

    Nodes are visited in topological order, so a node is expanded only once
    all its producers carry a resolved shard state.  For each node the
    cheapest registered pattern whose weight spec matches the plan and whose
    inputs are reachable through single-collective conversions is chosen;
    returns a RoutingFailure (not an exception) as soon as a node has no
    viable pattern.  Subgraph entry and exit states are fixed to replica.
    """
    sub = plan.subgraph
    members = set(sub.template)
    assignment = plan.assignment_map
    devices = mesh.device_count
    states: dict[str, ShardSpec] = {}
    routings: list[NodeRouting] = []

    for scope in sub.template:
        node = graph.nodes[scope]
        act = node.activation
        candidates = []
        for idx, pattern in enumerate(patterns_for(node.op)):
            if node.weight is not None:
                try:
                    want_w = (
                        pattern.weight_spec.normalized(node.weight.rank)
                        if pattern.weight_spec is not None
                        else None
                    )
                    assigned = assignment[scope].normalized(node.weight.rank)
                except ShardplanError:
                    continue
                if want_w != assigned:
                    continue
                if not _divisible(assigned, node.weight.shape, devices):
                    continue
            conversions = []
            feasible = True
            cost = 0.0
            for producer in node.inputs:
                prod_node = graph.nodes[producer]
                prod_act = prod_node.activation
                prod_state = states.get(producer, REPLICA)  # entry edges are replica
                try:
                    required = pattern.input_spec.normalized(prod_act.rank)
                    coll = _convert(prod_state, required, prod_act, devices)
                except (NoRouteError, ShardplanError):
                    feasible = False
                    break
                if coll.kind is not CollectiveKind.IDENTITY:
                    conversions.append((producer, coll, prod_act.byte_size))
                    cost += collective_call_cost(coll, prod_act.byte_size, mesh)
            if not feasible:
                continue
            try:
                out_state = pattern.output_spec.normalized(act.rank)
            except ShardplanError:
                continue
            if not _divisible(out_state, act.shape, devices):
                continue
            cost += collective_call_cost(pattern.collective, act.byte_size, mesh)
            candidates.append((cost, idx, pattern, tuple(conversions), out_state))
        if not candidates:
            return RoutingFailure(scope, "no pattern chains from producer states")
        cost, _, pattern, conversions, out_state = min(candidates, key=lambda c: (c[0], c[1]))
        final_state = apply_collective(out_state, pattern.collective)
        internal_conversions = tuple(
            (p, c, b) for p, c, b in conversions if p in members
        )
        routings.append(
            NodeRouting(
                scope, pattern.name, internal_conversions, pattern.collective,
                act.byte_size, final_state,
            )
        )
        states[scope] = final_state

    exits = []
    for scope in sub.template:
        consumers = graph.consumers[scope]
        boundary = (not consumers) or any(c not in members for c in consumers)
        if boundary and states[scope] != REPLICA:
            act = graph.nodes[scope].activation
            try:
                coll = _convert(states[scope], REPLICA, act, devices)
            except NoRouteError:
                return RoutingFailure(scope, "cannot restore replica at subgraph exit")
            exits.append((scope, coll, act.byte_size))
    return RoutedPlan(plan, tuple(routings), tuple(exits), CostReport())


def _convert(frm: ShardSpec, to: ShardSpec, tensor, devices: int) -> Collective:
    from .patterns import conversion_collective

    coll = conversion_collective(frm, to, tensor)
    if to.kind is ShardKind.SPLIT and tensor.shape[to.normalized(tensor.rank).axis] % devices:
        raise NoRouteError("target split axis not divisible by device count")
    return coll


@dataclass
class SubgraphResult:
    subgraph: Subgraph
    best: Optional[RoutedPlan]
    candidates: int
    valid: int
    table: list = field(default_factory=list)


@dataclass
class BestPlanReport:
    mesh: ClusterSpec
    min_duplicates: int
    results: list[SubgraphResult]
    assignments: dict[str, str]  # every weight-bearing GraphNode -> shard label
    total_cost: float
    candidates: int
    valid: int

    def to_json(self, with_table: bool = False) -> dict:
        subs = []
        for res in self.results:
            entry = {
                "template_prefix": res.subgraph.template_prefix,
                "multiplicity": res.subgraph.multiplicity,
                "nodes": len(res.subgraph.template),
                "candidates": res.candidates,
                "valid": res.valid,
                "best": {
                    scope: spec.label
                    for scope, spec in (res.best.plan.assignments if res.best else ())
                },
                "cost": res.best.cost.to_json() if res.best else None,
            }
            if with_table and res.table:
                entry["cost_table"] = res.table
            subs.append(entry)
        return {
            "mesh": self.mesh.to_json(),
            "min_duplicates": self.min_duplicates,
            "subgraphs": subs,
            "assignments": dict(sorted(self.assignments.items())),
            "total_cost_s": self.total_cost,
            "candidates_enumerated": self.candidates,
            "valid_plans": self.valid,
        }


def _plan_key(routed: RoutedPlan) -> tuple:
    # cost first; ties break toward fewer split tensors, then candidate order
    return (routed.cost.total, routed.plan.num_split, routed.plan.index)


def _eval_range(args) -> tuple:
    graph, subgraph, mesh, mu, chunk_size, start, stop, want_table = args
    best = None
    best_key = None
    valid = 0
    table = []
    for index in range(start, stop):
        plan = candidate_by_index(graph, subgraph, index)
        routed = pattern_routing(graph, plan, mesh)
        if isinstance(routed, RoutingFailure):
            if want_table:
                table.append([index, _labels(plan), None])
            continue
        cost = plan_cost(routed, graph, mesh, mu=mu, chunk_size=chunk_size)
        routed = RoutedPlan(routed.plan, routed.routings, routed.exit_conversions, cost)
        valid += 1
        if want_table:
            table.append([index, _labels(plan), cost.total])
        key = _plan_key(routed)
        if best_key is None or key < best_key:
            best, best_key = routed, key
    return best, best_key, valid, table


def _labels(plan: CandidatePlan) -> dict[str, str]:
    return {scope: spec.label for scope, spec in plan.assignments}


def search_subgraph(
    graph: ModelGraph,
    subgraph: Subgraph,
    mesh: ClusterSpec,
    mu: int = 1 << 20,
    chunk_size: int = 4 << 20,
    jobs: int = 1,
    want_table: bool = False,
) -> SubgraphResult:
    total = count_candidates(graph, subgraph)
    if jobs <= 1 or total < 32:
        best, _, valid, table = _eval_range(
            (graph, subgraph, mesh, mu, chunk_size, 0, total, want_table)
        )
    else:
        step = -(-total // jobs)
        tasks = [
            (graph, subgraph, mesh, mu, chunk_size, lo, min(lo + step, total), want_table)
            for lo in range(0, total, step)
        ]
        best, best_key, valid, table = None, None, 0, []
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for b, key, v, t in pool.map(_eval_range, tasks):
                valid += v
                table.extend(t)
                if b is not None and (best_key is None or key < best_key):
                    best, best_key = b, key
    assert best is not None, "all-replica fallback must always route"
    return SubgraphResult(subgraph, best, total, valid, table)


def derive_plan(
    graph: ModelGraph,
    mesh: ClusterSpec,
    min_duplicates: int = 2,
    mu: int = 1 << 20,
    chunk_size: int = 4 << 20,
    jobs: int = 1,
    want_table: bool = False,
) -> BestPlanReport:
    """Prune, search every unique subgraph independently, and assemble the
    cost-minimal whole-graph plan (per-subgraph winners broadcast to all
    instances)."""
    subgraphs = prune_graph(graph, min_duplicates)
    results = []
    assignments: dict[str, str] = {}
    total_cost = 0.0
    candidates = 0
    valid = 0
    for sub in subgraphs:
        res = search_subgraph(
            graph, sub, mesh, mu=mu, chunk_size=chunk_size, jobs=jobs, want_table=want_table
        )
        results.append(res)
        candidates += res.candidates
        valid += res.valid
        total_cost += res.best.cost.total * sub.multiplicity
        for prefix, _ in sub.instances:
            for scope, spec in res.best.plan.assignments:
                assignments[sub.instance_node(prefix, scope)] = spec.label
    return BestPlanReport(
        mesh, min_duplicates, results, assignments, total_cost, candidates, valid
    )


def broadcast_routing(report: BestPlanReport) -> dict[str, NodeRouting]:
    """Whole-graph routing map: the template routing of each winning plan
    replayed on every instance (internal producer scopes prefix-swapped)."""
    out: dict[str, NodeRouting] = {}
    for res in report.results:
        sub = res.subgraph
        for prefix, _ in sub.instances:
            for r in res.best.routings:
                out[sub.instance_node(prefix, r.scope)] = NodeRouting(
                    sub.instance_node(prefix, r.scope),
                    r.pattern,
                    tuple(
                        (sub.instance_node(prefix, p), c, b)
                        for p, c, b in r.input_conversions
                    ),
                    r.output_collective,
                    r.output_bytes,
                    r.state,
                )
            for scope, coll, nbytes in res.best.exit_conversions:
                inst_scope = sub.instance_node(prefix, scope)
                r = out[inst_scope]
                out[inst_scope] = NodeRouting(
                    r.scope, r.pattern, r.input_conversions, r.output_collective,
                    r.output_bytes, r.state, exit_conversion=coll,
                )
    return out


def routed_plan_for_assignments(
    graph: ModelGraph,
    mesh: ClusterSpec,
    assignments: dict[str, str],
    min_duplicates: int = 2,
    mu: int = 1 << 20,
    chunk_size: int = 4 << 20,
) -> BestPlanReport:
    """Re-route a plan loaded from a report file (assignment labels only).

    Every instance of a subgraph must carry the same per-template decision;
    routing is deterministic, so this reproduces the original RoutedPlan.
    """
    subgraphs = prune_graph(graph, min_duplicates)
    results = []
    total_cost = 0.0
    for sub in subgraphs:
        scopes = weight_nodes(graph, sub)
        chosen = tuple(
            (scope, ShardSpec.from_label(assignments[scope])) for scope in scopes
        )
        plan = CandidatePlan(sub, chosen, index=-1)
        routed = pattern_routing(graph, plan, mesh)
        if isinstance(routed, RoutingFailure):
            raise ShardplanError(
                f"stored plan does not route at node {routed.node}: {routed.reason}"
            )
        cost = plan_cost(routed, graph, mesh, mu=mu, chunk_size=chunk_size)
        routed = RoutedPlan(routed.plan, routed.routings, routed.exit_conversions, cost)
        results.append(SubgraphResult(sub, routed, 1, 1))
        total_cost += cost.total * sub.multiplicity
    return BestPlanReport(
        mesh, min_duplicates, results, dict(assignments), total_cost, 0, 0
    )
