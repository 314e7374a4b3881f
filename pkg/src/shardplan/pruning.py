"""Shared-subgraph pruning.

Repeated blocks (transformer layers, backbone stages, ...) are found by
longest-common-prefix clustering over GraphNode names, so downstream plan
search runs once per unique block instead of once per instance.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import BadConfig
from .ir import GraphNode, ModelGraph


@dataclass(frozen=True)
class PrefixGroup:
    prefix: str
    members: tuple[str, ...]  # GraphNode scopes, sorted


@dataclass(frozen=True)
class NodeTree:
    """Per-depth prefix clustering; groups at depth d+1 refine depth d."""

    levels: tuple[tuple[int, tuple[PrefixGroup, ...]], ...]
    max_depth: int

    def level(self, depth: int) -> tuple[PrefixGroup, ...]:
        return dict(self.levels).get(depth, ())


@dataclass(frozen=True)
class Subgraph:
    """One unique block: a template instance plus all isomorphic instances.

    ``template`` lists the member GraphNode scopes of the representative
    instance in deterministic topological order; every instance maps onto it
    by swapping the name prefix.
    """

    template_prefix: str
    template: tuple[str, ...]
    instances: tuple[tuple[str, tuple[str, ...]], ...]  # (prefix, member scopes)

    @property
    def multiplicity(self) -> int:
        return len(self.instances)

    def instance_node(self, instance_prefix: str, template_scope: str) -> str:
        """Map a template member scope onto the given instance."""
        if instance_prefix == self.template_prefix:
            return template_scope
        suffix = template_scope[len(self.template_prefix):]
        return instance_prefix + suffix


def _prefix(scope: str, depth: int) -> str:
    return "/".join(scope.split("/")[:depth])


def build_node_tree(graph: ModelGraph) -> NodeTree:
    """Cluster GraphNodes by name prefix at every depth from maxDepth down."""
    max_depth = graph.depth
    levels = []
    for depth in range(max_depth, 0, -1):
        buckets: dict[str, list[str]] = {}
        for name in sorted(graph.nodes):
            node = graph.nodes[name]
            if node.depth >= depth:
                buckets.setdefault(_prefix(name, depth), []).append(name)
        groups = tuple(
            PrefixGroup(p, tuple(ms)) for p, ms in sorted(buckets.items())
        )
        levels.append((depth, groups))
    return NodeTree(tuple(levels), max_depth)


def _signature(graph: ModelGraph, members: tuple[str, ...]):
    """Structural signature: op multiset + weight-shape multiset + internal
    edge count.  Weight shapes are included because plans transfer only
    between shape-identical blocks."""
    ops = sorted(graph.nodes[m].op.value for m in members)
    shapes = sorted(
        graph.nodes[m].weight.shape for m in members if graph.nodes[m].weight is not None
    )
    member_set = set(members)
    edges = sum(
        1
        for m in members
        for ref in graph.nodes[m].inputs
        if ref in member_set
    )
    return (tuple(ops), tuple(shapes), edges)


def _template_key(graph: ModelGraph, prefix: str, members: tuple[str, ...]):
    """Exact template identity under prefix substitution: relative names,
    ops, weight shapes/trainability, and relative internal edges."""
    start = len(prefix) + 1 if prefix else 0
    member_set = set(members)
    entries = []
    for m in sorted(members):
        node = graph.nodes[m]
        rel = m[start:]
        w = node.weight
        rel_inputs = tuple(sorted(r[start:] for r in node.inputs if r in member_set))
        entries.append(
            (rel, node.op.value, (w.shape, w.trainable) if w else None, rel_inputs)
        )
    return tuple(entries)


def find_similar_blocks(tree: NodeTree, depth: int, graph: ModelGraph):
    """Bucket the prefix groups at one depth by structural signature."""
    counts: dict = {}
    for group in tree.level(depth):
        sig = _signature(graph, group.members)
        counts[sig] = counts.get(sig, 0) + 1
    return sorted(counts.items(), key=lambda kv: kv[0])


def prune_graph(graph: ModelGraph, min_duplicates: int) -> list[Subgraph]:
    """Partition GraphNodes into unique shared subgraphs plus residuals.

    Descends the scope hierarchy: a set of same-signature sibling groups with
    at least ``min_duplicates`` instances becomes one Subgraph; everything
    that never reaches the threshold descends until it bottoms out as a
    multiplicity-1 residual.  The returned subgraphs cover every GraphNode
    exactly once.
    """
    if min_duplicates < 1:
        raise BadConfig("min_duplicates must be >= 1")
    result: list[Subgraph] = []

    def accept(bucket: list[tuple[str, tuple[str, ...]]]) -> None:
        bucket = sorted(bucket)
        prefix, members = bucket[0]
        order = {n: i for i, n in enumerate(graph.topo_order)}
        template = tuple(sorted(members, key=lambda n: (order[n], n)))
        start = len(prefix) + 1 if prefix else 0
        instances = []
        for inst_prefix, _ in bucket:
            inst_start = len(inst_prefix) + 1 if inst_prefix else 0
            inst_members = tuple(inst_prefix + t[len(prefix):] for t in template)
            del inst_start
            instances.append((inst_prefix, inst_members))
        result.append(Subgraph(prefix, template, tuple(instances)))

    def descend(groups: list[tuple[str, tuple[str, ...]]], depth: int) -> None:
        buckets: dict = {}
        for prefix, members in groups:
            sig = _signature(graph, members)
            buckets.setdefault(sig, []).append((prefix, members))
        for sig in sorted(buckets):
            bucket = buckets[sig]
            if len(bucket) >= min_duplicates:
                # same signature may still hide different templates; accept
                # each exact-template class that clears the threshold
                by_template: dict = {}
                for prefix, members in bucket:
                    key = _template_key(graph, prefix, members)
                    by_template.setdefault(key, []).append((prefix, members))
                leftovers = []
                for key in sorted(by_template):
                    cls = by_template[key]
                    if len(cls) >= min_duplicates:
                        accept(cls)
                    else:
                        leftovers.extend(cls)
                if leftovers:
                    refine(leftovers, depth)
            else:
                refine(bucket, depth)

    def refine(groups: list[tuple[str, tuple[str, ...]]], depth: int) -> None:
        for prefix, members in sorted(groups):
            if len(members) == 1 and graph.nodes[members[0]].depth <= depth:
                accept([(members[0], members)])
                continue
            children: dict[str, list[str]] = {}
            terminal: list[str] = []
            for m in members:
                if graph.nodes[m].depth <= depth:
                    terminal.append(m)
                else:
                    children.setdefault(_prefix(m, depth + 1), []).append(m)
            for t in terminal:
                accept([(t, (t,))])
            if children:
                descend(
                    [(p, tuple(ms)) for p, ms in sorted(children.items())], depth + 1
                )

    top: dict[str, list[str]] = {}
    for name in sorted(graph.nodes):
        top.setdefault(_prefix(name, 1), []).append(name)
    descend([(p, tuple(ms)) for p, ms in sorted(top.items())], 1)

    result.sort(key=lambda s: s.template_prefix)
    return result
