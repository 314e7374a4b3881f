"""shardplan: a tensor-sharding plan compiler for computation graphs.

Pipeline: load/generate a graph, trim and group it, detect shared
subgraphs, enumerate per-weight sharding candidates, route each candidate
through the pattern registry, cost the routed plans against a cluster
model, rewrite the winner into an explicit distributed graph, and verify
it numerically against single-device execution.
"""

from .costmodel import (
    ClusterSpec,
    CostReport,
    collective_cost,
    collective_cost_bytes,
    plan_cost,
)
from .errors import (
    BadConfig,
    CycleError,
    DanglingRef,
    EmptyGraph,
    IndivisibleShard,
    NoRouteError,
    ParseError,
    ProtocolError,
    ShapeMismatch,
    ShardplanError,
    SpecMismatch,
)
from .generators import gen_encoder_decoder, gen_transformer_stack, gen_wide_classifier
from .interp import (
    EquivalenceReport,
    all_gather,
    all_reduce_sum,
    all_to_all,
    check_equivalence,
    execute_sharded,
    execute_single,
    make_inputs,
    reduce_scatter,
)
from .ir import (
    DType,
    GraphNode,
    ModelGraph,
    OpKind,
    RawNode,
    TensorSpec,
    load_graph,
    save_graph,
    trim_and_group,
)
from .patterns import (
    Collective,
    CollectiveKind,
    PATTERN_REGISTRY,
    REPLICA,
    ShardKind,
    ShardSpec,
    ShardingPattern,
    conversion_collective,
    patterns_for,
)
from .pruning import Subgraph, build_node_tree, find_similar_blocks, prune_graph
from .rewrite import (
    FusionBucket,
    ParallelGraph,
    pack_gradients,
    rewrite_graph,
    save_parallel_graph,
)
from .search import (
    BestPlanReport,
    CandidatePlan,
    broadcast_routing,
    candidate_by_index,
    count_candidates,
    derive_plan,
    enumerate_all_plans,
    pattern_routing,
    routed_plan_for_assignments,
)

__version__ = "0.1.0"
