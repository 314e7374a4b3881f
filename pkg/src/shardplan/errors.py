"""Exception hierarchy shared across the planner."""


class ShardplanError(Exception):
    """Base class for all planner errors."""


class ParseError(ShardplanError):
    """Malformed graph document."""


class CycleError(ShardplanError):
    """The node reference graph contains a back edge."""

    def __init__(self, src: str, dst: str):
        super().__init__(f"cycle detected through edge {src!r} -> {dst!r}")
        self.src = src
        self.dst = dst


class DanglingRef(ShardplanError):
    """An input name does not resolve to any node."""


class EmptyGraph(ShardplanError):
    """Nothing remains after trimming."""


class BadConfig(ShardplanError):
    """Invalid generator or cluster configuration."""


class SpecMismatch(ShardplanError):
    """Shard states are incompatible with a pattern's input specs."""


class NoRouteError(ShardplanError):
    """No single collective converts between the two shard states."""


class IndivisibleShard(ShardplanError):
    """A split axis is not divisible by the device count."""

    def __init__(self, node: str, axis: int, dim: int, devices: int):
        super().__init__(
            f"node {node!r}: axis {axis} (dim {dim}) not divisible by {devices} devices"
        )
        self.node = node
        self.axis = axis


class ShapeMismatch(ShardplanError):
    """Operand shapes do not conform during execution."""


class ProtocolError(ShardplanError):
    """Collective participant arity mismatch during simulation."""
