import pytest

from shardplan import (
    ClusterSpec,
    DType,
    ModelGraph,
    OpKind,
    RawNode,
    TensorSpec,
    gen_transformer_stack,
    gen_wide_classifier,
    trim_and_group,
)


@pytest.fixture(scope="session")
def tiny_transformer():
    """2 layers, d_model=8: small enough for exhaustive routing checks."""
    return trim_and_group(gen_transformer_stack(2, d_model=8))


@pytest.fixture(scope="session")
def tiny_transformer_f64():
    return trim_and_group(gen_transformer_stack(2, d_model=8, dtype=DType.F64))


@pytest.fixture(scope="session")
def tiny_classifier_f64():
    return trim_and_group(gen_wide_classifier(64, 16, dtype=DType.F64))


@pytest.fixture(scope="session")
def mesh2():
    return ClusterSpec.from_mesh("1x2")


@pytest.fixture(scope="session")
def mesh4():
    return ClusterSpec.from_mesh("2x2")


def chain_graph(num_matmuls: int, dim: int = 4, batch: int = 2, dtype=DType.F64):
    """input -> blk/m_i (matmul, dim x dim weight) x N -> output."""
    act = TensorSpec((batch, dim), dtype)
    nodes = [RawNode("input", OpKind.INPUT, (), act)]
    prev = "input"
    for i in range(num_matmuls):
        name = f"blk/m{i}/matmul"
        nodes.append(
            RawNode(
                name, OpKind.MATMUL, (prev,), act,
                TensorSpec((dim, dim), dtype, trainable=True),
            )
        )
        prev = name
    nodes.append(RawNode("output", OpKind.OUTPUT, (prev,), act))
    return trim_and_group(ModelGraph(nodes))
