"""Synthetic benchmark models.

The generators emit RawNode graphs with the hierarchical naming the grouping
and pruning passes rely on.  They are deterministic for fixed arguments and
double as self-contained fixtures for the acceptance suite, so no external
model files are needed.
"""

from __future__ import annotations

from .errors import BadConfig
from .ir import DType, ModelGraph, OpKind, RawNode, TensorSpec


def _aux(owner: str, scope: str, count: int, nodes: list[RawNode]) -> None:
    """Attach `count` auxiliary operators (init/read/checkpoint style) under
    `scope`, chained off the owner node."""
    prev = owner
    for j in range(count):
        name = f"{scope}/aux_{j}"
        nodes.append(
            RawNode(name, OpKind.AUXILIARY, (prev,), TensorSpec((1,)))
        )
        prev = name


def _transformer_layer(
    prefix: str,
    prev: str,
    d_model: int,
    ffn_mult: int,
    act_shape: tuple[int, ...],
    dtype: DType,
    aux_per_weight: int,
    aux_per_node: int,
    nodes: list[RawNode],
) -> str:
    act = TensorSpec(act_shape, dtype)
    inter = TensorSpec(act_shape[:-1] + (ffn_mult * d_model,), dtype)

    def emit(name, op, inputs, output, weight=None, attrs=()):
        nodes.append(RawNode(name, op, tuple(inputs), output, weight, tuple(attrs)))
        naux = aux_per_weight if weight is not None and weight.trainable else aux_per_node
        _aux(name, name.rsplit("/", 1)[0], naux, nodes)

    w = lambda r, c: TensorSpec((r, c), dtype, trainable=True)
    emit(f"{prefix}/ln1/norm", OpKind.LAYERNORM, [prev], act)
    emit(f"{prefix}/gate/softmax", OpKind.SOFTMAX, [f"{prefix}/ln1/norm"], act)
    gate = f"{prefix}/gate/softmax"
    for proj in ("q", "k", "v"):
        emit(f"{prefix}/attention/{proj}/matmul", OpKind.MATMUL, [gate], act, w(d_model, d_model))
    emit(
        f"{prefix}/attention/scores/mul",
        OpKind.ELEMENTWISE,
        [f"{prefix}/attention/q/matmul", f"{prefix}/attention/k/matmul"],
        act,
        attrs=(("fn", "mul"),),
    )
    emit(
        f"{prefix}/attention/context/mul",
        OpKind.ELEMENTWISE,
        [f"{prefix}/attention/scores/mul", f"{prefix}/attention/v/matmul"],
        act,
        attrs=(("fn", "mul"),),
    )
    emit(
        f"{prefix}/attention/out/matmul",
        OpKind.MATMUL,
        [f"{prefix}/attention/context/mul"],
        act,
        w(d_model, d_model),
    )
    emit(
        f"{prefix}/residual1/add",
        OpKind.ELEMENTWISE,
        [prev, f"{prefix}/attention/out/matmul"],
        act,
        attrs=(("fn", "add"),),
    )
    emit(f"{prefix}/ln2/norm", OpKind.LAYERNORM, [f"{prefix}/residual1/add"], act)
    emit(
        f"{prefix}/ffn/intermediate/matmul",
        OpKind.MATMUL,
        [f"{prefix}/ln2/norm"],
        inter,
        w(d_model, ffn_mult * d_model),
    )
    emit(
        f"{prefix}/ffn/act/mul",
        OpKind.ELEMENTWISE,
        [f"{prefix}/ffn/intermediate/matmul", f"{prefix}/ffn/intermediate/matmul"],
        inter,
        attrs=(("fn", "mul"),),
    )
    emit(
        f"{prefix}/ffn/output/matmul",
        OpKind.MATMUL,
        [f"{prefix}/ffn/act/mul"],
        act,
        w(ffn_mult * d_model, d_model),
    )
    emit(
        f"{prefix}/residual2/add",
        OpKind.ELEMENTWISE,
        [f"{prefix}/residual1/add", f"{prefix}/ffn/output/matmul"],
        act,
        attrs=(("fn", "add"),),
    )
    return f"{prefix}/residual2/add"


def gen_transformer_stack(
    layers: int,
    d_model: int = 64,
    heads: int = 4,
    batch: int = 8,
    seq: int = 16,
    vocab: int = 32,
    ffn_mult: int = 4,
    dtype: DType = DType.F32,
    aux_per_weight: int = 2,
    aux_per_node: int = 0,
    stack_name: str = "encoder",
) -> ModelGraph:
    """Dense transformer stack: each layer carries exactly 6 weight tensors
    (Q, K, V, attention output, FFN intermediate, FFN output)."""
    if layers < 1 or d_model < 1 or heads < 1 or batch < 1 or seq < 1 or vocab < 1:
        raise BadConfig("all generator arguments must be positive")
    if d_model % heads != 0:
        raise BadConfig(f"d_model={d_model} not divisible by heads={heads}")

    nodes: list[RawNode] = []
    act_shape = (batch, seq, d_model)
    nodes.append(RawNode("input", OpKind.INPUT, (), TensorSpec((batch, seq), dtype)))
    nodes.append(
        RawNode(
            "embedding/lookup",
            OpKind.EMBEDDING,
            ("input",),
            TensorSpec(act_shape, dtype),
            TensorSpec((vocab, d_model), dtype, trainable=True),
        )
    )
    _aux("embedding/lookup", "embedding", aux_per_weight, nodes)
    prev = "embedding/lookup"
    for i in range(layers):
        prev = _transformer_layer(
            f"{stack_name}/layer_{i}",
            prev,
            d_model,
            ffn_mult,
            act_shape,
            dtype,
            aux_per_weight,
            aux_per_node,
            nodes,
        )
    nodes.append(
        RawNode(
            "head/proj/matmul",
            OpKind.MATMUL,
            (prev,),
            TensorSpec((batch, seq, vocab), dtype),
            TensorSpec((d_model, vocab), dtype, trainable=True),
            (("heads", heads),),
        )
    )
    _aux("head/proj/matmul", "head/proj", aux_per_weight, nodes)
    nodes.append(
        RawNode("output", OpKind.OUTPUT, ("head/proj/matmul",), TensorSpec((batch, seq, vocab), dtype))
    )
    return ModelGraph(nodes)


def gen_encoder_decoder(
    enc_layers: int,
    dec_layers: int,
    d_model: int = 64,
    heads: int = 4,
    batch: int = 8,
    seq: int = 16,
    vocab: int = 32,
    dtype: DType = DType.F32,
    aux_per_weight: int = 20,
    aux_per_node: int = 3,
) -> ModelGraph:
    """Two-block-type stack (decoder FFN is half as wide), modelling an
    encoder-decoder language model with heavy per-variable auxiliary traffic."""
    if enc_layers < 1 or dec_layers < 1:
        raise BadConfig("layer counts must be positive")
    if d_model % heads != 0 or d_model % 2 != 0:
        raise BadConfig("d_model must be divisible by heads and by 2")
    nodes: list[RawNode] = []
    act_shape = (batch, seq, d_model)
    nodes.append(RawNode("input", OpKind.INPUT, (), TensorSpec((batch, seq), dtype)))
    nodes.append(
        RawNode(
            "embedding/lookup",
            OpKind.EMBEDDING,
            ("input",),
            TensorSpec(act_shape, dtype),
            TensorSpec((vocab, d_model), dtype, trainable=True),
        )
    )
    _aux("embedding/lookup", "embedding", aux_per_weight, nodes)
    prev = "embedding/lookup"
    for i in range(enc_layers):
        prev = _transformer_layer(
            f"encoder/layer_{i}", prev, d_model, 4, act_shape, dtype,
            aux_per_weight, aux_per_node, nodes,
        )
    for i in range(dec_layers):
        prev = _transformer_layer(
            f"decoder/layer_{i}", prev, d_model, 2, act_shape, dtype,
            aux_per_weight, aux_per_node, nodes,
        )
    nodes.append(
        RawNode(
            "head/proj/matmul",
            OpKind.MATMUL,
            (prev,),
            TensorSpec((batch, seq, vocab), dtype),
            TensorSpec((d_model, vocab), dtype, trainable=True),
        )
    )
    _aux("head/proj/matmul", "head/proj", aux_per_weight, nodes)
    nodes.append(
        RawNode("output", OpKind.OUTPUT, ("head/proj/matmul",), TensorSpec((batch, seq, vocab), dtype))
    )
    return ModelGraph(nodes)


def gen_wide_classifier(
    num_classes: int,
    feature_dim: int,
    blocks: int = 4,
    batch: int = 32,
    dtype: DType = DType.F32,
    aux_per_weight: int = 2,
) -> ModelGraph:
    """Narrow feature extractor feeding one very wide fully connected layer."""
    if num_classes < 1 or feature_dim < 1 or blocks < 1 or batch < 1:
        raise BadConfig("all generator arguments must be positive")
    nodes: list[RawNode] = []
    feat = TensorSpec((batch, feature_dim), dtype)
    nodes.append(RawNode("input", OpKind.INPUT, (), feat))
    prev = "input"
    for i in range(blocks):
        prefix = f"backbone/block_{i}"
        nodes.append(
            RawNode(
                f"{prefix}/proj/matmul",
                OpKind.MATMUL,
                (prev,),
                feat,
                TensorSpec((feature_dim, feature_dim), dtype, trainable=True),
            )
        )
        _aux(f"{prefix}/proj/matmul", f"{prefix}/proj", aux_per_weight, nodes)
        nodes.append(
            RawNode(
                f"{prefix}/act/mul",
                OpKind.ELEMENTWISE,
                (f"{prefix}/proj/matmul", f"{prefix}/proj/matmul"),
                feat,
                attrs=(("fn", "mul"),),
            )
        )
        prev = f"{prefix}/act/mul"
    nodes.append(RawNode("backbone/flatten/reshape", OpKind.RESHAPE, (prev,), feat))
    nodes.append(
        RawNode(
            "classifier/fc/matmul",
            OpKind.MATMUL,
            ("backbone/flatten/reshape",),
            TensorSpec((batch, num_classes), dtype),
            TensorSpec((feature_dim, num_classes), dtype, trainable=True),
        )
    )
    _aux("classifier/fc/matmul", "classifier/fc", aux_per_weight, nodes)
    nodes.append(
        RawNode("output", OpKind.OUTPUT, ("classifier/fc/matmul",), TensorSpec((batch, num_classes), dtype))
    )
    return ModelGraph(nodes)
