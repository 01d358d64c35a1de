"""Graph-guided compositional reasoning over encoded chart features.

The model runs an operator graph as a dataflow program.  A self-attention
stack first refines the chart features into the start state.  Then each graph
node is executed by a learned block chosen by the node's operator type: the
block fuses the outputs of the node's predecessors (the start state is a
predecessor of every node), encodes the node's own text as guidance, and
refines the fused state through attention layers.  The unique sink's output
is the final reasoning state handed to the answer decoder.

Blocks are keyed by operator type, not by node, so the parameter count is
independent of graph size and every question shares the same weights.

Three attention wirings are supported for the two refinement layers inside a
block, and two degraded operator-type sets, so the contribution of typed
blocks and of graph guidance can each be measured:

- ``self_cross``   self-attention over data, then cross-attention into the
                   node's guidance tokens
- ``cross_cross``  both layers cross-attend into the guidance
- ``self_self``    both layers self-attend; pooled guidance is added to the
                   input instead

With ``got_enabled=False`` the graph is ignored entirely and a fixed chain of
typed blocks runs with the whole question as every node's guidance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamStore, Tensor, TensorError, add, layer_norm, linear, mean_rows, mul, reshape
from .decoding import Vocab
from .graph import (
    VIRTUAL_START,
    ExecutionPlan,
    OperatorNode,
    OpType,
    ThoughtGraph,
    normalize,
    plan,
    predecessors,
    validate,
)
from .layers import EncoderLayer, TokenEncoder

ATTENTION_ARCHS = ("self_cross", "cross_cross", "self_self")
OPERATOR_MODES = ("one", "find_log", "loc_num_log")

# Block types each operator mode instantiates, and how canonical node types
# map onto them.  None in the map means the type cannot be relabeled.
_MODE_TYPES = {
    "one": (OpType.GENERIC,),
    "find_log": (OpType.FIND, OpType.LOG),
    "loc_num_log": (OpType.LOC, OpType.NUM, OpType.LOG),
}
_RELABEL = {
    "one": {t: OpType.GENERIC for t in OpType},
    "find_log": {OpType.LOC: OpType.FIND, OpType.NUM: OpType.FIND,
                 OpType.FIND: OpType.FIND, OpType.LOG: OpType.LOG},
    "loc_num_log": {OpType.LOC: OpType.LOC, OpType.NUM: OpType.NUM,
                    OpType.LOG: OpType.LOG},
}


class ReasoningError(Exception):
    pass


class UnsupportedType(ReasoningError):
    pass


class EmptyPrecursors(ReasoningError):
    pass


class EmptyGuidance(ReasoningError):
    pass


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    self_data_layers: int = 4
    op_layers: int = 1
    attention_arch: str = "self_cross"
    operator_mode: str = "loc_num_log"
    got_enabled: bool = True
    guidance_len: int = 16

    def __post_init__(self):
        if self.attention_arch not in ATTENTION_ARCHS:
            raise ValueError(f"unknown attention arch {self.attention_arch!r}")
        if self.operator_mode not in OPERATOR_MODES:
            raise ValueError(f"unknown operator mode {self.operator_mode!r}")
        if self.d <= 0 or self.heads <= 0 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.self_data_layers < 1 or self.op_layers < 1 or self.guidance_len < 1:
            raise ValueError("layer counts and guidance length must be positive")

    def to_meta(self) -> dict:
        return {
            "d": self.d, "heads": self.heads,
            "self_data_layers": self.self_data_layers, "op_layers": self.op_layers,
            "attention_arch": self.attention_arch, "operator_mode": self.operator_mode,
            "got_enabled": self.got_enabled, "guidance_len": self.guidance_len,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(**{k: meta[k] for k in cls().to_meta()})


class SelfDataBlock:
    """Start-state builder: a pre-projection then ``2 * layers`` self-attention
    encoders over the chart features."""

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int, layers: int):
        self.pre_w = store.matrix(f"{prefix}.pre.w", d, d)
        self.pre_b = store.zeros(f"{prefix}.pre.b", d)
        self.encoders = [
            EncoderLayer(store, f"{prefix}.enc{i}", d, heads) for i in range(2 * layers)
        ]

    def __call__(self, c_v: Tensor) -> Tensor:
        x = linear(c_v, self.pre_w, self.pre_b)
        for enc in self.encoders:
            x = enc(x)
        return x


class OperatorBlock:
    """Learned executor for one operator type.

    fuse: role-projected sum of predecessor flows (one projection for the
    start state, one shared by all graph predecessors), layer-normed.  The
    sum runs in ascending predecessor id, so fusion is insensitive to the
    order predecessors are supplied in.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int,
                 vocab_size: int, config: ModelConfig):
        self.arch = config.attention_arch
        self.heads = heads
        self.start_w = store.matrix(f"{prefix}.fuse.start.w", d, d)
        self.start_b = store.zeros(f"{prefix}.fuse.start.b", d)
        self.pred_w = store.matrix(f"{prefix}.fuse.pred.w", d, d)
        self.pred_b = store.zeros(f"{prefix}.fuse.pred.b", d)
        self.fuse_g = store.ones(f"{prefix}.fuse.ln.g", d)
        self.fuse_b = store.zeros(f"{prefix}.fuse.ln.b", d)
        self.guide = TokenEncoder(store, f"{prefix}.guide", vocab_size, d, heads,
                                  max_len=config.guidance_len, layers=1)
        self.layers = [
            (EncoderLayer(store, f"{prefix}.l{i}.a", d, heads),
             EncoderLayer(store, f"{prefix}.l{i}.b", d, heads))
            for i in range(config.op_layers)
        ]

    def fuse(self, flows: dict[int, Tensor]) -> Tensor:
        if not flows:
            raise EmptyPrecursors("operator fusion needs at least one input flow")
        total = None
        for pred_id in sorted(flows):
            w, b = (self.start_w, self.start_b) if pred_id == VIRTUAL_START \
                else (self.pred_w, self.pred_b)
            proj = linear(flows[pred_id], w, b)
            total = proj if total is None else add(total, proj)
        return add(mul(layer_norm(total), self.fuse_g), self.fuse_b)

    def __call__(self, flows: dict[int, Tensor], guidance_ids) -> Tensor:
        if len(guidance_ids) == 0:
            raise EmptyGuidance("operator guidance must have at least one token")
        x = self.fuse(flows)
        g = self.guide(guidance_ids)
        if self.arch == "self_self":
            x = add(x, reshape(mean_rows(g), (g.shape[1],)))
        for layer_a, layer_b in self.layers:
            if self.arch == "self_cross":
                x = layer_a(x)
                x = layer_b(x, kv=g)
            elif self.arch == "cross_cross":
                x = layer_a(x, kv=g)
                x = layer_b(x, kv=g)
            else:
                x = layer_a(x)
                x = layer_b(x)
        return x


@dataclass
class Network:
    """An assembled model for one operator graph: shared blocks plus the
    graph, its execution plan, and per-node guidance token ids."""

    graph: ThoughtGraph
    exec_plan: ExecutionPlan
    self_data: SelfDataBlock
    blocks: dict[str, OperatorBlock]
    guidance_ids: dict[int, tuple[int, ...]]
    config: ModelConfig


@dataclass
class ExecutionResult:
    o_end: Tensor
    flows: dict[int, Tensor] = field(default_factory=dict)
    consumed: dict[int, frozenset[int]] = field(default_factory=dict)


def _chain_graph(mode: str, question: str) -> ThoughtGraph:
    types = _MODE_TYPES[mode]
    nodes = [OperatorNode(i + 1, question, t) for i, t in enumerate(types)]
    edges = frozenset((i + 1, i + 2) for i in range(len(types) - 1))
    return ThoughtGraph(nodes=nodes, edges=edges)


def _relabel(got: ThoughtGraph, mode: str) -> ThoughtGraph:
    mapping = _RELABEL[mode]
    nodes = []
    for n in got.nodes:
        if n.op_type not in mapping:
            raise UnsupportedType(
                f"node {n.id}: type {n.op_type.value} has no block under mode {mode!r}"
            )
        nodes.append(n.relabeled(mapping[n.op_type]))
    return ThoughtGraph(nodes=nodes, edges=got.edges)


def assemble(got: ThoughtGraph | None, config: ModelConfig, store: ParamStore,
             vocab: Vocab, question: str | None = None) -> Network:
    """Bind an operator graph to shared learned blocks.

    Every block the mode defines is instantiated whether or not this graph
    uses it, so the parameter set is fixed after the first call and the
    optimizer never sees late-appearing weights.  With graph guidance turned
    off the graph argument is ignored and a typed chain carrying the whole
    question runs instead (the question is then required).
    """
    self_data = SelfDataBlock(store, "sd", config.d, config.heads, config.self_data_layers)
    blocks = {
        t.value: OperatorBlock(store, f"op.{t.value}", config.d, config.heads,
                               len(vocab), config)
        for t in _MODE_TYPES[config.operator_mode]
    }
    if config.got_enabled:
        if got is None:
            raise ReasoningError("graph-guided mode needs an operator graph")
        report = validate(got)
        if not report.ok:
            raise ReasoningError(f"graph does not validate: {report.violations}")
        graph = _relabel(normalize(got), config.operator_mode)
    else:
        if question is None or not question.strip():
            raise EmptyGuidance("graph-free mode needs non-empty question text")
        graph = _chain_graph(config.operator_mode, question)
    guidance_ids: dict[int, tuple[int, ...]] = {}
    for n in graph.nodes:
        ids = tuple(vocab.tokenize(n.content))
        if not ids:
            raise EmptyGuidance(f"node {n.id}: content {n.content!r} tokenizes to nothing")
        guidance_ids[n.id] = ids[: config.guidance_len]
    return Network(
        graph=graph,
        exec_plan=plan(graph),
        self_data=self_data,
        blocks=blocks,
        guidance_ids=guidance_ids,
        config=config,
    )


def execute(net: Network, c_v: Tensor) -> ExecutionResult:
    """Run the graph as a dataflow program over encoded chart features.

    Each node consumes exactly its predecessor set (the start state included)
    and nothing else; ``consumed`` records those sets for auditing.  Returns
    the sink flow as ``o_end`` plus every intermediate flow.
    """
    o_start = net.self_data(c_v)
    flows: dict[int, Tensor] = {VIRTUAL_START: o_start}
    consumed: dict[int, frozenset[int]] = {}
    for step in net.exec_plan.steps:
        for node_id in step:
            node = net.graph.node(node_id)
            preds = predecessors(net.graph, node_id)
            inputs = {p: flows[p] for p in preds}
            block = net.blocks[node.op_type.value]
            try:
                flows[node_id] = block(inputs, net.guidance_ids[node_id])
            except TensorError as e:
                raise type(e)(f"node {node_id}: {e}") from e
            consumed[node_id] = frozenset(inputs)
    sinks = net.graph.sinks()
    result_flows = {k: v for k, v in flows.items() if k != VIRTUAL_START}
    return ExecutionResult(o_end=flows[sinks[0]], flows=result_flows, consumed=consumed)
