"""The session-graph recommendation model.

Forward pipeline: item-embedding lookup -> a stack of weighted graph
attention layers -> recurrent attention readout pooling the node features
into one session embedding -> dot-product scoring of that embedding against
the shared embedding table -> softmax over the vocabulary.

Batches of graphs run as one block-diagonal super-graph: node rows are laid
out graph by graph and every per-node or per-graph reduction is a segment
operation, so results are exactly what per-graph forwards would produce.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError
from .graphs import BCSGraph
from .tensor import GRUParams, Tensor


@dataclass
class ModelConfig:
    d: int = 100                  # embedding width, also every layer's output width
    layers: int = 3               # attention layers
    heads: int = 4                # attention heads per layer; d must divide evenly
    readout_steps: int = 3        # recurrent readout iterations
    leaky_slope: float = 0.2      # negative slope in the attention nonlinearity
    readout_mode: str = "mask"    # "mask" attends over core nodes only, "plain" over all
    head_combine: str = "concat"  # non-final layers: "concat" heads or "mean" them
    log_edge_weights: bool = False  # feed log1p(weight) instead of the raw count

    def validate(self) -> "ModelConfig":
        if self.d < 1 or self.layers < 1 or self.heads < 1 or self.readout_steps < 1:
            raise ConfigError("d, layers, heads and readout_steps must be >= 1")
        if self.d % self.heads != 0:
            raise ConfigError(
                f"embedding width {self.d} is not divisible by {self.heads} heads"
            )
        if self.readout_mode not in ("plain", "mask"):
            raise ConfigError(f"readout_mode must be plain|mask, got {self.readout_mode!r}")
        if self.head_combine not in ("concat", "mean"):
            raise ConfigError(f"head_combine must be concat|mean, got {self.head_combine!r}")
        return self

    def head_width(self, layer: int) -> int:
        """Per-head output width: d/heads when heads get concatenated, else d."""
        is_final = layer == self.layers - 1
        if is_final or self.head_combine == "mean":
            return self.d
        return self.d // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data).validate()


@dataclass
class HeadParams:
    """One attention head: node map ``w`` and attention vector ``att``.

    ``w`` maps input features to the head width; ``att`` has length
    2*width + 1 and scores [w x_dst || w x_src || edge_weight].
    """

    w: Tensor
    att: Tensor


@dataclass
class ModelParams:
    embedding: Tensor                     # (m, d), shared with scoring
    layers: list[list[HeadParams]]
    gru: GRUParams                        # readout recurrence, input 2d -> hidden d
    w_out: Tensor                         # (d, 2d) map from session embedding to item space

    @property
    def vocab_size(self) -> int:
        return self.embedding.data.shape[0]

    def named_tensors(self):
        yield "embedding", self.embedding
        for li, heads in enumerate(self.layers):
            for hi, head in enumerate(heads):
                yield f"wgat{li}.h{hi}.w", head.w
                yield f"wgat{li}.h{hi}.att", head.att
        yield from self.gru.named("readout.gru")
        yield "w_out", self.w_out

    def all_tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def zero_grads(self) -> None:
        for t in self.all_tensors():
            t.zero_grad()


@dataclass
class GraphBatchView:
    """Flat arrays describing a batch of graphs as one disjoint union.

    Edges are sorted by (destination, source) in node-position terms, so the
    in-neighbourhood of node i is the contiguous run
    ``dst_offsets[i]:dst_offsets[i+1]`` of ``edge_src``/``edge_weight``.
    """

    nodes: np.ndarray          # (N,) item index per node
    edge_src: np.ndarray       # (E,) node positions
    edge_dst: np.ndarray       # (E,)
    edge_weight: np.ndarray    # (E,)
    dst_offsets: np.ndarray    # (N + 1,)
    core_mask: np.ndarray      # (N,) bool
    graph_offsets: np.ndarray  # (G + 1,) node ranges per graph
    node_graph: np.ndarray = field(repr=False)  # (N,) graph id per node

    @property
    def n_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def n_graphs(self) -> int:
        return int(self.graph_offsets.shape[0]) - 1

    @classmethod
    def from_graphs(cls, graphs: list[BCSGraph]) -> "GraphBatchView":
        if not graphs:
            raise ContractError("GraphBatchView: empty graph batch")
        nodes, core, sizes = [], [], []
        srcs, dsts, wts = [], [], []
        offset = 0
        for g in graphs:
            position = {item: offset + i for i, item in enumerate(g.nodes)}
            nodes.extend(g.nodes)
            core.append(g.core_mask)
            sizes.append(len(g.nodes))
            srcs.append(np.fromiter((position[int(s)] for s in g.edge_src), dtype=np.int64, count=len(g.edge_src)))
            dsts.append(np.fromiter((position[int(d)] for d in g.edge_dst), dtype=np.int64, count=len(g.edge_dst)))
            wts.append(g.edge_weight)
            offset += len(g.nodes)

        edge_src = np.concatenate(srcs) if srcs else np.empty(0, dtype=np.int64)
        edge_dst = np.concatenate(dsts) if dsts else np.empty(0, dtype=np.int64)
        edge_weight = np.concatenate(wts) if wts else np.empty(0)
        order = np.lexsort((edge_src, edge_dst))
        edge_src, edge_dst = edge_src[order], edge_dst[order]
        edge_weight = np.ascontiguousarray(edge_weight[order], dtype=np.float64)

        n = offset
        in_degree = np.bincount(edge_dst, minlength=n)
        if (in_degree == 0).any():
            raise ContractError(
                "GraphBatchView: a node has an empty in-neighbourhood "
                "(missing self-loop)"
            )
        dst_offsets = np.concatenate([[0], np.cumsum(in_degree)]).astype(np.int64)
        graph_offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        node_graph = np.repeat(np.arange(len(graphs), dtype=np.int64), sizes)
        return cls(
            nodes=np.array(nodes, dtype=np.int64),
            edge_src=edge_src,
            edge_dst=edge_dst,
            edge_weight=edge_weight,
            dst_offsets=dst_offsets,
            core_mask=np.concatenate(core),
            graph_offsets=graph_offsets,
            node_graph=node_graph,
        )


def param_shapes(config: ModelConfig, vocab_size: int):
    """Every parameter tensor's (name, shape) in canonical order."""
    d = config.d
    yield "embedding", (vocab_size, d)
    for li in range(config.layers):
        width = config.head_width(li)
        for hi in range(config.heads):
            yield f"wgat{li}.h{hi}.w", (width, d)
            yield f"wgat{li}.h{hi}.att", (2 * width + 1,)
    for gate in ("z", "r", "h"):
        yield f"readout.gru.w_{gate}", (2 * d, d)
        yield f"readout.gru.u_{gate}", (d, d)
        yield f"readout.gru.b_{gate}", (d,)
    yield "w_out", (d, 2 * d)


def params_from_tensors(config: ModelConfig, vocab_size: int,
                        tensors: dict[str, Tensor]) -> ModelParams:
    """Assemble a ModelParams from named tensors, checking shapes."""
    expected = dict(param_shapes(config, vocab_size))
    missing = sorted(set(expected) - set(tensors))
    if missing:
        raise ContractError(f"missing parameter tensors: {missing}")
    for name, shape in expected.items():
        if tensors[name].data.shape != shape:
            raise ContractError(
                f"parameter {name!r} has shape {tensors[name].data.shape}, "
                f"expected {shape}"
            )
    layers = [
        [
            HeadParams(w=tensors[f"wgat{li}.h{hi}.w"], att=tensors[f"wgat{li}.h{hi}.att"])
            for hi in range(config.heads)
        ]
        for li in range(config.layers)
    ]
    gru = GRUParams(
        **{
            f"{kind}_{gate}": tensors[f"readout.gru.{kind}_{gate}"]
            for gate in ("z", "r", "h")
            for kind in ("w", "u", "b")
        }
    )
    return ModelParams(
        embedding=tensors["embedding"],
        layers=layers,
        gru=gru,
        w_out=tensors["w_out"],
    )


# ---------------------------------------------------------------------------
# forward stages
# ---------------------------------------------------------------------------

def embed(nodes, params: ModelParams) -> Tensor:
    """Differentiable embedding lookup, one row per node."""
    return T.gather(params.embedding, np.asarray(nodes, dtype=np.int64))


def _head_attention(
    view: GraphBatchView,
    x: Tensor,
    head: HeadParams,
    leaky_slope: float,
    w_edge: Tensor,
) -> tuple[Tensor, Tensor]:
    """Mapped features and per-edge attention weights for one head.

    Edge (j -> i) scores an affine map of [W x_i || W x_j || w_ij] through a
    LeakyReLU; weights normalise with a softmax over each node's
    in-neighbourhood.
    """
    width = head.w.data.shape[0]
    h = T.matmul(x, T.transpose(head.w))           # (N, width)
    att_dst = T.gather(head.att, np.arange(width))
    att_src = T.gather(head.att, np.arange(width, 2 * width))
    att_w = T.gather(head.att, np.array([2 * width]))
    logits = (
        T.gather(T.matmul(h, att_dst), view.edge_dst)
        + T.gather(T.matmul(h, att_src), view.edge_src)
        + w_edge * att_w
    )
    attn = T.segment_softmax(T.leaky_relu(logits, leaky_slope), view.dst_offsets)
    return h, attn


def attention_coefficients(
    view: GraphBatchView,
    x: Tensor,
    head: HeadParams,
    leaky_slope: float = 0.2,
    edge_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Per-edge attention weights of one head, aligned with the view's edges."""
    w_edge = T.Tensor(view.edge_weight if edge_weights is None else edge_weights)
    _, attn = _head_attention(view, x, head, leaky_slope, w_edge)
    return attn.data


def wgat_layer(
    view: GraphBatchView,
    x: Tensor,
    layer_params: list[HeadParams],
    is_final: bool,
    leaky_slope: float = 0.2,
    head_combine: str = "concat",
    edge_weights: np.ndarray | None = None,
) -> Tensor:
    """One weighted graph attention layer.

    Each node's new feature is the ReLU of the attention-weighted sum of its
    in-neighbours' mapped features.  Head results are concatenated, except on
    the final layer (or in "mean" mode) where they are averaged before the
    ReLU.
    """
    w_edge = T.Tensor(view.edge_weight if edge_weights is None else edge_weights)
    combine_mean = is_final or head_combine == "mean"
    per_head = []
    for head in layer_params:
        h, attn = _head_attention(view, x, head, leaky_slope, w_edge)
        pooled = T.segment_weighted_sum(
            attn, T.gather(h, view.edge_src), view.dst_offsets
        )
        per_head.append(pooled)
    if combine_mean:
        total = per_head[0]
        for pooled in per_head[1:]:
            total = total + pooled
        return T.relu(total * T.Tensor(1.0 / len(per_head)))
    return T.concat([T.relu(p) for p in per_head], axis=1)


def readout(
    x: Tensor,
    view: GraphBatchView,
    gru: GRUParams,
    steps: int,
    mode: str = "mask",
) -> Tensor:
    """Recurrent attention pooling into one embedding per graph.

    Each step generates a query from the previous step's output through a
    GRU, attends over eligible nodes (core nodes only in "mask" mode, all
    nodes in "plain" mode) with dot-product scores, and concatenates the
    query with the attention-weighted feature sum.
    """
    if mode not in ("plain", "mask"):
        raise ConfigError(f"readout mode must be plain|mask, got {mode!r}")
    eligible = view.core_mask if mode == "mask" else None
    if eligible is not None and not eligible.any():
        raise ContractError("readout: no eligible nodes")
    n_graphs = view.n_graphs
    d = x.data.shape[1]
    query = T.Tensor(np.zeros((n_graphs, d)))
    state = T.Tensor(np.zeros((n_graphs, 2 * d)))
    for _ in range(steps):
        query = T.gru_cell(state, query, gru)
        per_node_query = T.gather(query, view.node_graph)
        scores = T.sum(T.mul(x, per_node_query), axis=1)
        attn = T.segment_softmax(scores, view.graph_offsets, mask=eligible)
        summary = T.segment_weighted_sum(attn, x, view.graph_offsets)
        state = T.concat([query, summary], axis=1)
    return state


def score(q_star: Tensor, params: ModelParams) -> Tensor:
    """One logit per vocabulary item: embeddings times the mapped session vector."""
    projected = T.matmul(q_star, T.transpose(params.w_out))   # (G, d)
    return T.matmul(projected, T.transpose(params.embedding))  # (G, m)


def loss(logits: Tensor, labels) -> Tensor:
    """Summed multi-class cross entropy over the batch."""
    return T.log_softmax_nll(logits, labels)


def forward_logits(view: GraphBatchView, params: ModelParams, config: ModelConfig) -> Tensor:
    """Raw scores for a batch view, shape (graphs, vocabulary)."""
    x = embed(view.nodes, params)
    edge_w = np.log1p(view.edge_weight) if config.log_edge_weights else view.edge_weight
    for li, layer in enumerate(params.layers):
        x = wgat_layer(
            view,
            x,
            layer,
            is_final=(li == len(params.layers) - 1),
            leaky_slope=config.leaky_slope,
            head_combine=config.head_combine,
            edge_weights=edge_w,
        )
    q_star = readout(x, view, params.gru, config.readout_steps, config.readout_mode)
    return score(q_star, params)


def forward(graph: BCSGraph, params: ModelParams, config: ModelConfig) -> Tensor:
    """Next-item probability distribution for a single session graph."""
    view = GraphBatchView.from_graphs([graph])
    probs = T.softmax(forward_logits(view, params, config))
    # single row; summing over the graph axis just squeezes it
    return T.sum(probs, axis=0)
