"""GNN layers (GCN, GAT, max-aggregation MPNN, E(3)-equivariant MPNN),
per-graph normalization, max pooling and the full model assemblies.

Layer functions take node features as :class:`~metagnn.tensor.Tensor` and a
``params`` mapping of tensors keyed by *relative* names (``"weight"``,
``"psi.lin1.bias"`` ...). Every per-channel vector parameter is stored as a
``(1, d)`` row so it can be expanded to node rows with ``gather``.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .graphs import Graph
from .tensor import ParamSet, Tape, Tensor, apply_primitive as op, backward, constant

KINDS = ("gcn", "gat", "mpnn", "egnn")
GAT_SLOPE = 0.2
NORM_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class Architecture:
    kind: str
    d_node: int
    d_edge: int = 0
    hidden_dim: int = 64
    num_layers: int = 3

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown architecture {self.kind!r}; expected one of {KINDS}")
        if self.hidden_dim < 1 or self.num_layers < 1:
            raise ContractError("hidden_dim and num_layers must be >= 1")
        if self.d_node < 1 or self.d_edge < 0:
            raise ContractError("d_node must be >= 1 and d_edge >= 0")

    @property
    def uses_coords(self) -> bool:
        return self.kind == "egnn"

    def to_dict(self) -> dict:
        return {"hidden_dim": self.hidden_dim, "num_layers": self.num_layers,
                "d_node": self.d_node, "d_edge": self.d_edge}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Architecture plus trainable ``params`` and batch-norm running ``buffers``."""

    arch: Architecture
    params: ParamSet
    buffers: ParamSet = field(default_factory=ParamSet)

    def with_params(self, params: ParamSet, buffers: ParamSet | None = None) -> ModelParams:
        return ModelParams(self.arch, params, self.buffers if buffers is None else buffers)

    def equals(self, other: ModelParams) -> bool:
        return self.arch == other.arch and self.params == other.params and self.buffers == other.buffers


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Several graphs stacked into one disconnected graph.

    Each undirected edge appears twice as directed edges ``src -> dst``;
    messages flow from ``src`` (neighbour j) to ``dst`` (receiver i).
    """

    node_feats: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    edge_feats: np.ndarray
    graph_index: np.ndarray
    num_graphs: int
    coords: np.ndarray | None = None
    labels: np.ndarray | None = None

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph], labels=None) -> GraphBatch:
        if not graphs:
            raise ContractError("cannot batch zero graphs")
        offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
        src, dst, efeat = [], [], []
        for off, g in zip(offsets, graphs):
            if len(g.edges):
                i, j = g.edges[:, 0] + off, g.edges[:, 1] + off
                src += [i, j]
                dst += [j, i]
                efeat += [g.edge_feats, g.edge_feats]
        d_edge = graphs[0].d_edge
        has_coords = all(g.coords is not None for g in graphs)
        return cls(
            node_feats=np.concatenate([g.node_feats for g in graphs]),
            src=np.concatenate(src) if src else np.zeros(0, dtype=np.int64),
            dst=np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64),
            edge_feats=np.concatenate(efeat) if efeat else np.zeros((0, d_edge)),
            graph_index=np.repeat(np.arange(len(graphs)), [g.num_nodes for g in graphs]),
            num_graphs=len(graphs),
            coords=np.concatenate([g.coords for g in graphs]) if has_coords else None,
            labels=None if labels is None else np.asarray(labels, dtype=np.float64).reshape(-1),
        )

    @property
    def num_nodes(self) -> int:
        return self.node_feats.shape[0]

    def in_degree(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.num_nodes).astype(np.float64)

    def nodes_per_graph(self) -> np.ndarray:
        return np.bincount(self.graph_index, minlength=self.num_graphs).astype(np.float64)


# ---------------------------------------------------------------------------
# small building blocks


def _sub(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    prefix = prefix + "."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def _expand_row(row: Tensor, n: int) -> Tensor:
    """Repeat a (1, d) row ``n`` times."""
    return op("gather", [row], rows=np.zeros(n, dtype=np.int64))


def _expand_col(col: Tensor, width: int) -> Tensor:
    """Repeat an (n, 1) column across ``width`` channels."""
    return op("matmul", [col, constant(np.ones((1, width)))])


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = op("matmul", [x, weight])
    return out if bias is None else op("add", [out, bias])


def batch_norm(x: Tensor, p: Mapping[str, Tensor], name: str, *, training: bool,
               buffers: Mapping[str, np.ndarray] | None, stats: dict | None) -> Tensor:
    """Batch normalization over rows with affine ``scale``/``shift``.

    Training mode normalizes with the rows' own mean and population variance
    and reports them through ``stats``; evaluation mode uses running buffers.
    """
    n, d = x.shape
    if n == 0:
        return x
    if training:
        avg = constant(np.full((1, n), 1.0 / n))
        mean = op("matmul", [avg, x])
        centered = op("sub", [x, mean])
        var = op("matmul", [avg, op("square", [centered])])
        if stats is not None:
            stats[name] = (mean.data.copy(), var.data.copy())
    else:
        if buffers is None or f"{name}.running_mean" not in buffers:
            raise ContractError(f"evaluation mode needs running statistics for {name!r}")
        centered = op("sub", [x, constant(buffers[f"{name}.running_mean"])])
        var = constant(buffers[f"{name}.running_var"])
    std = op("sqrt", [op("add", [var, constant(np.full((1, d), NORM_EPS))])])
    normed = op("div", [centered, _expand_row(std, n)])
    scaled = op("mul", [normed, _expand_row(p["scale"], n)])
    return op("add", [scaled, p["shift"]])


def mlp(x: Tensor, p: Mapping[str, Tensor], name: str, **bn_kwargs) -> Tensor:
    """Linear -> BatchNorm -> ReLU -> Linear."""
    h = linear(x, p["lin1.weight"], p["lin1.bias"])
    h = batch_norm(h, _sub(p, "bn"), f"{name}.bn", **bn_kwargs)
    h = op("relu", [h])
    return linear(h, p["lin2.weight"], p["lin2.bias"])


# ---------------------------------------------------------------------------
# layers


def gcn_layer(H: Tensor, batch: GraphBatch, weight: Tensor, bias: Tensor) -> Tensor:
    """``D^-1/2 (A + I) D^-1/2 H W + b`` with degrees counted including the self-loop."""
    n = batch.num_nodes
    deg = batch.in_degree() + 1.0
    hw = op("matmul", [H, weight])
    width = hw.shape[1]
    edge_coef = 1.0 / np.sqrt(deg[batch.src] * deg[batch.dst])
    msgs = op("mul", [op("gather", [hw], rows=batch.src),
                      constant(np.repeat(edge_coef[:, None], width, axis=1))])
    agg = op("segment_sum", [msgs], segment_ids=batch.dst, num_segments=n)
    own = op("mul", [hw, constant(np.repeat((1.0 / deg)[:, None], width, axis=1))])
    return op("add", [op("add", [agg, own]), bias])


def gat_layer(H: Tensor, batch: GraphBatch, p: Mapping[str, Tensor], slope: float = GAT_SLOPE) -> Tensor:
    """Single-head attention over each node's neighbours plus itself.

    ``score(i, j) = leaky_relu(att_self . Wh_i + att_neigh . Wh_j)``,
    normalized by a softmax over ``j`` for every receiver ``i``.
    """
    n = batch.num_nodes
    loops = np.arange(n)
    src = np.concatenate([batch.src, loops])
    dst = np.concatenate([batch.dst, loops])
    wh = op("matmul", [H, p["weight"]])
    width = wh.shape[1]
    s_self = op("matmul", [wh, p["att_self"]])
    s_neigh = op("matmul", [wh, p["att_neigh"]])
    score = op("add", [op("gather", [s_self], rows=dst), op("gather", [s_neigh], rows=src)])
    score = op("leaky_relu", [score], slope=slope)
    alpha = op("softmax_over_segments", [score], segment_ids=dst, num_segments=n)
    msgs = op("mul", [op("gather", [wh], rows=src), _expand_col(alpha, width)])
    out = op("segment_sum", [msgs], segment_ids=dst, num_segments=n)
    return op("add", [out, p["bias"]])


def mpnn_layer(H: Tensor, batch: GraphBatch, p: Mapping[str, Tensor], name: str = "mp",
               **bn_kwargs) -> Tensor:
    """``h'_i = phi([h_i | max_j psi([h_i | h_j | e_ij])])``; no neighbours -> zero message."""
    n = batch.num_nodes
    inputs = op("concat", [op("gather", [H], rows=batch.dst), op("gather", [H], rows=batch.src),
                           constant(batch.edge_feats)], axis=1)
    msgs = mlp(inputs, _sub(p, "psi"), f"{name}.psi", **bn_kwargs)
    agg = op("segment_max", [msgs], segment_ids=batch.dst, num_segments=n)
    return mlp(op("concat", [H, agg], axis=1), _sub(p, "phi"), f"{name}.phi", **bn_kwargs)


def egnn_layer(H: Tensor, X: Tensor, batch: GraphBatch, p: Mapping[str, Tensor], name: str = "eg",
               **bn_kwargs) -> tuple[Tensor, Tensor]:
    """Equivariant message passing; returns updated features and coordinates.

    Messages see coordinates only through ``|x_i - x_j|^2``; each node moves
    by the neighbour mean of ``(x_i - x_j) * psi_x(m_ij)``.
    """
    n = batch.num_nodes
    diff = op("sub", [op("gather", [X], rows=batch.dst), op("gather", [X], rows=batch.src)])
    dist2 = op("matmul", [op("square", [diff]), constant(np.ones((3, 1)))])
    inputs = op("concat", [op("gather", [H], rows=batch.dst), op("gather", [H], rows=batch.src),
                           dist2, constant(batch.edge_feats)], axis=1)
    msgs = mlp(inputs, _sub(p, "psi"), f"{name}.psi", **bn_kwargs)

    gate = op("relu", [linear(msgs, p["coord.lin1.weight"], p["coord.lin1.bias"])])
    gate = linear(gate, p["coord.lin2.weight"], p["coord.lin2.bias"])
    shift = op("mul", [diff, _expand_col(gate, 3)])
    deg = batch.in_degree()
    inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    shift = op("segment_sum", [shift], segment_ids=batch.dst, num_segments=n)
    X_new = op("add", [X, op("mul", [shift, constant(np.repeat(inv_deg[:, None], 3, axis=1))])])

    agg = op("segment_max", [msgs], segment_ids=batch.dst, num_segments=n)
    H_new = mlp(op("concat", [H, agg], axis=1), _sub(p, "phi"), f"{name}.phi", **bn_kwargs)
    return H_new, X_new


def graph_norm(H: Tensor, graph_index: np.ndarray, num_graphs: int, scale: Tensor, shift: Tensor,
               eps: float = NORM_EPS) -> Tensor:
    """Standardize every channel within each graph, then apply ``scale``/``shift``."""
    n, d = H.shape
    inv_count = 1.0 / np.bincount(graph_index, minlength=num_graphs).astype(np.float64)
    inv_count = constant(np.repeat(inv_count[:, None], d, axis=1))
    seg = dict(segment_ids=graph_index, num_segments=num_graphs)
    mean = op("mul", [op("segment_sum", [H], **seg), inv_count])
    centered = op("sub", [H, op("gather", [mean], rows=graph_index)])
    var = op("mul", [op("segment_sum", [op("square", [centered])], **seg), inv_count])
    std = op("sqrt", [op("add", [var, constant(np.full(var.shape, eps))])])
    normed = op("div", [centered, op("gather", [std], rows=graph_index)])
    return op("add", [op("mul", [normed, _expand_row(scale, n)]), shift])


def global_max_pool(H: Tensor, graph_index: np.ndarray, num_graphs: int) -> Tensor:
    return op("segment_max", [H], segment_ids=graph_index, num_segments=num_graphs)


# ---------------------------------------------------------------------------
# parameter tables and initialization


def _mlp_shapes(prefix, d_in, hidden, d_out):
    return [
        (f"{prefix}.lin1.weight", (d_in, hidden)),
        (f"{prefix}.lin1.bias", (1, hidden)),
        (f"{prefix}.bn.scale", (1, hidden)),
        (f"{prefix}.bn.shift", (1, hidden)),
        (f"{prefix}.lin2.weight", (hidden, d_out)),
        (f"{prefix}.lin2.bias", (1, d_out)),
    ]


def param_shapes(arch: Architecture) -> list[tuple[str, tuple[int, int]]]:
    """Ordered (name, shape) table; a pure function of the architecture."""
    h, L = arch.hidden_dim, arch.num_layers
    shapes = []
    if arch.kind in ("gcn", "gat"):
        widths = [arch.d_node] + [h] * (L - 1) + [1]
        for l in range(L):
            d_in, d_out = widths[l], widths[l + 1]
            shapes.append((f"layer{l}.weight", (d_in, d_out)))
            if arch.kind == "gat":
                shapes.append((f"layer{l}.att_self", (d_out, 1)))
                shapes.append((f"layer{l}.att_neigh", (d_out, 1)))
            shapes.append((f"layer{l}.bias", (1, d_out)))
            if l < L - 1:
                shapes.append((f"norm{l}.scale", (1, d_out)))
                shapes.append((f"norm{l}.shift", (1, d_out)))
        return shapes
    d_in = arch.d_node
    extra = 1 if arch.kind == "egnn" else 0
    for l in range(L):
        shapes += _mlp_shapes(f"layer{l}.psi", 2 * d_in + extra + arch.d_edge, h, h)
        if arch.kind == "egnn":
            shapes += [
                (f"layer{l}.coord.lin1.weight", (h, h)),
                (f"layer{l}.coord.lin1.bias", (1, h)),
                (f"layer{l}.coord.lin2.weight", (h, 1)),
                (f"layer{l}.coord.lin2.bias", (1, 1)),
            ]
        shapes += _mlp_shapes(f"layer{l}.phi", d_in + h, h, h)
        d_in = h
    shapes += [("head.weight", (h, 1)), ("head.bias", (1, 1))]
    return shapes


def buffer_shapes(arch: Architecture) -> list[tuple[str, tuple[int, int]]]:
    out = []
    for name, shape in param_shapes(arch):
        if name.endswith(".bn.scale"):
            base = name[: -len(".scale")]
            out += [(f"{base}.running_mean", shape), (f"{base}.running_var", shape)]
    return out


def model_init(arch: Architecture, seed: int | Sequence[int] = 0) -> ModelParams:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases and shifts 0; scales 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(arch):
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("weight", "att_self", "att_neigh"):
            bound = np.sqrt(1.0 / shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "scale":
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    buffers = {}
    for name, shape in buffer_shapes(arch):
        buffers[name] = np.zeros(shape) if name.endswith("running_mean") else np.ones(shape)
    return ModelParams(arch, ParamSet(params), ParamSet(buffers))


# ---------------------------------------------------------------------------
# full models


def check_batch(arch: Architecture, batch: GraphBatch):
    if batch.node_feats.shape[1] != arch.d_node:
        raise ContractError(f"batch has node width {batch.node_feats.shape[1]}, model expects {arch.d_node}")
    if batch.edge_feats.shape[1] != arch.d_edge:
        raise ContractError(f"batch has edge width {batch.edge_feats.shape[1]}, model expects {arch.d_edge}")
    if arch.uses_coords and batch.coords is None:
        raise ContractError("egnn needs node coordinates")


def forward(arch: Architecture, weights: Mapping[str, Tensor], batch: GraphBatch, *,
            training: bool = True, buffers: Mapping[str, np.ndarray] | None = None,
            stats: dict | None = None) -> Tensor:
    """Predictions of shape ``(num_graphs, 1)``.

    ``weights`` may be tape leaves (for gradients) or constants. In
    training mode batch statistics are written into ``stats`` when given.
    """
    check_batch(arch, batch)
    bn = dict(training=training, buffers=buffers, stats=stats)
    H = constant(batch.node_feats)
    gi, G = batch.graph_index, batch.num_graphs
    L = arch.num_layers
    if arch.kind in ("gcn", "gat"):
        for l in range(L):
            if arch.kind == "gcn":
                H = gcn_layer(H, batch, weights[f"layer{l}.weight"], weights[f"layer{l}.bias"])
            else:
                H = gat_layer(H, batch, _sub(weights, f"layer{l}"))
            if l < L - 1:
                H = graph_norm(H, gi, G, weights[f"norm{l}.scale"], weights[f"norm{l}.shift"])
                H = op("relu", [H])
        return global_max_pool(H, gi, G)

    X = constant(batch.coords) if arch.kind == "egnn" else None
    for l in range(L):
        p = _sub(weights, f"layer{l}")
        if arch.kind == "mpnn":
            H = mpnn_layer(H, batch, p, name=f"layer{l}", **bn)
        else:
            H, X = egnn_layer(H, X, batch, p, name=f"layer{l}", **bn)
    pooled = global_max_pool(H, gi, G)
    return linear(pooled, weights["head.weight"], weights["head.bias"])


def forward_with_coords(mp: ModelParams, batch: GraphBatch, *, training: bool = True):
    """Final node features and coordinates of an egnn stack (for equivariance checks)."""
    if mp.arch.kind != "egnn":
        raise ContractError("coordinates are only produced by egnn models")
    check_batch(mp.arch, batch)
    weights = {k: constant(v) for k, v in mp.params.items()}
    bn = dict(training=training, buffers=mp.buffers, stats=None)
    H, X = constant(batch.node_feats), constant(batch.coords)
    for l in range(mp.arch.num_layers):
        H, X = egnn_layer(H, X, batch, _sub(weights, f"layer{l}"), name=f"layer{l}", **bn)
    return H.data, X.data


def model_forward(mp: ModelParams, batch: GraphBatch, training: bool = True) -> np.ndarray:
    """One prediction per graph as a flat array (no gradient recording)."""
    weights = {k: constant(v) for k, v in mp.params.items()}
    return forward(mp.arch, weights, batch, training=training, buffers=mp.buffers).data.reshape(-1)


def mse(pred: Tensor, labels) -> Tensor:
    target = constant(np.asarray(labels, dtype=np.float64).reshape(pred.shape))
    return op("mean_reduce", [op("square", [op("sub", [pred, target])])])


def updated_buffers(buffers: ParamSet, stats: Mapping[str, tuple], momentum: float = BN_MOMENTUM) -> ParamSet:
    """Exponential running averages of batch statistics (population variance)."""
    if not stats:
        return buffers
    new = dict(buffers.items())
    for name, (mean, var) in stats.items():
        new[f"{name}.running_mean"] = (1 - momentum) * buffers[f"{name}.running_mean"] + momentum * mean
        new[f"{name}.running_var"] = (1 - momentum) * buffers[f"{name}.running_var"] + momentum * var
    return ParamSet(new)


def loss_and_grads(mp: ModelParams, batch: GraphBatch, labels, training: bool = True):
    """MSE of ``mp`` on ``batch`` with its gradient and refreshed running statistics."""
    tape = Tape()
    leaves = tape.watch(mp.params)
    stats = {} if training else None
    pred = forward(mp.arch, leaves, batch, training=training, buffers=mp.buffers, stats=stats)
    loss = mse(pred, labels)
    grads = backward(loss, leaves)
    return loss.item(), grads, updated_buffers(mp.buffers, stats or {})
