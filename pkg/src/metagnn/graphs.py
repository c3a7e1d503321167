"""Graphs, datasets, the JSON-Lines file format, splits, label normalization,
support sampling and the synthetic task family."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateDataError, ParseError, SchemaError

FORMAT_TAG = "meta-gnn-graphs-v1"
SUMMARY_DIM = 6


@dataclass(frozen=True, eq=False)
class Graph:
    """One undirected graph; each edge is stored once as ``(i, j)`` with ``i < j``."""

    num_nodes: int
    node_feats: np.ndarray
    edges: np.ndarray
    edge_feats: np.ndarray
    targets: np.ndarray
    coords: np.ndarray | None = None
    id: str = ""

    def __post_init__(self):
        node_feats = np.asarray(self.node_feats, dtype=np.float64).reshape(self.num_nodes, -1)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        edge_feats = np.asarray(self.edge_feats, dtype=np.float64)
        if edge_feats.ndim != 2:
            edge_feats = edge_feats.reshape(len(edges), -1)
        object.__setattr__(self, "node_feats", node_feats)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_feats", edge_feats)
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=np.float64).reshape(-1))
        if self.coords is not None:
            object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.float64).reshape(self.num_nodes, 3))
        self.validate()

    def validate(self):
        if self.num_nodes < 1:
            raise SchemaError(f"graph {self.id!r}: needs at least one node")
        if len(self.edges):
            i, j = self.edges[:, 0], self.edges[:, 1]
            if np.any(i < 0) or np.any(j >= self.num_nodes):
                raise SchemaError(f"graph {self.id!r}: edge endpoint out of range")
            if np.any(i >= j):
                raise SchemaError(f"graph {self.id!r}: edges must satisfy i < j (no self-loops)")
            if len({(int(a), int(b)) for a, b in self.edges}) != len(self.edges):
                raise SchemaError(f"graph {self.id!r}: duplicate edge")
        if self.edge_feats.shape[0] != len(self.edges):
            raise SchemaError(f"graph {self.id!r}: edge_feats rows != edge count")

    @property
    def d_node(self) -> int:
        return self.node_feats.shape[1]

    @property
    def d_edge(self) -> int:
        return self.edge_feats.shape[1]

    def permuted(self, perm) -> Graph:
        """Relabel nodes so that old node ``perm[k]`` becomes node ``k``."""
        perm = np.asarray(perm)
        inverse = np.empty_like(perm)
        inverse[perm] = np.arange(len(perm))
        mapped = inverse[self.edges] if len(self.edges) else self.edges
        lo, hi = np.minimum(mapped[:, 0], mapped[:, 1]), np.maximum(mapped[:, 0], mapped[:, 1])
        return Graph(
            num_nodes=self.num_nodes,
            node_feats=self.node_feats[perm],
            edges=np.stack([lo, hi], axis=1),
            edge_feats=self.edge_feats,
            targets=self.targets,
            coords=None if self.coords is None else self.coords[perm],
            id=self.id,
        )

    def with_coords(self, coords) -> Graph:
        return Graph(self.num_nodes, self.node_feats, self.edges, self.edge_feats,
                     self.targets, coords, self.id)

    def equals(self, other: Graph) -> bool:
        same_coords = (self.coords is None and other.coords is None) or (
            self.coords is not None and other.coords is not None
            and np.array_equal(self.coords, other.coords)
        )
        return (
            self.id == other.id
            and self.num_nodes == other.num_nodes
            and np.array_equal(self.node_feats, other.node_feats)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.edge_feats, other.edge_feats)
            and np.array_equal(self.targets, other.targets)
            and same_coords
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    graphs: list[Graph]
    task_names: list[str]
    d_node: int
    d_edge: int
    has_coords: bool

    def __post_init__(self):
        for k, g in enumerate(self.graphs):
            if g.d_node != self.d_node or g.d_edge != self.d_edge:
                raise SchemaError(
                    f"graph {k}: widths ({g.d_node}, {g.d_edge}) differ from dataset "
                    f"({self.d_node}, {self.d_edge})"
                )
            if len(g.targets) != self.num_tasks:
                raise SchemaError(f"graph {k}: {len(g.targets)} targets, dataset declares {self.num_tasks}")
            if (g.coords is not None) != self.has_coords:
                raise SchemaError(f"graph {k}: coordinate presence disagrees with header")

    def __len__(self):
        return len(self.graphs)

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    def task_index(self, name_or_index) -> int:
        if isinstance(name_or_index, str) and name_or_index in self.task_names:
            return self.task_names.index(name_or_index)
        idx = int(name_or_index)
        if not 0 <= idx < self.num_tasks:
            raise ContractError(f"task index {idx} outside [0, {self.num_tasks})")
        return idx

    def labels(self, indices=None) -> np.ndarray:
        """Target matrix (graphs x tasks) for ``indices`` (all graphs by default)."""
        idx = range(len(self.graphs)) if indices is None else indices
        return np.array([self.graphs[i].targets for i in idx]).reshape(-1, self.num_tasks)

    def equals(self, other: Dataset) -> bool:
        return (
            self.task_names == other.task_names
            and (self.d_node, self.d_edge, self.has_coords) == (other.d_node, other.d_edge, other.has_coords)
            and len(self.graphs) == len(other.graphs)
            and all(a.equals(b) for a, b in zip(self.graphs, other.graphs))
        )


# ---------------------------------------------------------------------------
# file format


def _graph_record(g: Graph, has_coords: bool) -> dict:
    rec = {
        "id": g.id,
        "num_nodes": g.num_nodes,
        "node_feats": g.node_feats.tolist(),
        "edges": g.edges.tolist(),
        "edge_feats": g.edge_feats.tolist(),
    }
    if has_coords:
        rec["coords"] = g.coords.tolist()
    rec["targets"] = g.targets.tolist()
    return rec


def save_dataset(ds: Dataset, path) -> None:
    header = {
        "format": FORMAT_TAG,
        "task_names": list(ds.task_names),
        "d_node": ds.d_node,
        "d_edge": ds.d_edge,
        "has_coords": ds.has_coords,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for g in ds.graphs:
            fh.write(json.dumps(_graph_record(g, ds.has_coords)) + "\n")


def _matrix(value, rows, cols, what, line):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise ParseError(f"{what} is not a numeric matrix", line) from None
    if rows == 0 and arr.size == 0:
        return np.zeros((0, cols))
    if arr.shape != (rows, cols):
        raise SchemaError(f"line {line}: {what} has shape {arr.shape}, expected {(rows, cols)}")
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"{what} contains non-finite values", line)
    return arr


def load_dataset(path) -> Dataset:
    """Read a JSON-Lines dataset file; see :func:`save_dataset` for the layout."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError("empty file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not JSON ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise ParseError(f"header must declare format {FORMAT_TAG!r}", 1)
    try:
        task_names = [str(t) for t in header["task_names"]]
        d_node, d_edge = int(header["d_node"]), int(header["d_edge"])
        has_coords = bool(header["has_coords"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header field ({exc})", 1) from None

    graphs = []
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        try:
            rec = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"not JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise ParseError("graph record must be an object", lineno)
        try:
            n = int(rec["num_nodes"])
            edges = np.asarray(rec["edges"], dtype=np.int64).reshape(-1, 2)
            targets = np.asarray(rec["targets"], dtype=np.float64)
            node_feats = rec["node_feats"]
            edge_feats = rec["edge_feats"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"missing or malformed field ({exc})", lineno) from None
        if ("coords" in rec) != has_coords:
            raise SchemaError(f"line {lineno}: coords must be present iff has_coords")
        coords = _matrix(rec["coords"], n, 3, "coords", lineno) if has_coords else None
        if targets.shape != (len(task_names),):
            raise SchemaError(f"line {lineno}: expected {len(task_names)} targets, got {targets.size}")
        try:
            graphs.append(Graph(
                num_nodes=n,
                node_feats=_matrix(node_feats, n, d_node, "node_feats", lineno),
                edges=edges,
                edge_feats=_matrix(edge_feats, len(edges), d_edge, "edge_feats", lineno),
                targets=targets,
                coords=coords,
                id=str(rec.get("id", lineno - 1)),
            ))
        except SchemaError as exc:
            raise SchemaError(f"line {lineno}: {exc}") from None
    return Dataset(graphs, task_names, d_node, d_edge, has_coords)


# ---------------------------------------------------------------------------
# splits and normalization


def split_dataset(ds: Dataset | int, train_fraction: float = 0.9, seed: int = 0):
    """Random partition into ``ceil(N*f)`` train and the remaining test indices."""
    n = ds if isinstance(ds, int) else len(ds)
    if n < 2:
        raise ContractError("need at least two graphs to split")
    if not 0.0 < train_fraction < 1.0:
        raise ContractError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = min(math.ceil(n * train_fraction), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0.0:
            raise DegenerateDataError(f"normalizer std must be positive, got {self.std}")

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


def zscore_fit(ds: Dataset, train_indices) -> Normalizer:
    """Pooled mean and population std over every task label of the train split."""
    pooled = ds.labels(train_indices).reshape(-1)
    if pooled.size < 2:
        raise ContractError("need at least two labels to fit a normalizer")
    mean = float(np.mean(pooled))
    std = float(np.sqrt(np.mean((pooled - mean) ** 2)))
    if std == 0.0 or std <= 1e-15 * max(1.0, abs(mean)):
        raise DegenerateDataError("labels are constant; standard deviation is zero")
    return Normalizer(mean, std)


def zscore_apply(n: Normalizer, y):
    return n.apply(y)


def zscore_invert(n: Normalizer, z):
    return n.invert(z)


# ---------------------------------------------------------------------------
# tasks and support sampling


@dataclass(frozen=True)
class Task:
    target_index: int
    split: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "split", np.asarray(self.split, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class SupportBatch:
    graphs: list[Graph]
    labels: np.ndarray
    indices: np.ndarray
    target_index: int

    def __len__(self):
        return len(self.graphs)


def make_batch(ds: Dataset, indices, target_index: int, normalizer: Normalizer) -> SupportBatch:
    indices = np.asarray(indices, dtype=np.int64)
    graphs = [ds.graphs[i] for i in indices]
    raw = np.array([g.targets[target_index] for g in graphs])
    return SupportBatch(graphs, normalizer.apply(raw), indices, target_index)


def sample_support(ds: Dataset, task: Task, k: int, rng: np.random.Generator,
                   normalizer: Normalizer) -> SupportBatch:
    """Draw ``k`` distinct graphs of ``task.split`` with normalized labels."""
    if k < 1:
        raise ContractError("support size must be >= 1")
    if len(task.split) < k:
        raise ContractError(f"split has {len(task.split)} graphs, need {k}")
    chosen = rng.choice(task.split, size=k, replace=False)
    return make_batch(ds, chosen, task.target_index, normalizer)


def child_rng(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for ``(seed, *path)``, e.g. one per trial."""
    return np.random.default_rng([int(seed), *map(int, path)])


# ---------------------------------------------------------------------------
# synthetic task family


@dataclass(frozen=True)
class SynthSpec:
    num_graphs: int = 500
    nodes_min: int = 5
    nodes_max: int = 15
    d_node: int = 4
    d_edge: int = 2
    num_tasks: int = 8
    coords: bool = False
    extra_edge_fraction: float = 0.3
    task_spread: float = 0.35
    offset_spread: float = 0.3


def random_tree(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """Uniformly random labelled spanning tree of K_n via a Prüfer sequence."""
    if n == 1:
        return []
    if n == 2:
        return [(0, 1)]
    seq = rng.integers(0, n, size=n - 2)
    degree = np.ones(n, dtype=np.int64)
    np.add.at(degree, seq, 1)
    edges = []
    for v in seq:
        leaf = int(np.flatnonzero(degree == 1)[0])
        edges.append((min(leaf, int(v)), max(leaf, int(v))))
        degree[leaf] -= 1
        degree[v] -= 1
    u, w = np.flatnonzero(degree == 1)
    edges.append((int(u), int(w)))
    return edges


def graph_summary(g: Graph, nodes_max: int) -> np.ndarray:
    """Fixed 6-dim descriptor that the synthetic targets are linear in."""
    norms = np.linalg.norm(g.node_feats, axis=1)
    n_edges = len(g.edges)
    edge_norm = float(np.mean(np.linalg.norm(g.edge_feats, axis=1))) if n_edges and g.d_edge else 0.0
    if g.coords is not None and g.num_nodes > 1:
        diff = g.coords[:, None, :] - g.coords[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        mean_dist = float(dist[np.triu_indices(g.num_nodes, 1)].mean())
    else:
        mean_dist = 0.0
    return np.array([
        norms.mean(),
        norms.max(),
        n_edges / g.num_nodes,
        edge_norm,
        mean_dist,
        g.num_nodes / nodes_max,
    ])


def synth_generate(spec: SynthSpec, seed: int = 0) -> Dataset:
    """Random connected graphs whose task labels are related linear readouts.

    Every task ``t`` labels a graph with ``c_t . s(G) + b_t`` where ``s`` is
    :func:`graph_summary`. The ``c_t`` scatter around one shared direction
    drawn per dataset, so the tasks are correlated but distinct.
    """
    if spec.num_tasks < 2:
        raise ContractError("need at least two tasks (training tasks plus a held-out one)")
    if spec.nodes_min < 1 or spec.nodes_min > spec.nodes_max:
        raise ContractError(f"invalid node range {spec.nodes_min}..{spec.nodes_max}")
    if spec.num_graphs < 1:
        raise ContractError("num_graphs must be >= 1")
    rng = np.random.default_rng(seed)
    shared = rng.normal(size=SUMMARY_DIM)
    coef = shared + spec.task_spread * rng.normal(size=(spec.num_tasks, SUMMARY_DIM))
    offsets = spec.offset_spread * rng.normal(size=spec.num_tasks)

    raw = []
    for k in range(spec.num_graphs):
        n = int(rng.integers(spec.nodes_min, spec.nodes_max + 1))
        edges = set(random_tree(n, rng))
        n_extra = int(round(spec.extra_edge_fraction * n))
        max_edges = n * (n - 1) // 2
        while n_extra > 0 and len(edges) < max_edges:
            i, j = (int(v) for v in rng.choice(n, size=2, replace=False))
            if (min(i, j), max(i, j)) not in edges:
                edges.add((min(i, j), max(i, j)))
                n_extra -= 1
        edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
        node_feats = rng.normal(size=(n, spec.d_node))
        edge_feats = rng.normal(size=(len(edges), spec.d_edge))
        coords = rng.normal(size=(n, 3)) if spec.coords else None
        raw.append(Graph(n, node_feats, edges, edge_feats, np.zeros(spec.num_tasks), coords, id=f"g{k}"))

    summary = np.array([graph_summary(g, spec.nodes_max) for g in raw])
    targets = summary @ coef.T + offsets
    graphs = [Graph(g.num_nodes, g.node_feats, g.edges, g.edge_feats, y, g.coords, g.id)
              for g, y in zip(raw, targets)]
    names = [f"task_{t}" for t in range(spec.num_tasks)]
    return Dataset(graphs, names, spec.d_node, spec.d_edge, spec.coords)
