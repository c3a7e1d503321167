"""Self-checks shared by the CLI and the test-suite: gradients and symmetries."""

from __future__ import annotations

import numpy as np

from .graphs import Graph, random_tree
from .layers import Architecture, GraphBatch, ModelParams, forward, forward_with_coords, model_forward, model_init, mse
from .tensor import finite_diff_check


def random_graph(n: int, d_node: int, d_edge: int, rng: np.random.Generator, *,
                 coords: bool = False, extra_edges: int = 2) -> Graph:
    """Connected random graph: a random spanning tree plus a few extra edges."""
    edges = set(random_tree(n, rng))
    max_edges = n * (n - 1) // 2
    while extra_edges > 0 and len(edges) < max_edges:
        i, j = sorted(int(v) for v in rng.choice(n, size=2, replace=False))
        if (i, j) not in edges:
            edges.add((i, j))
            extra_edges -= 1
    edges = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return Graph(
        num_nodes=n,
        node_feats=rng.normal(size=(n, d_node)),
        edges=edges,
        edge_feats=rng.normal(size=(len(edges), d_edge)),
        targets=rng.normal(size=1),
        coords=rng.normal(size=(n, 3)) if coords else None,
    )


def random_orthogonal(rng: np.random.Generator) -> np.ndarray:
    """Haar-random 3x3 orthogonal matrix (rotations and reflections)."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    return q * np.sign(np.diag(r))


def gradcheck(arch: Architecture, seed: int = 0, num_nodes: int = 6, probes: int = 100) -> float:
    """Max relative error of analytic vs central-difference gradients on one graph."""
    rng = np.random.default_rng([seed, 7])
    g = random_graph(num_nodes, arch.d_node, arch.d_edge, rng, coords=arch.uses_coords)
    batch = GraphBatch.from_graphs([g], g.targets)
    mp = model_init(arch, seed)

    def loss_fn(weights):
        return mse(forward(arch, weights, batch, training=True, buffers=mp.buffers), batch.labels)

    return finite_diff_check(loss_fn, mp.params, probe_count=probes, seed=seed)


def _batch(graphs):
    return GraphBatch.from_graphs(graphs)


def permutation_deviation(arch: Architecture, seed: int = 0, trials: int = 50) -> float:
    """Largest prediction change under random node relabelings of a two-graph batch."""
    rng = np.random.default_rng([seed, 11])
    mp = model_init(arch, seed)
    graphs = [random_graph(int(rng.integers(5, 11)), arch.d_node, arch.d_edge, rng,
                           coords=arch.uses_coords, extra_edges=3) for _ in range(2)]
    base = model_forward(mp, _batch(graphs))
    worst = 0.0
    for _ in range(trials):
        moved = [g.permuted(rng.permutation(g.num_nodes)) for g in graphs]
        worst = max(worst, float(np.max(np.abs(model_forward(mp, _batch(moved)) - base))))
    return worst


def e3_deviation(mp: ModelParams, seed: int = 0, trials: int = 20) -> tuple[float, float]:
    """Deviations of scalar outputs and egnn coordinates under x -> xQ + t.

    The second value is 0 for architectures that emit no coordinates.
    """
    arch = mp.arch
    rng = np.random.default_rng([seed, 13])
    graphs = [random_graph(int(rng.integers(5, 11)), arch.d_node, arch.d_edge, rng,
                           coords=True, extra_edges=3) for _ in range(2)]
    batch = _batch(graphs)
    base = model_forward(mp, batch)
    base_x = forward_with_coords(mp, batch)[1] if arch.uses_coords else None
    scalar_dev = coord_dev = 0.0
    for _ in range(trials):
        q, t = random_orthogonal(rng), rng.normal(size=(1, 3))
        moved = _batch([g.with_coords(g.coords @ q + t) for g in graphs])
        scalar_dev = max(scalar_dev, float(np.max(np.abs(model_forward(mp, moved) - base))))
        if base_x is not None:
            x = forward_with_coords(mp, moved)[1]
            coord_dev = max(coord_dev, float(np.max(np.abs(x - (base_x @ q + t)))))
    return scalar_dev, coord_dev
