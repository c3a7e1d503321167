import numpy as np
import pytest

from metagnn.graphs import Graph, SynthSpec, split_dataset, synth_generate, zscore_fit


def make_graph(n, edges, d_node=1, d_edge=0, feats=None, coords=None, targets=(0.0,)):
    edges = np.array(edges, dtype=np.int64).reshape(-1, 2)
    feats = np.zeros((n, d_node)) if feats is None else np.asarray(feats, dtype=float)
    return Graph(n, feats, edges, np.zeros((len(edges), d_edge)), np.asarray(targets, float), coords)


@pytest.fixture(scope="session")
def small_synth():
    """A 120-graph, 4-task synthetic dataset with its split and normalizer."""
    ds = synth_generate(SynthSpec(num_graphs=120, num_tasks=4, nodes_min=4, nodes_max=8), seed=3)
    train, test = split_dataset(ds, 0.8, seed=0)
    return ds, train, test, zscore_fit(ds, train)


@pytest.fixture(scope="session")
def coord_synth():
    ds = synth_generate(SynthSpec(num_graphs=60, num_tasks=3, nodes_min=4, nodes_max=7, coords=True), seed=5)
    train, test = split_dataset(ds, 0.5, seed=0)
    return ds, train, test, zscore_fit(ds, train)
