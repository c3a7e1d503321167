import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph
from metagnn.errors import ContractError, DegenerateDataError, ParseError, SchemaError
from metagnn.graphs import (Dataset, Normalizer, SynthSpec, Task, graph_summary, load_dataset, make_batch,
                            random_tree, sample_support, save_dataset, split_dataset, synth_generate,
                            zscore_apply, zscore_fit, zscore_invert)

HEADER = {"format": "meta-gnn-graphs-v1", "task_names": ["a", "b"], "d_node": 1, "d_edge": 1, "has_coords": False}


def write_lines(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return path


def two_node(**overrides):
    rec = {"id": "g0", "num_nodes": 2, "node_feats": [[1.0], [2.0]], "edges": [[0, 1]],
           "edge_feats": [[0.5]], "targets": [1.0, 2.0]}
    rec.update(overrides)
    return rec


def test_load_two_node_graph(tmp_path):
    ds = load_dataset(write_lines(tmp_path / "d.jsonl", [HEADER, two_node()]))
    assert len(ds) == 1 and ds.num_tasks == 2
    assert ds.graphs[0].edges.tolist() == [[0, 1]]


def test_duplicate_edge_is_schema_error(tmp_path):
    rec = two_node(edges=[[0, 1], [0, 1]], edge_feats=[[0.5], [0.5]])
    with pytest.raises(SchemaError):
        load_dataset(write_lines(tmp_path / "d.jsonl", [HEADER, rec]))


@pytest.mark.parametrize("edges", [[[1, 0]], [[0, 0]], [[0, 2]]])
def test_edge_invariants(tmp_path, edges):
    with pytest.raises(SchemaError):
        load_dataset(write_lines(tmp_path / "d.jsonl", [HEADER, two_node(edges=edges)]))


def test_malformed_record_reports_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(HEADER) + "\n" + json.dumps(two_node()) + "\n{not json\n")
    with pytest.raises(ParseError, match="line 3") as info:
        load_dataset(path)
    assert info.value.line == 3


def test_missing_field_reports_line(tmp_path):
    rec = two_node()
    del rec["targets"]
    with pytest.raises(ParseError, match="line 2"):
        load_dataset(write_lines(tmp_path / "d.jsonl", [HEADER, rec]))


def test_width_mismatch_is_schema_error(tmp_path):
    with pytest.raises(SchemaError):
        load_dataset(write_lines(tmp_path / "d.jsonl", [HEADER, two_node(node_feats=[[1.0, 0.0], [2.0, 0.0]])]))


def test_bad_header(tmp_path):
    with pytest.raises(ParseError, match="line 1"):
        load_dataset(write_lines(tmp_path / "d.jsonl", [{"format": "other"}]))


def test_synthetic_round_trip(tmp_path):
    ds = synth_generate(SynthSpec(num_graphs=200, num_tasks=3, coords=True), seed=1)
    save_dataset(ds, tmp_path / "s.jsonl")
    assert load_dataset(tmp_path / "s.jsonl").equals(ds)


def test_dataset_rejects_mixed_widths():
    with pytest.raises(SchemaError):
        Dataset([make_graph(2, [(0, 1)], d_node=1), make_graph(2, [(0, 1)], d_node=2)], ["t"], 1, 0, False)


def test_split_ten_nodes():
    train, test = split_dataset(10, 0.9, seed=0)
    assert len(train) == 9 and len(test) == 1


@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 10_000))
def test_split_partitions(n, f, seed):
    train, test = split_dataset(n, f, seed)
    assert set(train) | set(test) == set(range(n)) and not set(train) & set(test)
    assert len(train) == min(int(np.ceil(n * f)), n - 1)
    assert np.array_equal(train, split_dataset(n, f, seed)[0])


def test_split_seed_variation_overlaps_about_half():
    # indices assigned to the same side by two independent seeds
    train0, test0 = map(set, split_dataset(100, 0.5, seed=0))
    agree = []
    for seed in range(1, 21):
        train, test = map(set, split_dataset(100, 0.5, seed=seed))
        assert train != train0
        agree.append(len(train & train0) + len(test & test0))
    assert abs(np.mean(agree) - 50) < 5


@pytest.mark.parametrize("n,f", [(1, 0.5), (10, 0.0), (10, 1.0)])
def test_split_errors(n, f):
    with pytest.raises(ContractError):
        split_dataset(n, f)


def label_dataset(values, tasks=1):
    values = np.asarray(values, float).reshape(-1, tasks)
    graphs = [make_graph(1, [], targets=row) for row in values]
    return Dataset(graphs, [f"t{k}" for k in range(tasks)], 1, 0, False)


def test_zscore_population_example():
    n = zscore_fit(label_dataset([1.0, 2.0, 3.0]), [0, 1, 2])
    assert n.mean == 2.0 and abs(n.std - np.sqrt(2 / 3)) < 1e-15
    assert zscore_apply(n, 2.0) == 0.0
    assert abs(zscore_apply(n, n.mean + n.std) - 1.0) < 1e-15


def test_zscore_pools_tasks_over_train_only():
    ds = label_dataset([[0.0, 2.0], [4.0, 6.0], [100.0, 100.0]], tasks=2)
    n = zscore_fit(ds, [0, 1])
    assert n.mean == 3.0 and n.std == np.sqrt(5.0)


def test_zscore_constant_labels():
    with pytest.raises(DegenerateDataError):
        zscore_fit(label_dataset([4.0, 4.0, 4.0]), [0, 1, 2])
    with pytest.raises(DegenerateDataError):
        Normalizer(0.0, 0.0)


def test_zscore_sampling_oracle():
    y = np.random.default_rng(0).normal(5.0, 2.0, size=1000)
    n = zscore_fit(label_dataset(y), range(1000))
    assert abs(n.mean - 5) < 0.25 and abs(n.std - 2) < 0.1


def test_zscore_round_trip():
    rng = np.random.default_rng(1)
    y = rng.normal(3.0, 40.0, size=1000)
    n = Normalizer(3.1, 39.5)
    assert np.max(np.abs(zscore_invert(n, zscore_apply(n, y)) - y)) < 1e-12


def test_normalized_train_labels_are_standard(small_synth):
    ds, train, _, n = small_synth
    z = zscore_apply(n, ds.labels(train)).ravel()
    assert abs(z.mean()) < 1e-9 and abs(z.std() - 1) < 1e-9


def test_support_batch_labels_exact(small_synth):
    ds, train, _, n = small_synth
    batch = sample_support(ds, Task(2, train), 10, np.random.default_rng(0), n)
    for g, label in zip(batch.graphs, batch.labels):
        assert label == zscore_apply(n, g.targets[2])


def test_support_exhaustive_and_minimal(small_synth):
    ds, _, _, n = small_synth
    split = np.arange(10, 20)
    full = sample_support(ds, Task(0, split), 10, np.random.default_rng(0), n)
    assert sorted(full.indices) == list(split)
    assert len(sample_support(ds, Task(0, split), 1, np.random.default_rng(0), n)) == 1
    with pytest.raises(ContractError):
        sample_support(ds, Task(0, split), 11, np.random.default_rng(0), n)


def test_support_draws_are_duplicate_free(small_synth):
    ds, train, _, n = small_synth
    rng = np.random.default_rng(4)
    for _ in range(100):
        batch = sample_support(ds, Task(1, train), 10, rng, n)
        assert len(set(batch.indices)) == 10


def test_make_batch_uses_requested_task(small_synth):
    ds, _, test, n = small_synth
    b = make_batch(ds, test[:3], 3, n)
    assert np.array_equal(b.labels, n.apply([ds.graphs[i].targets[3] for i in test[:3]]))


def is_connected(n, edges):
    seen, stack = {0}, [0]
    adj = {i: set() for i in range(n)}
    for i, j in edges:
        adj[i].add(j)
        adj[j].add(i)
    while stack:
        for j in adj[stack.pop()] - seen:
            seen.add(j)
            stack.append(j)
    return len(seen) == n


@given(st.integers(1, 30), st.integers(0, 1000))
def test_random_tree_is_spanning_tree(n, seed):
    edges = random_tree(n, np.random.default_rng(seed))
    assert len(edges) == n - 1 and is_connected(n, edges)
    assert all(i < j for i, j in edges)


def test_random_tree_is_uniform_on_four_nodes():
    # Cayley: 16 labelled trees on 4 nodes
    rng = np.random.default_rng(0)
    counts = Counter(tuple(sorted(random_tree(4, rng))) for _ in range(16000))
    assert len(counts) == 16
    assert max(counts.values()) < 1.15 * 1000 and min(counts.values()) > 0.85 * 1000


def test_synth_single_three_node_graph():
    ds = synth_generate(SynthSpec(num_graphs=1, nodes_min=3, nodes_max=3, num_tasks=2), seed=0)
    g = ds.graphs[0]
    assert g.num_nodes == 3 and is_connected(3, g.edges.tolist())


def test_synth_is_deterministic():
    spec = SynthSpec(num_graphs=30, coords=True)
    assert synth_generate(spec, 7).equals(synth_generate(spec, 7))
    assert not synth_generate(spec, 7).equals(synth_generate(spec, 8))


def test_synth_graphs_are_connected_and_in_range():
    spec = SynthSpec(num_graphs=100, nodes_min=5, nodes_max=15)
    for g in synth_generate(spec, 2).graphs:
        assert 5 <= g.num_nodes <= 15 and is_connected(g.num_nodes, g.edges.tolist())


def test_synth_targets_are_linear_in_summary():
    spec = SynthSpec(num_graphs=60, num_tasks=3, coords=True)
    ds = synth_generate(spec, 0)
    s = np.array([graph_summary(g, spec.nodes_max) for g in ds.graphs])
    design = np.hstack([s, np.ones((len(s), 1))])
    coef, *_ = np.linalg.lstsq(design, ds.labels(), rcond=None)
    assert np.max(np.abs(design @ coef - ds.labels())) < 1e-10


def test_synth_tasks_are_correlated():
    ds = synth_generate(SynthSpec(num_graphs=500, num_tasks=8), seed=0)
    corr = np.corrcoef(ds.labels().T)
    pairs = [abs(corr[i, j]) for i in range(8) for j in range(i + 1, 8)]
    assert sum(p > 0.1 for p in pairs) >= len(pairs) / 2


def test_synth_errors():
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(nodes_min=6, nodes_max=5))
    with pytest.raises(ContractError):
        synth_generate(SynthSpec(num_tasks=1))


def test_summary_of_known_graph():
    g = make_graph(2, [(0, 1)], d_node=2, feats=[[3.0, 4.0], [0.0, 1.0]],
                   coords=np.array([[0.0, 0, 0], [0, 0, 2.0]]))
    assert graph_summary(g, 4).tolist() == [3.0, 5.0, 0.5, 0.0, 2.0, 0.5]


def test_graph_permutation_preserves_structure():
    g = make_graph(3, [(0, 1), (1, 2)], feats=[[0.0], [1.0], [2.0]])
    p = g.permuted([2, 0, 1])
    assert p.node_feats.ravel().tolist() == [2.0, 0.0, 1.0]
    assert sorted(map(tuple, p.edges.tolist())) == [(0, 2), (1, 2)]
