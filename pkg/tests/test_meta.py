import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_graph
from metagnn.errors import ContractError, DivergenceError
from metagnn.graphs import Normalizer, Task, child_rng, sample_support
from metagnn.layers import Architecture, GraphBatch, loss_and_grads, model_init
from metagnn.meta import (MetaConfig, TrainLog, TrainRecord, default_inner_lr, inner_adapt, meta_step,
                          reptile_meta_update, reptile_train)
from metagnn.tensor import ParamSet, sgd_step

GCN = Architecture("gcn", d_node=4, d_edge=2)


def support_batch(ds, train, normalizer, seed, task=1, k=10):
    s = sample_support(ds, Task(task, train), k, child_rng(seed, 0), normalizer)
    return GraphBatch.from_graphs(s.graphs, s.labels)


def constant_model(value=0.0):
    """A gcn whose output is its final bias: every other weight is zero."""
    mp = model_init(Architecture("gcn", d_node=1), 0)
    zeros = {k: np.zeros_like(v) for k, v in mp.params.items()}
    zeros["layer2.bias"] = np.full((1, 1), value)
    return mp.with_params(ParamSet(zeros))


# ---------------------------------------------------------------------------
# inner loop


def test_inner_adapt_zero_rate_is_identity(small_synth):
    ds, train, _, normalizer = small_synth
    mp = model_init(GCN, 0)
    assert inner_adapt(mp, support_batch(ds, train, normalizer, 0), 0.0, 5).equals(mp)


def test_inner_adapt_closed_form_quadratic_step():
    g = make_graph(3, [(0, 1), (1, 2)])
    batch = GraphBatch.from_graphs([g], [1.0])
    out = inner_adapt(constant_model(0.0), batch, 0.5, 1)
    assert out.params["layer2.bias"].tolist() == [[1.0]]
    assert all(not np.any(v) for k, v in out.params.items() if k != "layer2.bias")


def test_inner_adapt_leaves_input_untouched(small_synth):
    ds, train, _, normalizer = small_synth
    mp = model_init(GCN, 0)
    snapshot = {k: v.copy() for k, v in mp.params.items()}
    inner_adapt(mp, support_batch(ds, train, normalizer, 0), 5e-3, 3)
    assert all(np.array_equal(mp.params[k], v) for k, v in snapshot.items())


@pytest.mark.parametrize("seed", range(50))
def test_support_loss_non_increasing_for_small_rate(small_synth, seed):
    ds, train, _, normalizer = small_synth
    batch = support_batch(ds, train, normalizer, seed, task=seed % 4)
    losses = []
    adapted = inner_adapt(model_init(GCN, seed), batch, 1e-3, 5, losses)
    losses.append(loss_and_grads(adapted, batch, batch.labels)[0])
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_inner_adapt_divergence_carries_step(small_synth):
    ds, train, _, _ = small_synth
    batch = support_batch(ds, train, Normalizer(0.0, 1e-6), 0)
    with pytest.raises(DivergenceError) as info:
        inner_adapt(model_init(GCN, 0), batch, 5e-3, 5)
    assert info.value.iteration == 0


def test_default_inner_rates():
    assert default_inner_lr("gcn") == default_inner_lr("gat") == 5e-3
    assert default_inner_lr("mpnn") == default_inner_lr("egnn") == 5e-4


# ---------------------------------------------------------------------------
# outer update


def test_reptile_update_examples():
    theta = ParamSet({"w": [0.0, 0.0]})
    assert reptile_meta_update(theta, ParamSet({"w": [2.0, -4.0]}), 0.25)["w"].tolist() == [0.5, -1.0]
    assert reptile_meta_update(theta, theta, 0.3) == theta


def test_reptile_update_endpoints_are_exact():
    rng = np.random.default_rng(0)
    a, b = ParamSet({"w": rng.normal(size=(3, 2))}), ParamSet({"w": rng.normal(size=(3, 2))})
    assert reptile_meta_update(a, b, 1.0) == b
    assert reptile_meta_update(a, b, 0.0) == a


def test_reptile_update_mismatch():
    with pytest.raises(ContractError):
        reptile_meta_update(ParamSet({"w": [1.0]}), ParamSet({"v": [1.0]}), 0.5)
    with pytest.raises(ContractError):
        reptile_meta_update(ParamSet({"w": [1.0]}), ParamSet({"w": [1.0, 2.0]}), 0.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_reptile_update_is_affine(beta, beta2, seed):
    rng = np.random.default_rng(seed)
    theta, prime = ParamSet({"w": rng.normal(size=4)}), ParamSet({"w": rng.normal(size=4)})
    twice = reptile_meta_update(reptile_meta_update(theta, prime, beta), prime, beta2)
    once = reptile_meta_update(theta, prime, beta + beta2 * (1 - beta))
    assert np.allclose(twice["w"], once["w"], rtol=0, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-64, 64), min_size=3, max_size=3), st.lists(st.integers(-64, 64), min_size=3, max_size=3),
       st.sampled_from([0.5, 0.25, 0.125]), st.sampled_from([0.5, 0.25, 1.0]))
def test_one_step_reptile_is_scaled_sgd(theta, grad, alpha, beta):
    # dyadic values keep every intermediate exact
    params = ParamSet({"w": np.array(theta, float)})
    grads = {"w": np.array(grad, float)}
    via_reptile = reptile_meta_update(params, sgd_step(params, grads, alpha), beta)
    assert via_reptile == sgd_step(params, grads, alpha * beta)


def test_one_meta_iteration_with_one_inner_step(small_synth):
    ds, train, _, normalizer = small_synth
    cfg = MetaConfig(outer_lr=0.25, inner_lr=5e-3, inner_steps=1, epochs=1, holdout_task=0, seed=4)
    mp0 = model_init(GCN, 4)
    trained, log = reptile_train(GCN, ds, train, normalizer, cfg)
    # replay the sampling of the single iteration
    rng = child_rng(4, 1)
    pool = [1, 2, 3]
    task = pool[int(rng.integers(len(pool)))]
    assert log[0].task == task
    s = sample_support(ds, Task(task, train), 10, rng, normalizer)
    batch = GraphBatch.from_graphs(s.graphs, s.labels)
    _, grads, _ = loss_and_grads(mp0, batch, batch.labels)
    expected = sgd_step(mp0.params, grads, 5e-3 * 0.25)
    assert max(np.max(np.abs(trained.params[k] - expected[k])) for k in expected) < 1e-15


# ---------------------------------------------------------------------------
# training loop


def test_zero_epochs_returns_initialization(small_synth):
    ds, train, _, normalizer = small_synth
    mp, log = reptile_train(GCN, ds, train, normalizer, MetaConfig(epochs=0, seed=7))
    assert mp.equals(model_init(GCN, 7)) and len(log) == 0


@pytest.mark.parametrize("holdout", [0, 2])
def test_holdout_task_never_sampled(small_synth, holdout):
    ds, train, _, normalizer = small_synth
    _, log = reptile_train(GCN, ds, train, normalizer, MetaConfig(epochs=60, holdout_task=holdout))
    assert len(log) == 60 and holdout not in log.tasks()
    assert set(log.tasks()) == set(range(4)) - {holdout}
    assert [r.iteration for r in log] == list(range(60))


def test_training_is_deterministic(small_synth):
    ds, train, _, normalizer = small_synth
    cfg = MetaConfig(epochs=15, seed=2)
    (a, la), (b, lb) = (reptile_train(Architecture("mpnn", 4, 2), ds, train, normalizer, cfg) for _ in range(2))
    assert a.equals(b) and la.to_csv() == lb.to_csv()
    c, _ = reptile_train(Architecture("mpnn", 4, 2), ds, train, normalizer, MetaConfig(epochs=15, seed=3))
    assert not a.equals(c)


def test_training_moves_buffers_too(small_synth):
    ds, train, _, normalizer = small_synth
    arch = Architecture("mpnn", 4, 2)
    mp, _ = reptile_train(arch, ds, train, normalizer, MetaConfig(epochs=3, inner_lr=5e-4))
    assert mp.buffers != model_init(arch, 0).buffers


def test_training_divergence_names_task_and_iteration(small_synth):
    ds, train, _, _ = small_synth
    with pytest.raises(DivergenceError) as info:
        reptile_train(GCN, ds, train, Normalizer(0.0, 1e-6), MetaConfig(epochs=5))
    assert info.value.iteration == 0 and "inner step 0" in str(info.value)


@pytest.mark.parametrize("cfg", [MetaConfig(outer_lr=0), MetaConfig(inner_lr=-1), MetaConfig(inner_steps=0),
                                 MetaConfig(support_size=0), MetaConfig(epochs=-1), MetaConfig(holdout_task=4)])
def test_config_validation(small_synth, cfg):
    ds, train, _, normalizer = small_synth
    with pytest.raises(ContractError):
        reptile_train(GCN, ds, train, normalizer, cfg)


def test_train_split_smaller_than_support(small_synth):
    ds, train, _, normalizer = small_synth
    with pytest.raises(ContractError):
        reptile_train(GCN, ds, train[:5], normalizer, MetaConfig(epochs=1))


def test_meta_step_interpolates_parameters():
    a, b = model_init(GCN, 0), model_init(GCN, 1)
    mid = meta_step(a, b, 0.5)
    assert np.allclose(mid.params["layer0.weight"], (a.params["layer0.weight"] + b.params["layer0.weight"]) / 2)


def test_train_log_csv():
    log = TrainLog([TrainRecord(0, 2, 1.5, 0.25)])
    assert log.to_csv() == "iteration,task,loss_pre,loss_post\n0,2,1.5,0.25\n"
