"""Ensembles of same-architecture models combined by a weighted sum.

``average`` keeps the weights frozen at 1/M; ``learned`` trains them jointly
with the member parameters during k-shot adaptation. Weights are
unconstrained reals.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .graphs import SupportBatch
from .layers import Architecture, GraphBatch, ModelParams, forward, mse, updated_buffers
from .meta import check_loss
from .tensor import ParamSet, Tape, Tensor, apply_primitive as op, backward, constant, sgd_step
from .tensor import paramset_from_document, paramset_to_document

MODES = ("average", "learned")


@dataclass(frozen=True, eq=False)
class Ensemble:
    members: tuple[ModelParams, ...]
    weights: np.ndarray
    mode: str

    @property
    def arch(self) -> Architecture:
        return self.members[0].arch

    def __len__(self):
        return len(self.members)


def ensemble_init(members: Sequence[ModelParams], mode: str = "average") -> Ensemble:
    if mode not in MODES:
        raise ContractError(f"unknown aggregation {mode!r}; expected one of {MODES}")
    members = tuple(members)
    if not members:
        raise ContractError("an ensemble needs at least one member")
    if any(m.arch != members[0].arch for m in members):
        raise ContractError("all ensemble members must share one architecture")
    m = len(members)
    return Ensemble(members, np.full(m, 1.0 / m), mode)


def _combine(preds: Sequence[Tensor], weights: Tensor) -> Tensor:
    """Stack (G, 1) member predictions into (G, M) and contract with (M, 1) weights."""
    return op("matmul", [op("concat", list(preds), axis=1), weights])


def ensemble_predict(e: Ensemble, batch: GraphBatch, training: bool = True) -> np.ndarray:
    preds = [
        forward(m.arch, {k: constant(v) for k, v in m.params.items()}, batch,
                training=training, buffers=m.buffers)
        for m in e.members
    ]
    return _combine(preds, constant(e.weights.reshape(-1, 1))).data.reshape(-1)


def ensemble_loss_and_grads(e: Ensemble, batch: GraphBatch, labels):
    """Ensemble MSE, per-member gradients, weight gradient and new running stats.

    The weight gradient is ``None`` in average mode.
    """
    tape = Tape()
    leaves = [tape.watch(m.params) for m in e.members]
    w = e.weights.reshape(-1, 1)
    w_leaf = tape.leaf(w) if e.mode == "learned" else constant(w)
    stats = [{} for _ in e.members]
    preds = [
        forward(m.arch, lv, batch, training=True, buffers=m.buffers, stats=st)
        for m, lv, st in zip(e.members, leaves, stats)
    ]
    loss = mse(_combine(preds, w_leaf), labels)
    named = {f"m{i}.{k}": t for i, lv in enumerate(leaves) for k, t in lv.items()}
    if e.mode == "learned":
        named["weights"] = w_leaf
    flat = backward(loss, named)
    member_grads = [{k: flat[f"m{i}.{k}"] for k in m.params} for i, m in enumerate(e.members)]
    w_grad = flat["weights"].reshape(-1) if e.mode == "learned" else None
    new_buffers = [updated_buffers(m.buffers, st) for m, st in zip(e.members, stats)]
    return loss.item(), member_grads, w_grad, new_buffers


def ensemble_adapt(e: Ensemble, support: SupportBatch | GraphBatch, alpha: float, k: int,
                   losses: list | None = None, weight_lr: float | None = None) -> Ensemble:
    """``k`` full-batch SGD steps on the ensemble support MSE.

    Members always adapt; in learned mode the weights move too, at
    ``weight_lr`` (default ``alpha``).
    """
    if k < 0:
        raise ContractError("k must be >= 0")
    weight_lr = alpha if weight_lr is None else weight_lr
    batch = support if isinstance(support, GraphBatch) else GraphBatch.from_graphs(support.graphs, support.labels)
    for step in range(k):
        loss, member_grads, w_grad, buffers = ensemble_loss_and_grads(e, batch, batch.labels)
        check_loss(loss, step)
        if losses is not None:
            losses.append(loss)
        members = tuple(
            m.with_params(sgd_step(m.params, g, alpha), b)
            for m, g, b in zip(e.members, member_grads, buffers)
        )
        weights = e.weights if w_grad is None else e.weights - weight_lr * w_grad
        e = Ensemble(members, weights, e.mode)
    return e


def ensemble_to_document(e: Ensemble) -> dict:
    return {
        "mode": e.mode,
        "weights": [float(w) for w in e.weights],
        "members": [
            paramset_to_document(m.arch.kind, m.arch.to_dict(), m.params, m.buffers)
            for m in e.members
        ],
    }


def ensemble_from_document(doc) -> Ensemble:
    try:
        mode, weights, docs = doc["mode"], np.asarray(doc["weights"], dtype=np.float64), doc["members"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed ensemble document ({exc})") from None
    members = []
    for d in docs:
        kind, hp, params, buffers = paramset_from_document(d)
        arch = Architecture(kind, d_node=int(hp["d_node"]), d_edge=int(hp["d_edge"]),
                            hidden_dim=int(hp["hidden_dim"]), num_layers=int(hp["num_layers"]))
        members.append(ModelParams(arch, params, buffers))
    e = ensemble_init(members, mode)
    if weights.shape != (len(members),):
        raise ContractError("ensemble weights do not match the member count")
    return Ensemble(e.members, weights, mode)
