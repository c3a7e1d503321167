"""Reptile meta-training with a k-step full-batch SGD inner loop."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DivergenceError
from .graphs import Dataset, Normalizer, SupportBatch, Task, child_rng, sample_support
from .layers import Architecture, GraphBatch, ModelParams, forward, loss_and_grads, model_init, mse
from .tensor import ParamSet, constant, sgd_step

DIVERGENCE_LIMIT = 1e6


def default_inner_lr(kind: str) -> float:
    # message-passing models needed the smaller rate to stay stable
    return 5e-4 if kind in ("mpnn", "egnn") else 5e-3


@dataclass(frozen=True)
class MetaConfig:
    outer_lr: float = 1e-3
    inner_lr: float = 5e-3
    inner_steps: int = 5
    support_size: int = 10
    epochs: int = 2000
    holdout_task: int = 0
    seed: int = 0

    def validate(self, num_tasks: int | None = None) -> None:
        if not (self.outer_lr > 0 and self.inner_lr > 0):
            raise ContractError("outer_lr and inner_lr must be positive")
        if self.inner_steps < 1 or self.support_size < 1:
            raise ContractError("inner_steps and support_size must be >= 1")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if num_tasks is not None and not 0 <= self.holdout_task < num_tasks:
            raise ContractError(f"holdout_task {self.holdout_task} outside [0, {num_tasks})")


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    task: int
    loss_pre: float
    loss_post: float


class TrainLog(list):
    """One :class:`TrainRecord` per meta-iteration."""

    def tasks(self) -> list[int]:
        return [r.task for r in self]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["iteration", "task", "loss_pre", "loss_post"])
        for r in self:
            writer.writerow([r.iteration, r.task, repr(r.loss_pre), repr(r.loss_post)])
        return buf.getvalue()


def check_loss(loss: float, iteration: int) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise DivergenceError(f"support loss diverged to {loss:.3e}", iteration)


def support_loss(mp: ModelParams, batch: GraphBatch) -> float:
    """Training-mode MSE on ``batch`` without touching running statistics."""
    weights = {k: constant(v) for k, v in mp.params.items()}
    pred = forward(mp.arch, weights, batch, training=True, buffers=mp.buffers)
    return mse(pred, batch.labels).item()


def inner_adapt(mp: ModelParams, support: SupportBatch | GraphBatch, alpha: float, k: int,
                losses: list | None = None) -> ModelParams:
    """``k`` full-batch SGD steps on the support MSE; returns new parameters.

    The support loss seen before each step is appended to ``losses`` when given.
    """
    if k < 0:
        raise ContractError("k must be >= 0")
    batch = support if isinstance(support, GraphBatch) else GraphBatch.from_graphs(support.graphs, support.labels)
    for step in range(k):
        loss, grads, buffers = loss_and_grads(mp, batch, batch.labels)
        check_loss(loss, step)
        if losses is not None:
            losses.append(loss)
        mp = mp.with_params(sgd_step(mp.params, grads, alpha), buffers)
    return mp


def reptile_meta_update(theta: ParamSet, theta_prime: ParamSet, beta: float) -> ParamSet:
    """``theta + beta * (theta_prime - theta)``, exact at ``beta`` in {0, 1}."""
    if list(theta) != list(theta_prime):
        raise ContractError("parameter sets have different names")
    for name in theta:
        if theta[name].shape != theta_prime[name].shape:
            raise ContractError(f"shape mismatch for {name!r}: {theta[name].shape} vs {theta_prime[name].shape}")
    if beta == 0:
        return theta
    if beta == 1:
        return theta_prime
    return ParamSet({n: theta[n] + beta * (theta_prime[n] - theta[n]) for n in theta})


def meta_step(mp: ModelParams, adapted: ModelParams, beta: float) -> ModelParams:
    return ModelParams(
        mp.arch,
        reptile_meta_update(mp.params, adapted.params, beta),
        reptile_meta_update(mp.buffers, adapted.buffers, beta),
    )


def reptile_train(arch: Architecture | ModelParams, ds: Dataset, train_indices, normalizer: Normalizer,
                  cfg: MetaConfig) -> tuple[ModelParams, TrainLog]:
    """Serial Reptile over every task except ``cfg.holdout_task``.

    Each meta-iteration samples one task uniformly, draws a support batch of
    ``support_size`` train graphs, adapts for ``inner_steps`` and moves the
    initialization toward the adapted weights by ``outer_lr``.
    """
    cfg.validate(ds.num_tasks)
    pool = [t for t in range(ds.num_tasks) if t != cfg.holdout_task]
    if not pool:
        raise ContractError("no training tasks remain after excluding the holdout task")
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if len(train_indices) < cfg.support_size:
        raise ContractError(f"train split has {len(train_indices)} graphs, need {cfg.support_size}")
    mp = arch if isinstance(arch, ModelParams) else model_init(arch, cfg.seed)
    rng = child_rng(cfg.seed, 1)
    log = TrainLog()
    for it in range(cfg.epochs):
        task = pool[int(rng.integers(len(pool)))]
        support = sample_support(ds, Task(task, train_indices), cfg.support_size, rng, normalizer)
        batch = GraphBatch.from_graphs(support.graphs, support.labels)
        losses = []
        try:
            adapted = inner_adapt(mp, batch, cfg.inner_lr, cfg.inner_steps, losses)
            loss_post = support_loss(adapted, batch)
            check_loss(loss_post, cfg.inner_steps)
        except DivergenceError as exc:
            raise DivergenceError(
                f"meta-training diverged on task {task}, inner step {exc.iteration}: {exc.detail}", it
            ) from None
        log.append(TrainRecord(it, task, losses[0], loss_post))
        mp = meta_step(mp, adapted, cfg.outer_lr)
    return mp, log
