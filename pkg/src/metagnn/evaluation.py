"""k-shot evaluation protocol, random-init baseline and table aggregation."""

from __future__ import annotations

import csv
import io
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ensemble import Ensemble, ensemble_adapt, ensemble_predict
from .errors import ContractError
from .graphs import Dataset, Normalizer, Task, child_rng, make_batch
from .layers import Architecture, GraphBatch, ModelParams, model_forward, model_init
from .meta import inner_adapt

CSV_COLUMNS = ["model", "init", "task", "trials", "pre_mean", "pre_std",
               "step1_mean", "step1_std", "step5_mean", "step5_std"]


@dataclass(frozen=True, eq=False)
class TrialCurve:
    """Query MSE (and support MSE) before adaptation and after each step."""

    query: np.ndarray
    support: np.ndarray
    support_indices: np.ndarray = field(repr=False)
    query_indices: np.ndarray = field(repr=False)

    @property
    def mse_at_step(self) -> np.ndarray:
        return self.query


@dataclass(frozen=True, eq=False)
class EvalReport:
    model: str
    init: str
    task: str
    trials: int
    steps: tuple[int, ...]
    mean: np.ndarray
    std: np.ndarray
    support_mean: np.ndarray | None = None
    support_std: np.ndarray | None = None

    def at(self, step: int) -> tuple[float, float]:
        i = self.steps.index(step)
        return float(self.mean[i]), float(self.std[i])

    def table_steps(self) -> tuple[int, int, int]:
        """Steps reported in CSV columns: pre-update, first step, final step."""
        last = self.steps[-1]
        return 0, min(1, last), last


def _predict(model, batch, training=True):
    if isinstance(model, Ensemble):
        return ensemble_predict(model, batch, training)
    return model_forward(model, batch, training)


def _adapt(model, batch, alpha):
    if isinstance(model, Ensemble):
        return ensemble_adapt(model, batch, alpha, 1)
    return inner_adapt(model, batch, alpha, 1)


def kshot_trial(model: ModelParams | Ensemble, ds: Dataset, task: Task, normalizer: Normalizer,
                support_size: int, alpha: float, k: int, rng: np.random.Generator) -> TrialCurve:
    """Adapt on a fresh support batch and track MSE on a disjoint query batch.

    Both batches hold ``support_size`` graphs drawn without replacement from
    ``task.split``; only the support batch drives adaptation.
    """
    if k < 0:
        raise ContractError("k must be >= 0")
    if len(task.split) < 2 * support_size:
        raise ContractError(
            f"split has {len(task.split)} graphs; disjoint support and query need {2 * support_size}"
        )
    chosen = rng.choice(task.split, size=2 * support_size, replace=False)
    s = make_batch(ds, chosen[:support_size], task.target_index, normalizer)
    q = make_batch(ds, chosen[support_size:], task.target_index, normalizer)
    sb = GraphBatch.from_graphs(s.graphs, s.labels)
    qb = GraphBatch.from_graphs(q.graphs, q.labels)
    query, support = [], []
    for step in range(k + 1):
        query.append(float(np.mean((_predict(model, qb) - q.labels) ** 2)))
        support.append(float(np.mean((_predict(model, sb) - s.labels) ** 2)))
        if step < k:
            model = _adapt(model, sb, alpha)
    return TrialCurve(np.array(query), np.array(support), s.indices, q.indices)


def _trial_job(args):
    model, ds, task, normalizer, support_size, alpha, k, seed, t, random_arch = args
    if random_arch is not None:
        model = model_init(random_arch, [seed, t, 1])
    return kshot_trial(model, ds, task, normalizer, support_size, alpha, k, child_rng(seed, t))


def run_trials(model, ds, task, normalizer, *, trials, support_size, alpha, k, seed,
               random_arch: Architecture | None = None, jobs: int = 1) -> list[TrialCurve]:
    """Trial ``t`` samples with ``child_rng(seed, t)``, so results ignore scheduling."""
    if trials < 1:
        raise ContractError("trials must be >= 1")
    jobs_args = [(model, ds, task, normalizer, support_size, alpha, k, seed, t, random_arch)
                 for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_trial_job, jobs_args))
    return [_trial_job(a) for a in jobs_args]


def summarize(curves: Sequence[TrialCurve], *, model: str, init: str, task: str) -> EvalReport:
    q = np.array([c.query for c in curves])
    s = np.array([c.support for c in curves])
    return EvalReport(
        model=model, init=init, task=task, trials=len(curves),
        steps=tuple(range(q.shape[1])),
        mean=q.mean(axis=0), std=q.std(axis=0),
        support_mean=s.mean(axis=0), support_std=s.std(axis=0),
    )


def _model_name(model) -> str:
    return model.arch.kind


def evaluate(model: ModelParams | Ensemble, ds: Dataset, task: Task, normalizer: Normalizer, *,
             trials: int = 100, support_size: int = 10, alpha: float = 5e-3, k: int = 5,
             seed: int = 0, init: str | None = None, jobs: int = 1) -> EvalReport:
    """Mean and population std of the query-MSE curve over seeded trials."""
    if init is None:
        init = f"ensemble-{model.mode}-{len(model)}" if isinstance(model, Ensemble) else "meta"
    curves = run_trials(model, ds, task, normalizer, trials=trials, support_size=support_size,
                        alpha=alpha, k=k, seed=seed, jobs=jobs)
    return summarize(curves, model=_model_name(model), init=init, task=ds.task_names[task.target_index])


def baseline_random(arch: Architecture, ds: Dataset, task: Task, normalizer: Normalizer, *,
                    trials: int = 100, support_size: int = 10, alpha: float = 5e-3, k: int = 5,
                    seed: int = 0, jobs: int = 1) -> EvalReport:
    """The same protocol from a fresh random initialization in every trial."""
    curves = run_trials(None, ds, task, normalizer, trials=trials, support_size=support_size,
                        alpha=alpha, k=k, seed=seed, random_arch=arch, jobs=jobs)
    return summarize(curves, model=arch.kind, init="random", task=ds.task_names[task.target_index])


def aggregate_across_tasks(reports: Sequence[EvalReport], exclude: Sequence[str] = ()) -> EvalReport:
    """Unweighted mean over tasks of each step's mean and of each step's std."""
    names = [r.task for r in reports]
    if len(set(names)) != len(names):
        raise ContractError("reports must cover distinct tasks")
    kept = [r for r in reports if r.task not in set(exclude)]
    if not kept:
        raise ContractError("no reports left after exclusion")
    steps = kept[0].steps
    if any(r.steps != steps for r in kept):
        raise ContractError("reports disagree on the recorded steps")
    labels = {(r.model, r.init) for r in kept}
    model, init = (kept[0].model, kept[0].init) if len(labels) == 1 else ("mixed", "mixed")
    task = kept[0].task if len(kept) == 1 else f"mean of {len(kept)} tasks"
    return EvalReport(
        model=model, init=init, task=task, trials=kept[0].trials, steps=steps,
        mean=np.mean([r.mean for r in kept], axis=0),
        std=np.mean([r.std for r in kept], axis=0),
    )


# ---------------------------------------------------------------------------
# CSV


def _fmt(x: float) -> str:
    return f"{x:.2e}"


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in reports:
        row = [r.model, r.init, r.task, r.trials]
        for step in r.table_steps():
            mean, std = r.at(step)
            row += [_fmt(mean), _fmt(std)]
        writer.writerow(row)
    return buf.getvalue()


def read_reports_csv(text: str) -> list[EvalReport]:
    """Parse report rows; each becomes a three-step report (pre, first, final)."""
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_COLUMNS:
        raise ContractError(f"unexpected report columns {reader.fieldnames}")
    out = []
    for row in reader:
        try:
            mean = np.array([float(row[f"{c}_mean"]) for c in ("pre", "step1", "step5")])
            std = np.array([float(row[f"{c}_std"]) for c in ("pre", "step1", "step5")])
            trials = int(row["trials"])
        except (TypeError, ValueError) as exc:
            raise ContractError(f"malformed report row ({exc})") from None
        out.append(EvalReport(row["model"], row["init"], row["task"], trials, (0, 1, 5), mean, std))
    return out
