"""Command-line entry point: ``metagnn <subcommand> ...``.

Exit status: 0 success, 1 invalid input or failed check, 2 divergence or a
non-finite computation, 3 file-system error. Every subcommand loads and
validates all of its inputs before it writes anything.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from collections.abc import Sequence
from pathlib import Path

from . import __version__
from .checks import e3_deviation, gradcheck, permutation_deviation
from .ensemble import ensemble_init
from .errors import ContractError, DivergenceError, DomainError
from .evaluation import (aggregate_across_tasks, baseline_random, evaluate, read_reports_csv,
                         reports_to_csv)
from .graphs import Normalizer, SynthSpec, Task, load_dataset, save_dataset, split_dataset, synth_generate, zscore_fit
from .layers import KINDS, Architecture, ModelParams, model_init
from .meta import MetaConfig, default_inner_lr, reptile_train
from .tensor import dumps_exact, paramset_from_document, paramset_to_document

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
PARAMS_FILE, LOG_FILE = "params.json", "train_log.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags, which would collide with "diverged"
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# helpers


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read_json(path: Path) -> dict:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from None


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ContractError(message)


def _arch_from_hyperparams(kind: str, hp: dict) -> Architecture:
    try:
        return Architecture(kind, d_node=int(hp["d_node"]), d_edge=int(hp["d_edge"]),
                            hidden_dim=int(hp["hidden_dim"]), num_layers=int(hp["num_layers"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"parameter document has bad hyperparams ({exc})") from None


def load_model(path: Path) -> tuple[ModelParams, dict]:
    kind, hp, params, buffers = paramset_from_document(_read_json(path))
    arch = _arch_from_hyperparams(kind, hp)
    expected = model_init(arch, 0)
    _require(list(params) == list(expected.params)
             and all(params[n].shape == expected.params[n].shape for n in params),
             f"{path}: parameters do not match a {kind} model with {arch.to_dict()}")
    return ModelParams(arch, params, buffers), hp


def _normalizer_from(hp: dict) -> Normalizer | None:
    doc = hp.get("normalizer")
    if doc is None:
        return None
    try:
        return Normalizer(float(doc["mean"]), float(doc["std"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"bad stored normalizer ({exc})") from None


def _check_fits(arch: Architecture, ds) -> None:
    _require(arch.d_node == ds.d_node and arch.d_edge == ds.d_edge,
             f"model expects d_node={arch.d_node}, d_edge={arch.d_edge}; "
             f"dataset has {ds.d_node}, {ds.d_edge}")
    _require(not arch.uses_coords or ds.has_coords, "egnn needs a dataset with coordinates")


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(a) -> int:
    _require(a.graphs >= 1 and a.tasks >= 2, "--graphs must be >= 1 and --tasks >= 2")
    _require(1 <= a.nodes_min <= a.nodes_max, "need 1 <= --nodes-min <= --nodes-max")
    _require(a.d_node >= 1 and a.d_edge >= 0, "--d-node must be >= 1 and --d-edge >= 0")
    spec = SynthSpec(num_graphs=a.graphs, nodes_min=a.nodes_min, nodes_max=a.nodes_max,
                     d_node=a.d_node, d_edge=a.d_edge, num_tasks=a.tasks, coords=a.coords)
    ds = synth_generate(spec, a.seed)
    a.out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, a.out)
    return EXIT_OK


def cmd_train(a) -> int:
    ds = load_dataset(a.data)
    arch = Architecture(a.arch, ds.d_node, ds.d_edge, a.hidden_dim, a.layers)
    _check_fits(arch, ds)
    alpha = default_inner_lr(a.arch) if a.alpha is None else a.alpha
    cfg = MetaConfig(outer_lr=a.beta, inner_lr=alpha, inner_steps=a.inner_steps,
                     support_size=a.support, epochs=a.epochs, holdout_task=a.holdout_task, seed=a.seed)
    cfg.validate(ds.num_tasks)
    train_idx, _ = split_dataset(ds, a.train_fraction, a.split_seed)
    normalizer = zscore_fit(ds, train_idx)
    mp, log = reptile_train(arch, ds, train_idx, normalizer, cfg)
    hp = {
        **arch.to_dict(),
        "alpha": alpha, "beta": a.beta, "inner_steps": a.inner_steps, "support": a.support,
        "epochs": a.epochs, "holdout_task": a.holdout_task, "seed": a.seed,
        "split_seed": a.split_seed, "train_fraction": a.train_fraction,
        "normalizer": {"mean": normalizer.mean, "std": normalizer.std},
        "task_names": list(ds.task_names),
    }
    doc = paramset_to_document(arch.kind, hp, mp.params, mp.buffers)
    _write_atomic(a.out / PARAMS_FILE, dumps_exact(doc) + "\n")
    _write_atomic(a.out / LOG_FILE, log.to_csv())
    return EXIT_OK


def _protocol_checks(a) -> None:
    _require(a.trials >= 1, "--trials must be >= 1")
    _require(a.steps >= 0, "--steps must be >= 0")
    _require(a.support >= 1, "--support must be >= 1")
    _require(a.alpha is None or a.alpha >= 0, "--alpha must be >= 0")
    _require(a.jobs >= 1, "--jobs must be >= 1")


def _task_and_normalizer(a, ds, hp: dict):
    """Held-out task on the test split, plus the normalizer the model was trained with."""
    split_seed = hp.get("split_seed", 0) if a.split_seed is None else a.split_seed
    fraction = hp.get("train_fraction", 0.9) if a.train_fraction is None else a.train_fraction
    train_idx, test_idx = split_dataset(ds, fraction, split_seed)
    task = hp.get("holdout_task", 0) if a.task is None else a.task
    _require(0 <= task < ds.num_tasks, f"--task {task} outside [0, {ds.num_tasks})")
    _require(len(test_idx) >= 2 * a.support,
             f"test split has {len(test_idx)} graphs; support and query need {2 * a.support}")
    normalizer = _normalizer_from(hp) or zscore_fit(ds, train_idx)
    return Task(task, test_idx), normalizer


def _protocol(a, hp: dict, kind: str) -> dict:
    alpha = a.alpha if a.alpha is not None else hp.get("alpha", default_inner_lr(kind))
    return dict(trials=a.trials, support_size=a.support, alpha=float(alpha), k=a.steps,
                seed=a.seed, jobs=a.jobs)


def cmd_eval(a) -> int:
    _protocol_checks(a)
    if a.random_init:
        _require(a.params is None, "--random-init and --params are mutually exclusive")
        _require(a.arch is not None, "--random-init needs --arch")
    else:
        _require(a.params is not None, "eval needs --params or --random-init")
    ds = load_dataset(a.data)
    if a.random_init:
        arch = Architecture(a.arch, ds.d_node, ds.d_edge, a.hidden_dim, a.layers)
        hp = {}
    else:
        mp, hp = load_model(a.params)
        arch = mp.arch
        _require(a.arch is None or a.arch == arch.kind, f"--arch {a.arch} but the model is {arch.kind}")
    _check_fits(arch, ds)
    task, normalizer = _task_and_normalizer(a, ds, hp)
    proto = _protocol(a, hp, arch.kind)
    if a.random_init:
        report = baseline_random(arch, ds, task, normalizer, **proto)
    else:
        report = evaluate(mp, ds, task, normalizer, **proto)
    _write_atomic(a.out, reports_to_csv([report]))
    return EXIT_OK


def cmd_ensemble_eval(a) -> int:
    _protocol_checks(a)
    paths = [Path(p) for p in a.params.split(",") if p]
    _require(len(paths) >= 1, "--params needs at least one file")
    ds = load_dataset(a.data)
    loaded = [load_model(p) for p in paths]
    hp = loaded[0][1]
    for p, (_, other) in zip(paths, loaded):
        for key in ("split_seed", "train_fraction", "normalizer"):
            _require(other.get(key) == hp.get(key), f"{p}: {key} differs from {paths[0]}")
    ens = ensemble_init([mp for mp, _ in loaded], a.agg)
    _check_fits(ens.arch, ds)
    task, normalizer = _task_and_normalizer(a, ds, hp)
    report = evaluate(ens, ds, task, normalizer, **_protocol(a, hp, ens.arch.kind))
    _write_atomic(a.out, reports_to_csv([report]))
    return EXIT_OK


def cmd_report(a) -> int:
    reports = []
    for path in a.inputs:
        reports += read_reports_csv(path.read_text(encoding="utf-8"))
    _require(bool(reports), "no report rows in the inputs")
    groups: dict[tuple[str, str], list] = {}
    for r in reports:
        groups.setdefault((r.model, r.init), []).append(r)
    rows = [aggregate_across_tasks(g, a.exclude) for g in groups.values()]
    _write_atomic(a.out, reports_to_csv(rows))
    return EXIT_OK


def _check_arch(a) -> Architecture:
    return Architecture(a.arch, a.d_node, a.d_edge, a.hidden_dim, a.layers)


def cmd_gradcheck(a) -> int:
    _require(a.tolerance > 0, "--tolerance must be positive")
    _require(a.probes >= 1, "--probes must be >= 1")
    arch = _check_arch(a)
    err = gradcheck(arch, a.seed, probes=a.probes)
    ok = err < a.tolerance
    print(f"gradcheck {arch.kind}: max relative error {err:.3e} (tolerance {a.tolerance:g}) "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_invariants(a) -> int:
    _require(a.tolerance > 0, "--tolerance must be positive")
    arch = _check_arch(a)
    perm = permutation_deviation(arch, a.seed, a.permutations)
    scalar, coords = e3_deviation(model_init(arch, a.seed), a.seed, a.rotations)
    results = [("permutation", perm), ("e3 scalar output", scalar)]
    if arch.uses_coords:
        results.append(("e3 coordinates", coords))
    ok = True
    for name, dev in results:
        passed = dev < a.tolerance
        ok &= passed
        print(f"{arch.kind} {name}: max deviation {dev:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_INVALID


# ---------------------------------------------------------------------------
# parser


def _add_arch_shape(p, *, with_dims: bool) -> None:
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--layers", type=int, default=3)
    if with_dims:
        p.add_argument("--d-node", type=int, default=4)
        p.add_argument("--d-edge", type=int, default=2)


def _add_protocol(p) -> None:
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--task", type=int, default=None, help="target index (default: the model's holdout task)")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--support", type=int, default=10)
    p.add_argument("--alpha", type=float, default=None, help="adaptation rate (default: training alpha)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=None)
    p.add_argument("--train-fraction", type=float, default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="metagnn", description="Reptile meta-learning for few-shot graph regression.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic related-task dataset")
    p.add_argument("--graphs", type=int, default=500)
    p.add_argument("--tasks", type=int, default=8)
    p.add_argument("--nodes-min", type=int, default=5)
    p.add_argument("--nodes-max", type=int, default=15)
    p.add_argument("--d-node", type=int, default=4)
    p.add_argument("--d-edge", type=int, default=2)
    p.add_argument("--coords", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="meta-train an initialization with Reptile")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--arch", choices=KINDS, required=True)
    p.add_argument("--holdout-task", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2000)
    p.add_argument("--alpha", type=float, default=None, help="inner rate (default 5e-3, 5e-4 for mpnn/egnn)")
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--inner-steps", type=int, default=5)
    p.add_argument("--support", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.9)
    _add_arch_shape(p, with_dims=False)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="k-shot evaluation of a trained or random initialization")
    p.add_argument("--params", type=Path, default=None)
    p.add_argument("--random-init", action="store_true")
    p.add_argument("--arch", choices=KINDS, default=None)
    _add_arch_shape(p, with_dims=False)
    _add_protocol(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble-eval", help="k-shot evaluation of an ensemble")
    p.add_argument("--params", required=True, help="comma-separated parameter files")
    p.add_argument("--agg", choices=("average", "learned"), default="average")
    _add_protocol(p)
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("report", help="aggregate per-task report CSVs")
    p.add_argument("--inputs", type=Path, nargs="+", required=True)
    p.add_argument("--exclude", nargs="*", default=[])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gradcheck", help="compare gradients with finite differences")
    p.add_argument("--arch", choices=KINDS, required=True)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--probes", type=int, default=100)
    _add_arch_shape(p, with_dims=True)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("invariants", help="permutation and E(3) symmetry checks")
    p.add_argument("--arch", choices=KINDS, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.add_argument("--permutations", type=int, default=50)
    p.add_argument("--rotations", type=int, default=20)
    _add_arch_shape(p, with_dims=True)
    p.set_defaults(func=cmd_invariants)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (DivergenceError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
