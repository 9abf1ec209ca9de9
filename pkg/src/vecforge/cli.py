"""Command line front end.

One command equals one process; every command's outputs are a pure function
of its flags, its input files, and the seed, so reruns are byte-identical.
Validation failures exit 2, numerical failures exit 3, I/O and container
format problems exit 4. Diagnostics go to standard error as line-delimited
"level key=value" records; result data goes to the named output files or
standard output.

    vecforge synth   build a synthetic task suite directory
    vecforge cov     accumulate per-layer activation covariance
    vecforge alloc   allocate ranks across tasks under a budget
    vecforge merge   run a merge recipe end to end
    vecforge eval    score a checkpoint on a synthetic task
    vecforge fig3    rank-sweep pruning experiment, CSV output
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import covariance as cov_mod
from . import merge as merge_mod
from . import rank_alloc, workbench
from .container import read_checkpoint, read_covariances, write_container
from .errors import (
    EmptyStream,
    IoFailure,
    MissingCovariance,
    ValidationError,
    VecforgeError,
)


def log(level: str, **kv) -> None:
    parts = [level] + [f"{k}={v}" for k, v in kv.items()]
    print(" ".join(parts), file=sys.stderr)


def _write_text(path: str | Path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _thread_count(value: int | None) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("VECFORGE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValidationError(f"VECFORGE_THREADS is not an integer: {env!r}")
    return os.cpu_count() or 1


# --- subcommands ---------------------------------------------------------------


def cmd_synth(args: argparse.Namespace) -> int:
    specs = workbench.default_specs(
        n_tasks=args.tasks,
        seed=args.seed,
        noise_scale=args.noise,
        subspace_dim=args.subspace,
        anisotropy=args.anisotropy,
        delta_scale=args.delta_scale,
        input_dim=args.input_dim,
        hidden_dim=args.hidden_dim,
        output_dim=args.output_dim,
        planted_rank=args.planted_rank,
    )
    suite = workbench.synth_suite(specs, base_seed=args.seed)
    workbench.save_suite(suite, args.out)
    log("info", cmd="synth", out=args.out, tasks=args.tasks, seed=args.seed)
    return 0


def cmd_cov(args: argparse.Namespace) -> int:
    model = read_checkpoint(args.model)
    task_id = args.task_id or model.metadata.get("task_id", "")
    if args.acts:
        acts = read_checkpoint(args.acts)
        streams = cov_mod.streams_from_container(acts)
    else:
        suite = workbench.load_suite(args.suite)
        spec = suite.spec_for(task_id or model.metadata.get("model_id", ""))
        if args.samples <= 0:
            raise EmptyStream(f"need at least one synthetic sample, got {args.samples}")
        streams = workbench.run_activations(model, spec, args.samples, args.seed)
    missing = [l for l in model.linear_layers if l not in streams]
    if missing:
        raise MissingCovariance(f"no activations for linear layers: {missing}")
    ordered = [streams[l] for l in model.linear_layers]
    covs = cov_mod.build_covariance_set(
        ordered, task_id=task_id, identity_fallback=args.identity_fallback
    )
    write_container(covs, args.out)
    boosts = {l: covs.entries[l].diag_boost for l in model.linear_layers}
    counts = {l: covs.entries[l].sample_count for l in model.linear_layers}
    log("info", cmd="cov", out=args.out, layers=len(ordered),
        counts=json.dumps(counts), boosts=json.dumps(boosts))
    return 0


def cmd_alloc(args: argparse.Namespace) -> int:
    if len(args.models) != len(args.covs):
        raise ValidationError(
            f"{len(args.models)} models but {len(args.covs)} covariance files"
        )
    checkpoints = [read_checkpoint(p) for p in args.models]
    cov_sets = [read_covariances(p) for p in args.covs]
    gamma = args.gamma if args.gamma is not None else args.rho - (1.0 - args.rho) / 2.0
    exempt = frozenset(filter(None, (args.exempt or "").split(",")))
    profiles = rank_alloc.build_profiles(checkpoints, cov_sets)
    alloc = rank_alloc.allocate(profiles, rho=args.rho, gamma=gamma, exempt=exempt)
    rank_alloc.write_allocation(alloc, args.out)
    for model, ratio in rank_alloc.per_model_ratios(alloc).items():
        print(f"{model}\t{ratio}")
    log("info", cmd="alloc", out=args.out, rho=args.rho, gamma=gamma)
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    recipe = merge_mod.load_recipe(args.recipe)
    merged = merge_mod.run_recipe(
        recipe, root=Path(args.recipe).parent, threads=args.threads_resolved
    )
    out = Path(args.out)
    write_container(merged.weights, out)
    resolved = out.with_suffix(out.suffix + ".recipe.json")
    _write_text(
        resolved,
        json.dumps(merge_mod.recipe_to_dict(recipe), indent=2, sort_keys=True) + "\n",
    )
    artifacts_path = None
    if merged.emr is not None:
        artifacts_path = out.with_suffix(out.suffix + ".emr.safetensors")
        write_container(merge_mod.emr_to_checkpoint(merged.emr), artifacts_path)
    log("info", cmd="merge", method=recipe.method, out=str(out),
        recipe=str(resolved), artifacts=str(artifacts_path))
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    weights = read_checkpoint(args.weights)
    suite = workbench.load_suite(args.suite)
    spec = suite.spec_for(args.task)
    score = workbench.eval_model(
        weights, spec, args.n, args.seed, suite.reference_for(args.task)
    )
    lines = ["task,n_eval,seed,score", f"{args.task},{args.n},{args.seed},{score}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    log("info", cmd="eval", task=args.task, score=score)
    return 0


def cmd_fig3(args: argparse.Namespace) -> int:
    suite = workbench.load_suite(args.suite)
    ranks = [int(r) for r in args.ranks.split(",") if r]
    if not ranks:
        raise ValidationError("at least one rank is required")
    decomposers = tuple(d for d in args.decomposers.split(",") if d)
    rows = workbench.figure3_experiment(
        suite,
        ranks,
        decomposers=decomposers,
        n_samples=args.samples,
        n_eval=args.n_eval,
        seed=args.seed,
    )
    lines = ["decomposer,rank,task,score,seed"]
    for row in rows:
        lines.append(
            f"{row['decomposer']},{row['rank']},{row['task']},{row['score']},{row['seed']}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_text(args.out, text)
    else:
        sys.stdout.write(text)
    log("info", cmd="fig3", rows=len(rows))
    return 0


# --- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecforge",
        description="Covariance-guided task vector purification and merging.",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads for per-layer work (default: VECFORGE_THREADS or cores)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic task suite directory")
    p.add_argument("--out", required=True, help="suite directory to create")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--tasks", type=int, default=workbench.DEFAULT_TASKS)
    p.add_argument("--noise", type=float, default=workbench.DEFAULT_NOISE_SCALE)
    p.add_argument("--subspace", type=int, default=workbench.DEFAULT_SUBSPACE_DIM)
    p.add_argument("--anisotropy", type=float, default=workbench.DEFAULT_ANISOTROPY)
    p.add_argument("--delta-scale", type=float, default=workbench.DEFAULT_DELTA_SCALE)
    p.add_argument("--input-dim", type=int, default=workbench.DEFAULT_INPUT_DIM)
    p.add_argument("--hidden-dim", type=int, default=workbench.DEFAULT_HIDDEN_DIM)
    p.add_argument("--output-dim", type=int, default=workbench.DEFAULT_OUTPUT_DIM)
    p.add_argument("--planted-rank", type=int, default=workbench.DEFAULT_PLANTED_RANK)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("cov", help="accumulate activation covariance for a model")
    p.add_argument("--model", required=True, help="checkpoint whose layers are profiled")
    p.add_argument("--out", required=True, help="covariance container to write")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--acts", help="container of recorded batches <layer>.acts.<i>")
    src.add_argument("--suite", help="synthetic suite directory to sample from")
    p.add_argument("--samples", type=int, default=1024, help="synthetic sample count")
    p.add_argument("--seed", type=int, default=0, help="synthetic sampling seed")
    p.add_argument("--task-id", default=None, help="task id recorded in the output")
    p.add_argument(
        "--identity-fallback",
        action="store_true",
        help="use the identity when a layer has zero activation energy",
    )
    p.set_defaults(func=cmd_cov)

    p = sub.add_parser("alloc", help="allocate ranks across tasks under a budget")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--covs", nargs="+", required=True)
    p.add_argument("--rho", type=float, required=True, help="kept-rank budget share")
    p.add_argument("--gamma", type=float, default=None,
                   help="per-model floor share (default rho - (1-rho)/2)")
    p.add_argument("--exempt", default="", help="comma-separated full-rank model ids")
    p.add_argument("--out", required=True, help="allocation text file to write")
    p.set_defaults(func=cmd_alloc)

    p = sub.add_parser("merge", help="run a merge recipe end to end")
    p.add_argument("--recipe", required=True, help="recipe JSON (paths relative to it)")
    p.add_argument("--out", required=True, help="merged checkpoint to write")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="score a checkpoint on a synthetic task")
    p.add_argument("--weights", required=True)
    p.add_argument("--suite", required=True, help="synthetic suite directory")
    p.add_argument("--task", required=True)
    p.add_argument("--n", type=int, default=2048, help="evaluation sample count")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fig3", help="rank-sweep pruning experiment (CSV)")
    p.add_argument("--suite", required=True, help="synthetic suite directory")
    p.add_argument("--ranks", required=True, help="comma-separated ranks")
    p.add_argument(
        "--decomposers",
        default="plain_svd,co_svd,co_svd_crosstask",
        help="comma-separated decomposer variants",
    )
    p.add_argument("--samples", type=int, default=1024, help="covariance sample count")
    p.add_argument("--n-eval", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="CSV file (default: stdout)")
    p.set_defaults(func=cmd_fig3)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.threads_resolved = _thread_count(args.threads)
        return args.func(args)
    except VecforgeError as exc:
        log("error", kind=type(exc).__name__, message=str(exc))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
