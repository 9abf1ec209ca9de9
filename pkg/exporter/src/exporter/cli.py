"""Command line front end for checkpoint and covariance export.

One command equals one process; outputs are a pure function of the flags,
the manifest, and the sample file. Validation failures exit 2, hook and
numerical failures exit 3, I/O problems exit 4. Diagnostics go to standard
error as line-delimited "level key=value" records.

    vecforge-export export-weights   dump mapped weights to a checkpoint container
    vecforge-export export-cov       accumulate input covariances over token samples
    vecforge-export make-samples     write a random token-id sample file
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ExporterError, SampleSourceEmpty
from .export import (
    export_covariance,
    export_weights,
    random_token_samples,
    write_sample_file,
)
from .manifest import DTYPE_POLICIES, load_manifest
from .models import resolve_model


def log(level: str, **kv) -> None:
    parts = [level] + [f"{k}={v}" for k, v in kv.items()]
    print(" ".join(parts), file=sys.stderr)


def _load(args: argparse.Namespace):
    manifest = load_manifest(args.manifest)
    if args.model_id:
        manifest = replace(manifest, model_id=args.model_id)
    if getattr(args, "dtype_policy", None):
        manifest = replace(manifest, dtype_policy=args.dtype_policy)
    manifest.validate()
    return manifest


# --- subcommands ---------------------------------------------------------------


def cmd_export_weights(args: argparse.Namespace) -> int:
    manifest = _load(args)
    model = resolve_model(manifest.model_id)
    export_weights(model, manifest, args.out)
    log("info", cmd="export-weights", out=args.out, model=manifest.model_id,
        layers=len(manifest.mapping), policy=manifest.dtype_policy)
    return 0


def cmd_export_cov(args: argparse.Namespace) -> int:
    manifest = _load(args)
    if args.samples:
        sample_path = Path(args.samples)
    elif manifest.sample_path:
        sample_path = Path(args.manifest).parent / manifest.sample_path
    else:
        raise SampleSourceEmpty(
            "no sample source: pass --samples or set sample.path in the manifest"
        )
    n = args.n if args.n is not None else manifest.sample_count
    model = resolve_model(manifest.model_id)
    export_covariance(model, manifest, sample_path, n, args.out)
    log("info", cmd="export-cov", out=args.out, model=manifest.model_id,
        layers=len(manifest.mapping), n=n)
    return 0


def cmd_make_samples(args: argparse.Namespace) -> int:
    ids = random_token_samples(args.vocab, args.sequences, args.seq_len, args.seed)
    write_sample_file(ids, args.out)
    log("info", cmd="make-samples", out=args.out, sequences=args.sequences,
        seq_len=args.seq_len, vocab=args.vocab, seed=args.seed)
    return 0


# --- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecforge-export",
        description="export transformer weights and covariances to containers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export-weights", help="dump mapped weights to a container")
    p.add_argument("--manifest", required=True, help="export manifest JSON")
    p.add_argument("--out", required=True, help="checkpoint container to write")
    p.add_argument("--model-id", default=None, help="override the manifest model id")
    p.add_argument("--dtype-policy", default=None, choices=DTYPE_POLICIES,
                   help="override the manifest dtype policy")
    p.set_defaults(func=cmd_export_weights)

    p = sub.add_parser("export-cov", help="accumulate input covariances")
    p.add_argument("--manifest", required=True, help="export manifest JSON")
    p.add_argument("--out", required=True, help="covariance container to write")
    p.add_argument("--samples", default=None,
                   help="token sample file (default: manifest sample.path,"
                        " relative to the manifest)")
    p.add_argument("--n", type=int, default=None,
                   help="token positions to accumulate (default: manifest"
                        " sample.count)")
    p.add_argument("--model-id", default=None, help="override the manifest model id")
    p.set_defaults(func=cmd_export_cov)

    p = sub.add_parser("make-samples", help="write a random token-id sample file")
    p.add_argument("--vocab", type=int, required=True, help="vocabulary size")
    p.add_argument("--sequences", type=int, default=64)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="sample container to write")
    p.set_defaults(func=cmd_make_samples)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ExporterError as exc:
        log("error", kind=type(exc).__name__, message=str(exc))
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
