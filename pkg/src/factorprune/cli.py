"""Command-line surface: train | prune | compact | eval | bench | report.

Every subcommand validates its inputs and exits nonzero with a single
machine-parsable JSON error line on stderr. Flag overrides beat the
config file.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys

import click

from . import config as config_mod
from .config import ConfigError, RunConfig


def _fail(code, message):
    click.echo(json.dumps({"error": code, "message": str(message)}), err=True)
    sys.exit(2)


def _load_config(config_path, seed, method, target_compression, out) -> RunConfig:
    try:
        cfg = config_mod.load(config_path) if config_path else RunConfig()
    except (ConfigError, OSError) as exc:
        _fail("bad-config", exc)
    updates = {}
    if seed is not None:
        updates["seed"] = seed
    if method is not None:
        updates["method"] = method
    if target_compression is not None:
        updates["target_compression"] = target_compression
    if out is not None:
        updates["out_dir"] = out
    elif not cfg.out_dir:
        updates["out_dir"] = os.path.join(config_mod.default_out_dir(), cfg.method)
    try:
        cfg = dataclasses.replace(cfg, **updates)
    except (ConfigError, ValueError) as exc:
        _fail("bad-config", exc)
    return cfg


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="JSON run config")(fn)
    fn = click.option("--seed", type=click.IntRange(0, 2 ** 64 - 1), default=None)(fn)
    fn = click.option("--method", type=click.Choice(["flop-l0", "flop-agp", "np-l0", "fac"]),
                      default=None)(fn)
    fn = click.option("--target-compression", type=click.FloatRange(0.0, 1.0, max_open=True),
                      default=None)(fn)
    fn = click.option("--out", type=click.Path(), default=None,
                      help="output directory (default $FACTORPRUNE_OUT)")(fn)
    return fn


@click.group()
def main():
    """Structured pruning of factorized layers, desk scale."""


@main.command()
@common_options
def train(config_path, seed, method, target_compression, out):
    """Warmup-train a factorized model (full training for fac)."""
    cfg = _load_config(config_path, seed, method, target_compression, out)
    from .runner import run_train

    try:
        result = run_train(cfg)
    except (ValueError, OSError) as exc:
        _fail("train-failed", exc)
    click.echo(json.dumps({"checkpoint": result["checkpoint"],
                           "valid_bpc": round(result["valid_bpc"], 6)}))


@main.command()
@common_options
@click.option("--from", "warmup_ckpt", type=click.Path(exists=True), default=None,
              help="warmup checkpoint; omitted runs warmup inline")
def prune(config_path, seed, method, target_compression, out, warmup_ckpt):
    """Prune with the size controller (or the AGP schedule)."""
    cfg = _load_config(config_path, seed, method, target_compression, out)
    from .runner import run_prune

    try:
        result = run_prune(cfg, warmup_checkpoint=warmup_ckpt)
    except (ValueError, OSError) as exc:
        _fail("prune-failed", exc)
    rep = result["report"]
    click.echo(json.dumps({
        "checkpoint": result["checkpoint"],
        "valid_bpc": round(result["valid_bpc"], 6),
        "test_bpc": round(result["test_bpc"], 6),
        "compression": round(rep.compression, 6),
        "kept_total": rep.kept_total,
    }))


@main.command()
@common_options
@click.option("--from", "pruned_ckpt", type=click.Path(exists=True), required=True,
              help="pruned checkpoint to compact")
def compact(config_path, seed, method, target_compression, out, pruned_ckpt):
    """Materialize the deterministic mask into smaller dense matrices."""
    cfg = _load_config(config_path, seed, method, target_compression, out)
    from .runner import run_compact

    try:
        result = run_compact(cfg, pruned_ckpt)
    except (ValueError, OSError) as exc:
        _fail("compact-failed", exc)
    click.echo(json.dumps({"checkpoint": result["checkpoint"],
                           "kept_total": result["report"].kept_total,
                           "compression": round(result["report"].compression, 6)}))


@main.command(name="eval")
@common_options
@click.option("--from", "ckpt_path", type=click.Path(exists=True), required=True)
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test")
def eval_cmd(config_path, seed, method, target_compression, out, ckpt_path, split):
    """Bits-per-character of a checkpoint on a split."""
    cfg = _load_config(config_path, seed, method, target_compression, out)
    from .runner import run_eval

    try:
        result = run_eval(cfg, ckpt_path, split)
    except (ValueError, OSError) as exc:
        _fail("eval-failed", exc)
    click.echo(json.dumps({"split": split, "bpc": round(result["bpc"], 6)}))


@main.command()
@common_options
@click.option("--d-out", type=int, default=3056, show_default=True)
@click.option("--d-in", type=int, default=3056, show_default=True)
@click.option("--rank", "r_full", type=int, default=512, show_default=True)
@click.option("--kept", "kept_ranks", type=str, default="256,102,51",
              show_default=True, help="comma-separated kept ranks")
@click.option("--batch", type=int, default=64, show_default=True)
@click.option("--trials", type=int, default=30, show_default=True)
@click.option("--parallel", is_flag=True, help="allow multi-threaded BLAS")
@click.option("--kernels", "kernels_mode", is_flag=True,
              help="compare compiled vs numpy elementwise kernels instead")
def bench(config_path, seed, method, target_compression, out, d_out, d_in,
          r_full, kept_ranks, batch, trials, parallel, kernels_mode):
    """Time compacted matmuls at several kept ranks (or the kernel backends)."""
    from .bench import (bench_compacted, bench_kernels, render_bench_table,
                        render_kernel_table)

    out_dir = out or config_mod.default_out_dir()
    os.makedirs(out_dir, exist_ok=True)
    if kernels_mode:
        rows = bench_kernels()
        click.echo(render_kernel_table(rows))
        path = os.path.join(out_dir, "bench_kernels.jsonl")
        with open(path, "w", encoding="utf-8") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
        return
    try:
        ranks = [int(tok) for tok in kept_ranks.split(",") if tok]
        results = bench_compacted(d_out, d_in, r_full, ranks, batch=batch,
                                  trials=trials, seed=seed or 0,
                                  single_thread=not parallel)
    except ValueError as exc:
        _fail("bench-failed", exc)
    click.echo(render_bench_table(results))
    path = os.path.join(out_dir, "bench.jsonl")
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


@main.command()
@click.argument("run_dirs", nargs=-1, type=click.Path(exists=True))
def report(run_dirs):
    """Summary table (size, compression, bpc) over run directories."""
    from .report import render_table, summarize_run

    if not run_dirs:
        _fail("no-runs", "pass one or more run directories")
    rows = [summarize_run(d) for d in run_dirs]
    click.echo(render_table(rows))


if __name__ == "__main__":
    main()
