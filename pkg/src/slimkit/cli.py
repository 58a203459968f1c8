"""Command-line surface: toy | slimset | calibrate | compress | allocate | report | verify.

Every subcommand is deterministic given its inputs, seed, and flags. Exit
codes: 0 ok, 1 property violation, 2 configuration error, 3 data error,
4 infeasible budget. The worker pool size comes from --workers, overridden
by the SLIMKIT_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import pipeline, report as report_mod, verify as verify_mod
from .alloc import AllocationPlan, format_plan
from .bundle import load_bundle, save_bundle
from .errors import ConfigError, SlimkitError
from .model import make_toy_model, model_from_bundle, model_to_bundle
from .slimset import CoresetConfig, EmbeddingPool, build_coreset

WEIGHTING_CHOICES = {"uniform": "uniform", "trq": "trq_proportional",
                     "trq_softmax": "trq_softmax"}


def _write_json(path, payload) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _workers(args) -> int:
    env = os.environ.get("SLIMKIT_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"SLIMKIT_THREADS={env!r} is not an integer") from exc
    return max(1, args.workers)


def _load_model(path):
    model, warnings = model_from_bundle(load_bundle(path))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return model


def _parse_family_offsets(specs):
    offsets = {}
    for spec in specs or []:
        try:
            family, value = spec.split("=", 1)
            offsets[family.strip()] = float(value)
        except ValueError as exc:
            raise ConfigError(f"bad --family-offset {spec!r}, want family=value") from exc
    return offsets


# ---------------------------------------------------------------------------
# subcommands


def cmd_toy(args) -> int:
    out = Path(args.out_dir)
    model = make_toy_model(
        seed=args.seed,
        blocks=args.blocks,
        d=args.d,
        heads=args.heads,
        d_int=args.d_int,
        d_text=args.d_text,
    )
    save_bundle(model_to_bundle(model), out / "model.bundle")
    acts = pipeline.generate_toy_activations(
        model,
        seed=args.seed,
        timesteps=args.timesteps,
        sequences=args.sequences,
        tokens=args.tokens,
        text_tokens=args.text_tokens,
    )
    save_bundle(acts, out / "activations.bundle")
    probes = pipeline.generate_probes(
        model,
        seed=args.seed,
        count=args.probes,
        tokens=args.tokens,
        text_tokens=args.text_tokens,
        timesteps=args.timesteps,
    )
    save_bundle(probes, out / "probes.bundle")
    emb = pipeline.generate_toy_embeddings(
        seed=args.seed, count=args.embeddings, dim=args.embed_dim
    )
    save_bundle(emb, out / "embeddings.bundle")
    print(f"wrote model/activations/probes/embeddings bundles under {out}")
    return 0


def cmd_slimset(args) -> int:
    bundle = load_bundle(args.embeddings)
    ids = bundle.metadata.get("ids")
    if ids is None:
        raise ConfigError("embeddings bundle metadata lacks an 'ids' list")
    pool = EmbeddingPool(ids=list(ids), vectors=bundle.array("embeddings"))
    config = CoresetConfig(
        target_size=args.size,
        bins=args.bins,
        dedup_cos_threshold=args.dedup_threshold,
        median_tol=args.median_tol,
        median_max_iter=args.median_max_iter,
    )
    coreset = build_coreset(pool, config)
    payload = {
        "config": {
            "target_size": config.target_size,
            "bins": config.bins,
            "dedup_cos_threshold": config.dedup_cos_threshold,
            "median_tol": config.median_tol,
            "median_max_iter": config.median_max_iter,
        },
        "pool_size": pool.count,
        "selected_ids": coreset.selected_ids,
        "distinctiveness": {
            pid: coreset.distinctiveness[pid] for pid in coreset.selected_ids
        },
        "quotas": coreset.quotas,
        "median": [float(v) for v in coreset.median],
    }
    _write_json(args.out, payload)
    print(f"selected {len(coreset.selected_ids)} of {pool.count} -> {args.out}")
    return 0


def cmd_calibrate(args) -> int:
    model = _load_model(args.model)
    acts = load_bundle(args.activations)
    result = pipeline.calibrate(
        acts,
        model,
        lam=args.reg_lambda,
        strategy=WEIGHTING_CHOICES[args.weighting],
        tau=args.tau,
    )
    # fail fast if any module input stream never appeared in the taps
    pipeline._check_streams(model, result.mixed)
    save_bundle(pipeline.stats_to_bundle(result), args.out)
    print(
        f"calibrated {len(result.stats)} statistics across "
        f"{len(result.mixed)} streams -> {args.out}"
    )
    return 0


def _resolve_plan(args, model, stats_bundle) -> AllocationPlan:
    if getattr(args, "plan", None):
        return AllocationPlan.from_dict(json.loads(Path(args.plan).read_text()))
    if args.budget is None:
        raise ConfigError("need either --plan or --budget")
    scores = pipeline.block_scores_from_table(
        pipeline.trq_table_from_bundle(stats_bundle)
    )
    budget = pipeline.resolve_budget(args.budget, model.param_count())
    return pipeline.allocate(
        model,
        scores,
        budget=budget,
        epsilon=args.epsilon,
        r_min=args.r_min,
        rounding_multiple=args.multiple,
        family_offsets=_parse_family_offsets(args.family_offset),
    )


def cmd_allocate(args) -> int:
    model = _load_model(args.model)
    stats_bundle = load_bundle(args.stats)
    plan = _resolve_plan(args, model, stats_bundle)
    _write_json(args.out, plan.to_dict())
    print(format_plan(plan))
    print(f"plan -> {args.out}")
    return 0


def cmd_compress(args) -> int:
    model = _load_model(args.model)
    stats_bundle = load_bundle(args.stats)
    plan = _resolve_plan(args, model, stats_bundle)
    mixed = pipeline.mixed_from_stats_bundle(stats_bundle)
    probes = load_bundle(args.probes) if args.probes else None
    compressed, rep = pipeline.compress_model(
        model, mixed, plan, probes=probes, workers=_workers(args)
    )
    ckpt = model_to_bundle(
        compressed,
        extra_metadata={"compressed": True, "plan_hash": rep.plan_hash},
    )
    ranks = plan.rank_of()
    for name in ckpt.names():
        rec = ckpt.get(name)
        family = rec.metadata.get("family")
        block = rec.metadata.get("block")
        if family and block:
            rec.metadata["achieved_rank"] = ranks[f"{block}.{family}"]
    save_bundle(ckpt, args.out)
    _write_json(args.report, rep.to_dict())
    print(
        f"params {rep.params_before} -> {rep.params_after} "
        f"(budget {rep.budget:.0f}); checkpoint -> {args.out}; "
        f"report -> {args.report}"
    )
    return 0


def cmd_report(args) -> int:
    rep = pipeline.CompressionReport.from_dict(json.loads(Path(args.report).read_text()))
    trq_table = None
    if args.stats:
        trq_table = pipeline.trq_table_from_bundle(load_bundle(args.stats))
    written = report_mod.render_report(rep, args.out_dir, trq_table=trq_table)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_verify(args) -> int:
    results = verify_mod.run_suites(
        seeds=args.seeds,
        base_seed=args.seed,
        break_whitening=args.break_whitening,
    )
    failed = False
    for res in results:
        print(res.line())
        failed = failed or not res.passed
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slimkit",
        description="Training-free activation-guided structural compression",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0, help="run seed")
        p.add_argument("--workers", type=int, default=1, help="worker pool size")

    p = sub.add_parser("toy", help="generate toy model/activation/probe/embedding bundles")
    common(p)
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--d-int", type=int, default=None)
    p.add_argument("--d-text", type=int, default=None)
    p.add_argument("--timesteps", type=int, default=5)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--tokens", type=int, default=16)
    p.add_argument("--text-tokens", type=int, default=8)
    p.add_argument("--probes", type=int, default=4)
    p.add_argument("--embeddings", type=int, default=2000)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("slimset", help="select a calibration coreset from embeddings")
    common(p)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--size", type=int, default=500)
    p.add_argument("--bins", type=int, default=8)
    p.add_argument("--dedup-threshold", type=float, default=0.95)
    p.add_argument("--median-tol", type=float, default=1e-8)
    p.add_argument("--median-max-iter", type=int, default=200)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slimset)

    p = sub.add_parser("calibrate", help="accumulate activation statistics")
    common(p)
    p.add_argument("--activations", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=1e-4)
    p.add_argument("--weighting", choices=sorted(WEIGHTING_CHOICES), default="trq")
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_calibrate)

    def allocation_flags(p):
        p.add_argument("--budget", default=None,
                       help="parameter budget; absolute count or ratio like 0.73x")
        p.add_argument("--epsilon", type=float, default=None)
        p.add_argument("--r-min", type=int, default=8)
        p.add_argument("--multiple", type=int, default=8)
        p.add_argument("--family-offset", action="append", default=None,
                       metavar="FAMILY=VALUE")

    p = sub.add_parser("allocate", help="compute a rank-allocation plan")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    allocation_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("compress", help="compress a model under a plan or budget")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--stats", required=True)
    p.add_argument("--plan", default=None)
    allocation_flags(p)
    p.add_argument("--probes", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("report", help="render metrics and figures from a report")
    common(p)
    p.add_argument("--report", required=True)
    p.add_argument("--stats", default=None)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run the closed-form property suites")
    common(p)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--break-whitening", action="store_true",
                   help="negative control: skip whitening and expect failure")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    np.seterr(all="raise", under="ignore")
    try:
        return args.func(args)
    except SlimkitError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
