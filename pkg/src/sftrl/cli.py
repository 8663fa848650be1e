"""Command line entry point: ``sftrl <command> ...``.

Single-stage commands (baseline, sft, rl, hybrid, distill) take the same keys
as a spec stage via ``--set key=value``; ``run`` executes a whole spec file or
a built-in recipe.
"""
from __future__ import annotations

import argparse
import logging
import sys
from importlib import resources
from pathlib import Path
from typing import List, Optional

from . import config as cfgmod
from .analysis import (
    accuracy_by_level,
    evaluate,
    profile_from_report,
    read_correctness_matrix,
    write_correctness_matrix,
    write_gain_table,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .lab import ModelShape, parse_difficulties, query_set
from .merging import MergeMethod, ratio_sweep
from .policy import DecodingConfig, Policy, default_workers
from .runner import EXECUTORS, Run, RunError, run_experiment
from .task import TraceStyle, dataset_record, trace_text, write_dataset

RECIPE_PACKAGE = "sftrl.recipes"


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# recipes


def recipe_names() -> List[str]:
    files = resources.files(RECIPE_PACKAGE).iterdir()
    return sorted(p.name[:-4] for p in files if p.name.endswith(".cfg") and not p.name.startswith("_"))


def recipe_path(name: str) -> Path:
    ref = resources.files(RECIPE_PACKAGE) / f"{name}.cfg"
    if not ref.is_file():
        raise UsageError(f"no spec file or built-in recipe named {name!r} (recipes: {', '.join(recipe_names())})")
    return Path(str(ref))


def resolve_spec_path(arg: str) -> Path:
    p = Path(arg)
    return p if p.is_file() else recipe_path(arg)


# --------------------------------------------------------------------------
# single-stage commands


def _load_init(path: Optional[str], args) -> tuple:
    if path:
        params, pcfg, _ = load_checkpoint(path)
        return Policy(pcfg, params), ModelShape(pcfg.embed_dim, pcfg.num_layers, pcfg.num_heads, pcfg.context_len)
    shape = ModelShape()
    return Policy(shape.policy_config(args.seed)), shape


def _single_stage(kind: str, args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty")
    values = cfgmod.parse_overrides(args.set)
    needs_init = kind not in ("baseline",)
    if needs_init:
        if kind != "sft" and not args.init:
            raise UsageError(f"{kind} needs --init CHECKPOINT")
        values["init"] = "init"
    params = cfgmod._build(cfgmod.STAGE_KINDS[kind], values, kind)
    stage = cfgmod.StageSpec(kind, kind, params)
    cfgmod._validate_stage(stage, args.seed, {"init": "sft"})
    policy, shape = _load_init(getattr(args, "init", None), args)
    spec = cfgmod.ExperimentSpec(out.name, args.seed, str(out.parent), shape, [stage], None, {})
    run = Run(spec, out, workers=args.workers, policy=policy, flat=True)
    run.models["init"] = policy.params
    EXECUTORS[kind](run, kind, params)
    print(out)
    return 0


def cmd_merge(args) -> int:
    a, cfg_a, _ = load_checkpoint(args.a)
    b, cfg_b, _ = load_checkpoint(args.b)
    if cfg_a != cfg_b:
        raise UsageError("checkpoints have different architectures")
    base = load_checkpoint(args.base)[0] if args.base else None
    method = MergeMethod(args.method.upper())
    if method is MergeMethod.TIES and base is None:
        raise UsageError("TIES needs --base")
    ratios = [float(x) for x in args.ratios.split(",")]
    out = Path(args.out)
    for r, params in ratio_sweep(method, a, b, ratios, base, args.density):
        path = out / f"ratio_{r:g}" / "checkpoint.bin"
        save_checkpoint(path, params, cfg_a, {"method": method.value, "ratio": r, "density": args.density})
        print(path)
    return 0


def cmd_eval(args) -> int:
    params, pcfg, _ = load_checkpoint(args.checkpoint)
    queries = query_set(args.seed, args.label, args.queries, parse_difficulties(args.difficulties))
    if args.greedy:
        dec = DecodingConfig(greedy=True, max_new_tokens=args.max_new_tokens)
    else:
        dec = DecodingConfig(temperature=args.temperature, top_p=args.top_p, top_k=args.top_k,
                             max_new_tokens=args.max_new_tokens)
    report = evaluate(Policy(pcfg, params), queries, args.runs, dec, args.seed, args.workers)
    if args.out:
        write_correctness_matrix(args.out, report)
    print(f"accuracy\t{report.accuracy():.6f}\nstd_over_runs\t{report.accuracy_std():.6f}")
    return 0


def cmd_analyze(args) -> int:
    profile_report = read_correctness_matrix(args.profile)
    profile = profile_from_report(profile_report)
    reference = read_correctness_matrix(args.reference) if args.reference else profile_report
    gains = {}
    for item in args.eval:
        if "=" not in item:
            raise UsageError(f"--eval expects NAME=MATRIX, got {item!r}")
        name, path = item.split("=", 1)
        gains[name] = accuracy_by_level(reference, read_correctness_matrix(path), profile)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_gain_table(out / "gains.tsv", gains, profile)
    with open(out / "profile.tsv", "w") as f:
        f.write("query_id\tpass_count\truns\tlevel\n")
        for q in profile_report.query_ids:
            f.write(f"{q}\t{profile.pass_counts[q]}\t{profile.runs}\t{profile.levels[q]}\n")
    print(out / "gains.tsv")
    return 0


def cmd_data(args) -> int:
    queries = query_set(args.seed, args.label, args.queries, parse_difficulties(args.difficulties))
    style = TraceStyle(args.style.upper())
    write_dataset(args.out, (dataset_record(q, trace_text(q, style), style.value) for q in queries))
    print(args.out)
    return 0


def cmd_run(args) -> int:
    overrides = cfgmod.parse_overrides(args.set)
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    spec = cfgmod.load_spec(resolve_spec_path(args.spec), overrides)
    if args.dry_run:
        sys.stdout.write(cfgmod.render(spec.flat))
        return 0
    print(run_experiment(spec, workers=args.workers))
    return 0


def cmd_plots(args) -> int:
    from .plots import emit_plots

    for p in emit_plots(args.dir):
        print(p)
    return 0


def cmd_recipes(args) -> int:
    if args.name:
        sys.stdout.write(recipe_path(args.name).read_text())
    else:
        print("\n".join(recipe_names()))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sftrl", description="SFT / GRPO / hybrid training lab on a toy arithmetic task")
    parser.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, init=True, out=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=None, help="sampling threads (default $SFTRL_WORKERS or 1)")
        if init:
            p.add_argument("--init", help="starting checkpoint")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="stage setting, same keys as in spec files")

    for kind, text in [("baseline", "train a CONCISE baseline to a validation target"),
                       ("sft", "supervised fine-tuning"), ("rl", "GRPO"),
                       ("hybrid", "two-stage / interleaved / progressive SFT+RL"),
                       ("distill", "distill correct responses and build a mixed SFT dataset")]:
        p = sub.add_parser(kind, help=text)
        common(p, init=kind != "baseline")
        p.set_defaults(func=lambda a, k=kind: _single_stage(k, a))

    p = sub.add_parser("merge", help="merge two checkpoints over a ratio sweep")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--method", default="LINEAR", choices=["LINEAR", "TIES", "SLERP", "linear", "ties", "slerp"])
    p.add_argument("--ratios", default="0,0.25,0.5,0.75,1")
    p.add_argument("--density", type=float, default=0.2)
    p.add_argument("--base", help="shared base checkpoint (TIES)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="sampled evaluation of one checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--queries", type=int, default=200)
    p.add_argument("--difficulties", default="1,2,3,4,5")
    p.add_argument("--label", default="h", help="query-set label (ids are label + index)")
    p.add_argument("--runs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--temperature", type=float, default=0.6)
    p.add_argument("--top-p", type=float, default=0.95)
    p.add_argument("--top-k", type=int, default=20)
    p.add_argument("--max-new-tokens", type=int, default=300)
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="correctness matrix (TSV)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="per-level gains from correctness matrices")
    p.add_argument("--profile", required=True, help="baseline matrix defining difficulty levels")
    p.add_argument("--reference", help="baseline matrix the gains are measured against (default: --profile)")
    p.add_argument("--eval", action="append", default=[], metavar="NAME=MATRIX")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("data", help="write a task dataset file")
    p.add_argument("--queries", type=int, default=100)
    p.add_argument("--difficulties", default="1,2,3,4,5")
    p.add_argument("--style", default="LONG_COT_GOOD")
    p.add_argument("--label", default="q")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data)

    p = sub.add_parser("run", help="run a spec file or built-in recipe")
    p.add_argument("spec")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a spec key")
    p.add_argument("--output-dir")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved spec")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("plots", help="charts for a run directory")
    p.add_argument("dir")
    p.set_defaults(func=cmd_plots)

    p = sub.add_parser("recipes", help="list built-in recipes or print one")
    p.add_argument("name", nargs="?")
    p.set_defaults(func=cmd_recipes)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        if hasattr(args, "workers"):
            args.workers = default_workers() if args.workers is None else args.workers
            if args.workers < 1:
                raise UsageError("--workers must be >= 1")
        return args.func(args)
    except (cfgmod.SpecError, UsageError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except RunError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
