"""Execute an ExperimentSpec and write its artifact tree.

Layout of ``<output_dir>/<name>/``::

    spec.cfg                       resolved spec (sorted keys, includes expanded, no output_dir)
    stages/<stage>/config.json     typed stage config as run
    stages/<stage>/checkpoint.bin  (baseline, sft, rl, hybrid)
    stages/<stage>/metrics.jsonl   one record per optimizer step
    stages/<stage>/ratio_<r>/checkpoint.bin   (merge)
    stages/<stage>/dataset.jsonl   (distill: mixed SFT data with source tags)
    eval/<model>.tsv               per-query correctness matrix (runs as columns)
    analysis/*.tsv                 profile, gains by level, words, lengths, KL, merge curves
    manifest.json                  sha256 of every other file
    FAILED                         only when a stage raised

Every random draw comes from ``derive_seed(spec.seed, ...)``, so two runs of
the same spec write byte-identical trees (with one worker).
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import traceback
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import config as cfgmod
from .analysis import (
    EvalReport,
    accuracy_by_level,
    evaluate,
    profile_from_report,
    response_length_stats,
    token_level_kl,
    word_frequency,
    write_correctness_matrix,
    write_gain_table,
    write_kl_records,
    write_word_frequency,
)
from .checkpoint import MetricsWriter, save_checkpoint
from .grpo import filter_easy, train_rl
from .hybrid import HybridMode, run_two_stage, train_hybrid
from .lab import query_set, train_baseline
from .merging import MergeMethod, MergeRecipe, merge
from .mixing import assemble_mixed, distill, mixed_records, traces_from_records
from .policy import EVAL_DECODING, DecodingConfig, ParameterSet, Policy
from .seeding import derive_seed
from .sft import train_sft
from .task import TOKENIZER, oracle_trace, read_dataset, write_dataset

log = logging.getLogger("sftrl")

MANIFEST = "manifest.json"
FAILED = "FAILED"


class RunError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def identity_text(spec: "cfgmod.ExperimentSpec") -> str:
    """Resolved spec without its output location (moving a run does not change it)."""
    return cfgmod.render({k: v for k, v in spec.flat.items() if k != "output_dir"})


def write_manifest(run_dir: Path, spec: "cfgmod.ExperimentSpec") -> dict:
    files = {}
    for p in sorted(run_dir.rglob("*")):
        rel = p.relative_to(run_dir).as_posix()
        if p.is_file() and rel != MANIFEST:
            files[rel] = sha256_file(p)
    manifest = {
        "name": spec.name,
        "seed": spec.seed,
        "spec_sha256": hashlib.sha256(identity_text(spec).encode()).hexdigest(),
        "files": files,
    }
    (run_dir / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class Run:
    """State shared by the stages of one experiment."""

    def __init__(self, spec: "cfgmod.ExperimentSpec", run_dir: Path, workers: int = 1,
                 policy: Optional[Policy] = None, flat: bool = False):
        self.spec = spec
        self.dir = run_dir
        self.workers = workers
        self.flat = flat  # single-stage layout: stage files go straight into run_dir
        self.policy = policy if policy is not None else Policy(spec.model.policy_config(spec.seed))
        self.models: Dict[str, ParameterSet] = {}
        self.datasets: Dict[str, list] = {}

    def seed_for(self, *labels) -> int:
        return derive_seed(self.spec.seed, *labels)

    def stage_dir(self, name: str) -> Path:
        d = self.dir if self.flat else self.dir / "stages" / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    def save(self, name: str, params: ParameterSet, path: Optional[Path] = None, **meta) -> None:
        path = path or self.stage_dir(name) / "checkpoint.bin"
        save_checkpoint(path, params, self.policy.config, dict(meta, stage=name))
        self.models.setdefault(name, params)

    def queries(self, stage: str, p) -> list:
        return query_set(self.spec.seed, p.query_label or stage, p.queries, p.difficulties)


# --------------------------------------------------------------------------
# stage executors


def _write_query_table(path: Path, queries, pass_counts=None) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["query_id", "expression", "answer", "difficulty"] + (["pass_count"] if pass_counts else []))
        for q in queries:
            row = [q.id, q.expression, q.answer, q.difficulty]
            if pass_counts:
                row.append(pass_counts[q.id])
            w.writerow(row)


def run_baseline(run: Run, name: str, p) -> None:
    d = run.stage_dir(name)
    with MetricsWriter(d / "metrics.jsonl") as mw:
        base = train_baseline(run.spec.seed, p.baseline_config(), run.spec.model, log=mw)
    run.save(name, base.params, kind="baseline", validation_scores=base.sft.scores)


def run_sft(run: Run, name: str, p) -> None:
    d = run.stage_dir(name)
    if p.dataset in run.datasets:
        traces = run.datasets[p.dataset]
    elif p.dataset:
        traces = traces_from_records(read_dataset(p.dataset))
    else:
        traces = [oracle_trace(q, p.style) for q in run.queries(name, p)]
    policy = run.policy.with_params(run.models[p.init])
    with MetricsWriter(d / "metrics.jsonl") as mw:
        res = train_sft(policy, traces, p.sft_config(run.seed_for("stage", name)), log=mw)
    run.save(name, res.params, kind="sft", traces=len(traces))


def _rl_queries(run: Run, name: str, p, init: Policy):
    queries = run.queries(name, p)
    counts = None
    if not p.keep_easiest:
        dec = EVAL_DECODING.replace(max_new_tokens=p.max_new_tokens)
        report = evaluate(init, queries, p.profile_runs, dec, run.seed_for("easy", name), run.workers)
        profile = profile_from_report(report)
        counts = profile.pass_counts
        queries = filter_easy(queries, profile, keep_easiest=False)
        if not queries:
            raise RunError(f"stage {name}: every query is always solved; nothing left to train on")
    _write_query_table(run.stage_dir(name) / "queries.tsv", queries, counts)
    return queries


def run_rl(run: Run, name: str, p) -> None:
    d = run.stage_dir(name)
    init = run.policy.with_params(run.models[p.init])
    queries = _rl_queries(run, name, p, init)
    with MetricsWriter(d / "metrics.jsonl") as mw:
        res = train_rl(init, queries, p.rl_config(run.seed_for("stage", name)), log=mw)
    run.save(name, res.params, kind="rl", queries=len(queries))


def run_hybrid(run: Run, name: str, p) -> None:
    d = run.stage_dir(name)
    seed = run.seed_for("stage", name)
    cfg = p.hybrid_config(seed)
    init = run.policy.with_params(run.models[p.init])
    queries = _rl_queries(run, name, p, init)
    with MetricsWriter(d / "metrics.jsonl") as mw:
        if cfg.mode is HybridMode.TWO_STAGE:
            sft_q = query_set(run.spec.seed, (p.query_label or name) + "-sft", p.sft_queries, p.difficulties)
            traces = [oracle_trace(q, cfg.oracle_style) for q in sft_q]
            params = run_two_stage(init, traces, queries, cfg, log=mw).params
        else:
            params = train_hybrid(init, queries, cfg, log=mw).params
    run.save(name, params, kind="hybrid", mode=cfg.mode.value)


def run_distill(run: Run, name: str, p) -> None:
    d = run.stage_dir(name)
    policy = run.policy.with_params(run.models[p.init])
    queries = run.queries(name, p)
    dec = EVAL_DECODING.replace(max_new_tokens=p.max_new_tokens)
    records = distill(policy, queries, p.n_samples, dec, run.seed_for("distill", name), p.keep, run.workers)
    traces = assemble_mixed(records, queries, p.style)
    with open(d / "distilled.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    write_dataset(d / "dataset.jsonl", mixed_records(traces, queries))
    run.datasets[name] = traces


def run_merge(run: Run, name: str, p) -> None:
    d = run.stage_dir(name)
    a, b = run.models[p.a], run.models[p.b]
    base = run.models[p.base] if p.base else None
    method = MergeMethod(p.method.upper())
    for r in p.ratio_list():
        params = merge(MergeRecipe(method, r, p.density), a, b, base)
        model = cfgmod.merge_model_name(name, r)
        run.save(model, params, path=d / f"ratio_{r:g}" / "checkpoint.bin", kind="merge",
                 method=method.value, ratio=r)


EXECUTORS = {
    "baseline": run_baseline,
    "sft": run_sft,
    "rl": run_rl,
    "hybrid": run_hybrid,
    "distill": run_distill,
    "merge": run_merge,
}


# --------------------------------------------------------------------------
# evaluation + analysis


def _greedy(ev) -> DecodingConfig:
    return DecodingConfig(greedy=True, max_new_tokens=ev.max_new_tokens)


def evaluate_models(run: Run) -> None:
    spec, ev = run.spec, run.spec.eval
    names = cfgmod.eval_models(spec.stages, ev)
    if not names:
        return
    held = query_set(spec.seed, "h", ev.queries, ev.difficulties)
    (run.dir / "eval").mkdir(exist_ok=True)
    adir = run.dir / "analysis"
    adir.mkdir(exist_ok=True)
    dec = ev.decoding()
    reports: Dict[str, EvalReport] = {}
    greedy: Dict[str, EvalReport] = {}
    for m in names:
        policy = run.policy.with_params(run.models[m])
        reports[m] = evaluate(policy, held, ev.runs, dec, run.seed_for("eval"), run.workers)
        write_correctness_matrix(run.dir / "eval" / f"{m}.tsv", reports[m])
        if ev.greedy:
            greedy[m] = evaluate(policy, held, 1, _greedy(ev), run.seed_for("greedy"), run.workers)
        log.info("eval %s: accuracy %.4f", m, reports[m].accuracy())

    pname = cfgmod.profile_model(spec)
    prof_report = evaluate(run.policy.with_params(run.models[pname]), held, ev.profile_runs, dec,
                           run.seed_for("profile"), run.workers)
    profile = profile_from_report(prof_report)
    with open(adir / "profile.tsv", "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["query_id", "difficulty", "pass_count", "runs", "level"])
        for q in held:
            w.writerow([q.id, q.difficulty, profile.pass_counts[q.id], profile.runs, profile.levels[q.id]])

    others = [m for m in names if m != pname]
    if pname in reports and others:
        gains = {m: accuracy_by_level(reports[pname], reports[m], profile) for m in others}
        write_gain_table(adir / "gains.tsv", gains, profile)

    texts = {m: (greedy[m] if ev.greedy else reports[m]).all_responses() for m in names}
    write_word_frequency(adir / "words.tsv", {m: word_frequency(texts[m]) for m in names})

    with open(adir / "summary.tsv", "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["model", "accuracy", "accuracy_std", "mean_length", "median_length", "p90_length",
                    "greedy_accuracy", "greedy_mean_length", "lexicon_words"])
        for m in names:
            st = response_length_stats(reports[m].lengths.ravel())
            g = greedy.get(m)
            w.writerow([m, f"{reports[m].accuracy():.6f}", f"{reports[m].accuracy_std():.6f}",
                        f"{st['mean']:.4f}", f"{st['median']:.4f}", f"{st['p90']:.4f}",
                        "" if g is None else f"{g.accuracy():.6f}",
                        "" if g is None else f"{g.lengths.mean():.4f}",
                        sum(word_frequency(texts[m]).values())])

    if ev.kl_queries and pname in run.models:
        ref = run.policy.with_params(run.models[pname])
        for m in others:
            pol = run.policy.with_params(run.models[m])
            recs = []
            for i, q in enumerate(held[: ev.kl_queries]):
                resp = TOKENIZER.encode(texts[m][i]) if ev.greedy else TOKENIZER.encode(reports[m].responses[0][i])
                if not resp:
                    continue
                kl = token_level_kl(ref, pol, q.prompt, resp)
                recs += [(q.id, j, TOKENIZER.vocab[t], float(v)) for j, (t, v) in enumerate(zip(resp, kl))]
            write_kl_records(adir / f"kl_{m}.tsv", recs)

    for st in spec.stages:
        if st.kind != "merge":
            continue
        ratios = [r for r in st.params.ratio_list() if cfgmod.merge_model_name(st.name, r) in reports]
        if not ratios:
            continue
        with open(adir / f"merge_{st.name}.tsv", "w", newline="") as f:
            w = csv.writer(f, delimiter="\t")
            levels = sorted(set(q.difficulty for q in held))
            w.writerow(["ratio", "all"] + [f"difficulty_{d}" for d in levels])
            for r in ratios:
                rep = reports[cfgmod.merge_model_name(st.name, r)]
                row = [f"{r:g}", f"{rep.accuracy():.6f}"]
                for dlev in levels:
                    cols = [i for i, q in enumerate(held) if q.difficulty == dlev]
                    row.append(f"{rep.correct[:, cols].mean():.6f}")
                w.writerow(row)


# --------------------------------------------------------------------------


def run_experiment(spec: "cfgmod.ExperimentSpec", workers: int = 1, run_dir: Optional[Path] = None) -> Path:
    """Run every stage, then evaluation; returns the run directory.

    Raises RunError (after writing FAILED and a manifest) if a stage fails.
    """
    run_dir = Path(run_dir) if run_dir is not None else spec.run_dir()
    if run_dir.exists():
        raise cfgmod.SpecError(f"{run_dir} already exists; experiment names must be unique per output directory")
    run_dir.mkdir(parents=True)
    (run_dir / "spec.cfg").write_text(identity_text(spec))
    run = Run(spec, run_dir, workers)
    current = "eval"
    try:
        for st in spec.stages:
            current = st.name
            log.info("stage %s (%s)", st.name, st.kind)
            d = run.stage_dir(st.name)
            (d / "config.json").write_text(
                json.dumps(dict(dataclasses.asdict(st.params), kind=st.kind), sort_keys=True, indent=1) + "\n")
            EXECUTORS[st.kind](run, st.name, st.params)
        current = "eval"
        if spec.eval is not None:
            evaluate_models(run)
    except Exception as e:
        (run_dir / FAILED).write_text(f"stage {current}: {type(e).__name__}: {e}\n\n{traceback.format_exc()}")
        write_manifest(run_dir, spec)
        raise RunError(f"stage {current} failed: {type(e).__name__}: {e}") from e
    write_manifest(run_dir, spec)
    return run_dir
