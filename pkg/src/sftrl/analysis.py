"""Difficulty profiling, per-level gains, response-length and reasoning-word statistics, token-level KL."""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .policy import DecodingConfig, EVAL_DECODING, Policy, log_softmax, sample_many
from .seeding import derive_seed
from .task import DEFAULT_LEXICON, TOKENIZER, Query, reward

LEVELS = (1, 2, 3, 4, 5)
# lower pass-rate bound of levels 1..4 as fractions of 16 runs
_LEVEL_BOUNDS = (12, 8, 5, 2)


class AlignmentError(ValueError):
    pass


def difficulty_level(pass_count: int, runs: int = 16) -> int:
    """Level 1 (easy) .. 5 (hard) from the pass count over ``runs`` attempts.

    Thresholds are 12/16, 8/16, 5/16 and 2/16 of the runs, compared exactly.
    """
    if not 0 <= pass_count <= runs:
        raise ValueError(f"pass_count {pass_count} outside [0, {runs}]")
    for level, bound in enumerate(_LEVEL_BOUNDS, start=1):
        if pass_count * 16 >= bound * runs:
            return level
    return 5


@dataclass
class DifficultyProfile:
    runs: int
    pass_counts: Dict[str, int]
    levels: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.levels:
            self.levels = {q: difficulty_level(c, self.runs) for q, c in self.pass_counts.items()}

    def population(self) -> Dict[int, int]:
        counts = {lvl: 0 for lvl in LEVELS}
        for lvl in self.levels.values():
            counts[lvl] += 1
        return counts


@dataclass
class EvalReport:
    query_ids: List[str]
    correct: np.ndarray  # (runs, queries) bool
    lengths: np.ndarray  # (runs, queries) response tokens
    responses: List[List[str]]  # [run][query] text

    @property
    def runs(self) -> int:
        return self.correct.shape[0]

    def pass_counts(self) -> Dict[str, int]:
        return dict(zip(self.query_ids, self.correct.sum(0).astype(int).tolist()))

    def accuracy(self) -> float:
        return float(self.correct.mean())

    def accuracy_std(self) -> float:
        return float(self.correct.mean(1).std())

    def level_accuracy(self, profile: DifficultyProfile) -> Dict[int, Optional[float]]:
        """Per-level accuracy averaged over runs; None for empty levels."""
        out: Dict[int, Optional[float]] = {}
        for lvl in LEVELS:
            cols = [i for i, q in enumerate(self.query_ids) if profile.levels[q] == lvl]
            out[lvl] = float(self.correct[:, cols].mean()) if cols else None
        return out

    def all_responses(self) -> List[str]:
        return [t for run in self.responses for t in run]


def evaluate(
    policy: Policy,
    queries: Sequence[Query],
    runs: int,
    decoding: DecodingConfig = EVAL_DECODING,
    seed: int = 0,
    workers: Optional[int] = None,
) -> EvalReport:
    """Sample every query ``runs`` times; run ``k`` of query ``q`` uses seed derive_seed(seed, "eval", k, q.id).

    ``workers`` bounds the sampling threads (default: SFTRL_WORKERS or 1).
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    prompts, seeds = [], []
    for k in range(runs):
        for q in queries:
            prompts.append(q.prompt)
            seeds.append(derive_seed(seed, "eval", k, q.id))
    dec = decoding.replace(seed=seed)
    responses, _ = sample_many(policy, prompts, dec, TOKENIZER.eos_id, seeds, workers)
    n = len(queries)
    correct = np.zeros((runs, n), dtype=bool)
    lengths = np.zeros((runs, n), dtype=int)
    texts: List[List[str]] = [[""] * n for _ in range(runs)]
    for j, resp in enumerate(responses):
        k, i = divmod(j, n)
        text = TOKENIZER.decode(resp)
        texts[k][i] = text
        correct[k, i] = reward(queries[i], text).correct
        lengths[k, i] = len(resp)
    return EvalReport([q.id for q in queries], correct, lengths, texts)


def profile_from_report(report: EvalReport) -> DifficultyProfile:
    return DifficultyProfile(report.runs, report.pass_counts())


def pass_rate_profile(
    policy: Policy,
    queries: Sequence[Query],
    runs: int = 16,
    decoding: DecodingConfig = EVAL_DECODING,
    seed: int = 0,
    workers: Optional[int] = None,
) -> DifficultyProfile:
    return profile_from_report(evaluate(policy, queries, runs, decoding, seed, workers))


def accuracy_by_level(
    report_a: EvalReport, report_b: EvalReport, profile: DifficultyProfile
) -> Dict[int, Optional[float]]:
    """Gain of ``report_b`` over ``report_a`` per baseline level, in percentage points."""
    if report_a.query_ids != report_b.query_ids:
        raise AlignmentError("reports cover different query sets")
    missing = [q for q in report_a.query_ids if q not in profile.levels]
    if missing:
        raise AlignmentError(f"profile lacks queries {missing[:3]}")
    acc_a = report_a.level_accuracy(profile)
    acc_b = report_b.level_accuracy(profile)
    return {
        lvl: None if acc_a[lvl] is None else 100.0 * (acc_b[lvl] - acc_a[lvl]) for lvl in LEVELS
    }


_WORD_SPLIT = re.compile(r"[^a-zA-Z]+")


def word_frequency(responses: Sequence[str], lexicon: Sequence[str] = DEFAULT_LEXICON) -> Dict[str, int]:
    """Total case-insensitive whole-word occurrences of each lexicon word."""
    counts = {w: 0 for w in lexicon}
    for text in responses:
        for tok in _WORD_SPLIT.split(text.lower()):
            if tok in counts:
                counts[tok] += 1
    return counts


def token_level_kl(policy_a: Policy, policy_b: Policy, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
    """KL(p_b || p_a) over the full vocabulary at every response position (teacher forced)."""
    if policy_a.config.vocab_size != policy_b.config.vocab_size:
        raise ValueError("models use different vocabularies")
    lp_a = policy_a.next_token_logprobs(prompt, response).astype(np.float64)
    lp_b = policy_b.next_token_logprobs(prompt, response).astype(np.float64)
    if lp_a.shape != lp_b.shape:
        raise ValueError("shape mismatch between model distributions")
    # renormalize in float64 so tiny float32 drift cannot push a term negative
    lp_a = log_softmax(lp_a)
    lp_b = log_softmax(lp_b)
    kl = (np.exp(lp_b) * (lp_b - lp_a)).sum(-1)
    return np.maximum(kl, 0.0)


def response_length_stats(lengths: Sequence[float]) -> Dict[str, float]:
    x = np.asarray(lengths, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty response corpus")
    return {"mean": float(x.mean()), "median": float(np.median(x)), "p90": float(np.percentile(x, 90))}


# --------------------------------------------------------------------------
# delimiter-separated outputs


def write_correctness_matrix(path, report: EvalReport) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["query_id"] + [f"run{k}" for k in range(report.runs)])
        for i, q in enumerate(report.query_ids):
            w.writerow([q] + [int(v) for v in report.correct[:, i]])


def write_gain_table(path, gains: Dict[str, Dict[int, Optional[float]]], profile: DifficultyProfile) -> None:
    pop = profile.population()
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["level", "population"] + list(gains))
        for lvl in LEVELS:
            row = [lvl, pop[lvl]]
            for name in gains:
                g = gains[name][lvl]
                row.append("" if g is None else f"{g:.4f}")
            w.writerow(row)


def write_word_frequency(path, tables: Dict[str, Dict[str, int]]) -> None:
    words = list(next(iter(tables.values())))
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["word"] + list(tables))
        for word in words:
            w.writerow([word] + [tables[name][word] for name in tables])


def write_kl_records(path, records) -> None:
    """``records``: iterable of (query_id, position, token_text, divergence)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t")
        w.writerow(["query_id", "position", "token", "divergence"])
        for qid, pos, tok, div in records:
            w.writerow([qid, pos, tok, f"{div:.8g}"])


def read_correctness_matrix(path) -> EvalReport:
    """Inverse of ``write_correctness_matrix`` (lengths and texts are not stored and come back empty)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f, delimiter="\t"))
    if not rows or rows[0][:1] != ["query_id"]:
        raise ValueError(f"{path} is not a correctness matrix")
    runs = len(rows[0]) - 1
    ids = [r[0] for r in rows[1:]]
    correct = np.array([[int(v) for v in r[1:]] for r in rows[1:]], dtype=bool).reshape(len(ids), runs).T
    return EvalReport(ids, correct, np.zeros(correct.shape, dtype=int), [[""] * len(ids) for _ in range(runs)])
