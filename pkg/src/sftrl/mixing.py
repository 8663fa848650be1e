"""Distill correct responses from an RL-tuned policy and blend them with long-CoT backfill."""
from __future__ import annotations

import enum
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

from .policy import DecodingConfig, EVAL_DECODING, Policy, sample_many
from .seeding import derive_seed
from .sft import SupervisedTrace
from .task import (
    TOKENIZER,
    Query,
    TraceStyle,
    dataset_record,
    query_from_record,
    response_tokens,
    reward,
    trace_text,
)

MIX_SFT_EPOCHS = 2
DISTILL_SAMPLES = 8


class DistillSource(str, enum.Enum):
    RL_SELF = "RL_SELF"
    LONG_COT_BACKFILL = "LONG_COT_BACKFILL"


@dataclass(frozen=True)
class DistillRecord:
    query_id: str
    response_text: str
    correct: bool
    length_tokens: int
    source: DistillSource = DistillSource.RL_SELF

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source"] = DistillSource(self.source).value
        return d


def distill(
    policy: Policy,
    queries: Sequence[Query],
    n_samples: int = DISTILL_SAMPLES,
    decoding: DecodingConfig = EVAL_DECODING,
    seed: int = 0,
    keep: str = "all",
    workers: Optional[int] = None,
) -> List[DistillRecord]:
    """Sample ``n_samples`` responses per query and keep the correct ones.

    ``keep="all"`` keeps every correct response; ``keep="shortest"`` keeps only
    the shortest correct one per query (earliest sample on ties).  Sample ``i``
    of query ``q`` uses seed ``derive_seed(seed, "distill", q.id, i)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if keep not in ("all", "shortest"):
        raise ValueError(f"keep must be 'all' or 'shortest', got {keep!r}")
    prompts, seeds = [], []
    for q in queries:
        for i in range(n_samples):
            prompts.append(q.prompt)
            seeds.append(derive_seed(seed, "distill", q.id, i))
    responses, _ = sample_many(policy, prompts, decoding.replace(seed=seed), TOKENIZER.eos_id, seeds, workers)
    out: List[DistillRecord] = []
    for k, q in enumerate(queries):
        kept = []
        for i in range(n_samples):
            resp = responses[k * n_samples + i]
            text = TOKENIZER.decode(resp)
            if reward(q, text).correct:
                kept.append(DistillRecord(q.id, text, True, len(resp)))
        if keep == "shortest" and kept:
            kept = [min(kept, key=lambda r: r.length_tokens)]
        out.extend(kept)
    return out


def assemble_mixed(
    records: Sequence[DistillRecord],
    queries: Sequence[Query],
    style: TraceStyle = TraceStyle.LONG_COT_GOOD,
) -> List[SupervisedTrace]:
    """One trace per correct distilled record plus one oracle long-CoT trace per unsolved query."""
    by_id: Dict[str, Query] = {q.id: q for q in queries}
    solved = set()
    traces: List[SupervisedTrace] = []
    for r in records:
        q = by_id.get(r.query_id)
        if q is None:
            raise KeyError(f"record for unknown query {r.query_id}")
        if not r.correct or not reward(q, r.response_text).correct:
            continue
        solved.add(q.id)
        traces.append(SupervisedTrace.sft(q.prompt, response_tokens(r.response_text),
                                          source=DistillSource.RL_SELF.value, query_id=q.id))
    for q in queries:
        if q.id not in solved:
            text = trace_text(q, style)
            traces.append(SupervisedTrace.sft(q.prompt, response_tokens(text),
                                              source=DistillSource.LONG_COT_BACKFILL.value, query_id=q.id))
    return traces


def mixed_records(traces: Sequence[SupervisedTrace], queries: Sequence[Query]) -> List[dict]:
    """Dataset-file records for assembled traces; the style field carries the source tag."""
    by_id = {q.id: q for q in queries}
    return [dataset_record(by_id[t.query_id], TOKENIZER.decode(t.target_tokens), t.source) for t in traces]


def traces_from_records(records: Sequence[dict]) -> List[SupervisedTrace]:
    """Inverse of ``mixed_records`` (also reads any task dataset file)."""
    out = []
    for rec in records:
        q = query_from_record(rec)
        out.append(SupervisedTrace.sft(q.prompt, response_tokens(rec["trace"]), source=rec["style"], query_id=q.id))
    return out
