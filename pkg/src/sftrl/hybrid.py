"""Ways of combining SFT and GRPO: two-stage, interleaved loss routing, and progressive teacher prefixes."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .grpo import (
    GrpoLossResult,
    RlConfig,
    RlResult,
    RolloutGroup,
    collect_groups,
    grpo_loss,
    query_batches,
    reference_log_probs,
    rl_steps,
    rollout_metrics,
    train_rl,
)
from .optim import clip_grad_norm, make_optimizer
from .policy import ParameterSet, Policy, add_scaled, all_finite, copy_params, zeros_like
from .seeding import derive_seed
from .sft import (
    SftConfig,
    SftResult,
    SupervisedTrace,
    TrainingAborted,
    sft_batch_loss,
    sft_loss,
    train_sft,
)
from .task import TOKENIZER, Query, TraceStyle, oracle_trace, reward

PREFIX_WEIGHT = 0.2


class HybridMode(str, enum.Enum):
    TWO_STAGE = "TWO_STAGE"
    INTERLEAVED = "INTERLEAVED"
    PROGRESSIVE = "PROGRESSIVE"


@dataclass
class HybridConfig:
    mode: HybridMode = HybridMode.TWO_STAGE
    sft_config: SftConfig = field(default_factory=SftConfig)
    rl_config: RlConfig = field(default_factory=RlConfig)
    prefix_weight: float = PREFIX_WEIGHT
    prefix_schedule: str = "LINEAR"
    total_steps: Optional[int] = None  # defaults to the number of RL steps
    oracle_style: TraceStyle = TraceStyle.LONG_COT_GOOD

    def validate(self) -> "HybridConfig":
        self.mode = HybridMode(self.mode)
        self.oracle_style = TraceStyle(self.oracle_style)
        if not 0 < self.prefix_weight <= 1:
            raise ValueError("prefix_weight must be in (0, 1]")
        if self.prefix_schedule != "LINEAR":
            raise ValueError(f"unknown prefix schedule {self.prefix_schedule!r}")
        if self.total_steps is not None and self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        self.sft_config.validate()
        self.rl_config.validate()
        return self


def extend_generation_cap(rl_config: RlConfig, sft_cap: int, factor: int = 4) -> RlConfig:
    """RL config for the second stage with ``max_new_tokens`` raised to ``factor`` times the SFT-stage cap."""
    return replace(rl_config, max_new_tokens=factor * sft_cap)


# --------------------------------------------------------------------------
# two-stage


@dataclass
class TwoStageResult:
    params: ParameterSet
    sft: SftResult
    rl: RlResult
    rl_init: ParameterSet


def run_two_stage(
    policy: Policy,
    traces: Sequence[SupervisedTrace],
    queries: Sequence[Query],
    cfg: HybridConfig,
    select_fn: Optional[Callable[[ParameterSet], float]] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TwoStageResult:
    """SFT, then GRPO from the best SFT checkpoint with the reference frozen there.

    Without ``select_fn`` the last SFT checkpoint counts as best.  Step numbers
    of the RL stage continue after the SFT stage.
    """
    cfg.validate()
    sft = train_sft(policy, traces, cfg.sft_config, select_fn=select_fn, log=log)
    if not sft.checkpoints:
        start = copy_params(policy.params)
    elif sft.best_index is not None:
        start = copy_params(sft.checkpoints[sft.best_index])
    else:
        start = copy_params(sft.checkpoints[-1])
    if cfg.rl_config.epochs == 0:
        rl = RlResult(copy_params(start), [], [])
    else:
        rl = train_rl(policy.with_params(start), queries, cfg.rl_config, ref_params=start,
                      step_offset=len(sft.metrics), log=log)
    return TwoStageResult(rl.params, sft, rl, start)


# --------------------------------------------------------------------------
# interleaved routing


@dataclass
class RouteDecision:
    query_id: str
    branch: str  # "SFT" or "RL"
    trace: Optional[SupervisedTrace] = None
    group: Optional[RolloutGroup] = None


def route_interleaved(group: RolloutGroup, trace: SupervisedTrace) -> RouteDecision:
    """Zero correct rollouts send the query to the SFT branch; anything else stays on RL."""
    if group.advantages is None:
        raise ValueError("compute group advantages before routing")
    if group.n_correct == 0:
        return RouteDecision(group.query_id, "SFT", trace=trace)
    return RouteDecision(group.query_id, "RL", group=group)


# --------------------------------------------------------------------------
# progressive prefixes


def prefix_fraction(step: int, total_steps: int) -> float:
    """Linear fade: 1 at step 0, 0 at ``total_steps``."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min(1.0, max(0.0, 1.0 - step / total_steps))


def prefix_length(n_tokens: int, fraction: float) -> int:
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    return int(math.ceil(fraction * n_tokens - 1e-12))


def split_trace(trace: SupervisedTrace, fraction: float):
    """(teacher prefix trace or None, prompt for the continuation)."""
    k = prefix_length(len(trace.target_tokens), fraction)
    prompt = list(trace.prompt_tokens) + list(trace.target_tokens[:k])
    if k == 0:
        return None, prompt
    prefix = SupervisedTrace.sft(trace.prompt_tokens, trace.target_tokens[:k], source=trace.source,
                                 query_id=trace.query_id)
    return prefix, prompt


def _prefixed_score(query: Query, prefix_tokens: Sequence[int]):
    def score(q, resp):
        return reward(query, TOKENIZER.decode(list(prefix_tokens) + list(resp)))
    return score


def continuation_groups(
    old: Policy,
    queries: Sequence[Query],
    traces: Sequence[SupervisedTrace],
    fraction: float,
    rl_config: RlConfig,
    seed: int,
):
    """Teacher prefixes plus groups of policy continuations sampled after them.

    Returns ``(prefix_traces, groups)`` where either entry may be None per query:
    no prefix at fraction 0, no continuation when the prefix is the whole trace.
    Continuations are rewarded on prefix + continuation.
    """
    prefixes, groups = [], []
    for q, t in zip(queries, traces):
        prefix, prompt = split_trace(t, fraction)
        prefixes.append(prefix)
        if prefix is not None and len(prefix.target_tokens) == len(t.target_tokens):
            groups.append(None)
            continue
        done = list(prefix.target_tokens) if prefix is not None else []
        if prefix is None:
            g = collect_groups(old, [q], rl_config.group_size, rl_config.decoding(seed))[0]
        else:
            g = collect_groups(old, [q], rl_config.group_size, rl_config.decoding(seed),
                               prompts=[prompt], score_fn=_prefixed_score(q, done))[0]
        groups.append(g.fill_advantages())
    return prefixes, groups


@dataclass
class MixedLoss:
    loss: float
    grads: ParameterSet
    rl: Optional[GrpoLossResult] = None
    sft_loss: Optional[float] = None


def mixed_loss(
    policy: Policy,
    ref: Policy,
    groups: Sequence[RolloutGroup],
    sft_traces: Sequence[SupervisedTrace],
    sft_weight: float,
    n_queries: int,
    rl_config: RlConfig,
) -> MixedLoss:
    """Per-query average of GRPO terms and ``sft_weight``-scaled SFT terms.

    A lone GRPO group (or a lone SFT trace) reproduces the corresponding loss
    exactly: the scale factors are then 1 (or ``sft_weight``).
    """
    loss = 0.0
    grads = None
    rl_res = None
    sft_value = None
    if groups:
        refs = reference_log_probs(ref, groups)
        rl_res = grpo_loss(policy, groups, refs, rl_config.clip_epsilon, rl_config.kl_coefficient)
        frac = len(groups) / n_queries
        loss = rl_res.loss if frac == 1 else rl_res.loss * frac
        grads = rl_res.grads if frac == 1 else {k: g * g.dtype.type(frac) for k, g in rl_res.grads.items()}
    if sft_traces:
        if len(sft_traces) == 1:
            sft_value, sgrads = sft_loss(policy, sft_traces[0])
        else:
            sft_value, sgrads, _ = sft_batch_loss(policy, sft_traces)
        scale = sft_weight * len(sft_traces) / n_queries
        term = scale * sft_value
        loss = term if grads is None else loss + term
        if grads is None:
            grads = {k: g * g.dtype.type(scale) for k, g in sgrads.items()}
        else:
            grads = add_scaled(grads, sgrads, scale)
    if grads is None:
        grads = zeros_like(policy.params)
    return MixedLoss(float(loss), grads, rl_res, sft_value)


def progressive_step(
    policy: Policy,
    ref: Policy,
    query: Query,
    trace: SupervisedTrace,
    fraction: float,
    cfg: HybridConfig,
    seed: int,
    old: Optional[Policy] = None,
) -> MixedLoss:
    """Mixed loss for one query: weighted SFT on the teacher prefix, GRPO on sampled continuations.

    fraction 0 gives the plain GRPO loss of a group sampled with ``seed``;
    fraction 1 gives ``prefix_weight * sft_loss(trace)``.
    """
    old = old if old is not None else policy.with_params(copy_params(policy.params))
    prefixes, groups = continuation_groups(old, [query], [trace], fraction, cfg.rl_config, seed)
    return mixed_loss(
        policy, ref,
        [g for g in groups if g is not None],
        [p for p in prefixes if p is not None],
        cfg.prefix_weight, 1, cfg.rl_config,
    )


# --------------------------------------------------------------------------
# training loops for the interleaved and progressive modes


@dataclass
class HybridResult:
    params: ParameterSet
    checkpoints: List[ParameterSet]
    metrics: List[dict]


def _oracle_traces(queries: Sequence[Query], style: TraceStyle) -> Dict[str, SupervisedTrace]:
    return {q.id: oracle_trace(q, style) for q in queries}


def train_hybrid(
    policy: Policy,
    queries: Sequence[Query],
    cfg: HybridConfig,
    traces: Optional[Dict[str, SupervisedTrace]] = None,
    ref_params: Optional[ParameterSet] = None,
    step_offset: int = 0,
    log: Optional[Callable[[dict], None]] = None,
) -> HybridResult:
    """Interleaved or progressive training over ``queries`` (batching as in GRPO).

    Each step samples plain groups from pi_old.  Queries with zero correct
    rollouts take the SFT path (interleaved) or the prefix path (progressive);
    the rest use the GRPO loss.
    """
    cfg.validate()
    if cfg.mode is HybridMode.TWO_STAGE:
        raise ValueError("use run_two_stage for the two-stage mode")
    if not queries:
        raise ValueError("no queries")
    rl_cfg = cfg.rl_config
    traces = traces if traces is not None else _oracle_traces(queries, cfg.oracle_style)
    params = copy_params(policy.params)
    model = policy.with_params(params)
    ref = policy.with_params(copy_params(ref_params if ref_params is not None else policy.params))
    opt = make_optimizer(rl_cfg.optimizer, rl_cfg.learning_rate)
    total = cfg.total_steps or rl_steps(len(queries), rl_cfg)
    checkpoints: List[ParameterSet] = []
    metrics: List[dict] = []
    last_epoch = 0
    for i, (epoch, batch) in enumerate(query_batches(queries, rl_cfg)):
        step = step_offset + i
        if epoch != last_epoch:
            checkpoints.append(copy_params(params))
            last_epoch = epoch
        opt.lr = rl_cfg.lr_at(i)
        old = model.with_params(copy_params(params))
        groups = collect_groups(old, batch, rl_cfg.group_size, rl_cfg.decoding(derive_seed(rl_cfg.seed, "rollout", step)))
        for g in groups:
            g.fill_advantages()
        fraction = prefix_fraction(min(i, total), total) if cfg.mode is HybridMode.PROGRESSIVE else 0.0
        rl_groups: List[RolloutGroup] = []
        sft_traces: List[SupervisedTrace] = []
        n_routed = 0
        for q, g in zip(batch, groups):
            if cfg.mode is HybridMode.INTERLEAVED:
                d = route_interleaved(g, traces[q.id])
                if d.branch == "SFT":
                    sft_traces.append(d.trace)
                    n_routed += 1
                else:
                    rl_groups.append(g)
            elif g.n_correct == 0 and fraction > 0:
                n_routed += 1
                prefixes, conts = continuation_groups(
                    old, [q], [traces[q.id]], fraction, rl_cfg, derive_seed(rl_cfg.seed, "prefix", step, q.id))
                sft_traces.extend(p for p in prefixes if p is not None)
                rl_groups.extend(c for c in conts if c is not None)
            else:
                rl_groups.append(g)
        weight = 1.0 if cfg.mode is HybridMode.INTERLEAVED else cfg.prefix_weight
        res = mixed_loss(model, ref, rl_groups, sft_traces, weight, len(batch), rl_cfg)
        if not math.isfinite(res.loss) or not all_finite(res.grads):
            raise TrainingAborted(f"numeric divergence at step {step}",
                                  checkpoints[-1] if checkpoints else copy_params(policy.params),
                                  checkpoints, metrics)
        norm = clip_grad_norm(res.grads, rl_cfg.grad_clip)
        opt.step(params, res.grads)
        rec = rollout_metrics(step, groups, [res.rl] if res.rl is not None else []).to_dict()
        rec.update(stage=cfg.mode.value.lower(), loss=res.loss, grad_norm=norm,
                   sft_fraction=n_routed / len(batch), prefix_fraction=fraction)
        metrics.append(rec)
        if log:
            log(rec)
    checkpoints.append(copy_params(params))
    return HybridResult(params, checkpoints, metrics)
