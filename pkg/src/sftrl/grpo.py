"""GRPO: group rollouts, group-normalized advantages, clipped surrogate with k3 KL to a frozen reference."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .optim import clip_grad_norm, make_optimizer
from .policy import (
    DecodingConfig,
    ParameterSet,
    Policy,
    all_finite,
    copy_params,
    grad_from_weights,
    response_slices,
    sample_batch,
    score_responses,
    zeros_like,
)
from .seeding import derive_seed
from .sft import TrainingAborted
from .task import TOKENIZER, Query, RewardBreakdown, reward

ADV_STD_FLOOR = 1e-8


class ShapeError(ValueError):
    pass


@dataclass
class Rollout:
    query_id: str
    prompt_tokens: List[int]
    response_tokens: List[int]
    old_log_probs: np.ndarray
    reward: RewardBreakdown
    truncated: bool

    def __post_init__(self):
        if len(self.old_log_probs) != len(self.response_tokens):
            raise ShapeError("old_log_probs must align with response_tokens")

    @property
    def text(self) -> str:
        return TOKENIZER.decode(self.response_tokens)


@dataclass
class RolloutGroup:
    query_id: str
    rollouts: List[Rollout]
    advantages: Optional[np.ndarray] = None

    @property
    def rewards(self) -> np.ndarray:
        return np.array([r.reward.total for r in self.rollouts])

    @property
    def n_correct(self) -> int:
        return sum(r.reward.correct for r in self.rollouts)

    def fill_advantages(self) -> "RolloutGroup":
        self.advantages = compute_advantages(self.rewards)
        return self


@dataclass
class RlConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.005
    max_new_tokens: int = 64
    epochs: int = 1
    rollout_temperature: float = 1.0
    keep_easiest: bool = True
    seed: int = 0
    optimizer: str = "adam"
    grad_clip: float = 1.0
    mini_batches: int = 1
    warmup_steps: int = 0

    def validate(self) -> "RlConfig":
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must be in (0, 1)")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if self.batch_size <= 0 or self.epochs < 0 or self.max_new_tokens <= 0:
            raise ValueError("batch_size and max_new_tokens must be positive, epochs non-negative")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if not 1 <= self.mini_batches <= self.batch_size:
            raise ValueError("mini_batches must be in [1, batch_size]")
        return self

    def lr_at(self, step: int) -> float:
        """Learning rate for the ``step``-th update of this run (linear warmup, then constant)."""
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        return self.learning_rate

    def decoding(self, seed: int) -> DecodingConfig:
        return DecodingConfig(
            temperature=self.rollout_temperature, max_new_tokens=self.max_new_tokens, seed=seed
        )


@dataclass
class MetricsRecord:
    step: int
    mean_reward: float
    mean_entropy: float
    mean_response_length: float
    length_truncation_ratio: float
    ppo_clip_fraction: float
    mean_kl_to_ref: float
    extra: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


# --------------------------------------------------------------------------
# rollouts


def collect_groups(
    policy_old: Policy,
    queries: Sequence[Query],
    group_size: int,
    decoding: DecodingConfig,
    prompts: Optional[Sequence[Sequence[int]]] = None,
    score_fn: Optional[Callable[[Query, Sequence[int]], RewardBreakdown]] = None,
) -> List[RolloutGroup]:
    """Sample ``group_size`` responses per query in one batch.

    Rollout ``i`` of query ``q`` uses sub-seed ``derive_seed(decoding.seed, q.id, i)``.
    ``prompts`` overrides the query prompts (used for teacher-prefixed rollouts);
    ``score_fn`` maps (query, response tokens) to a reward.
    """
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    if prompts is None:
        prompts = [q.prompt for q in queries]
    rows, seeds = [], []
    for q, p in zip(queries, prompts):
        for i in range(group_size):
            rows.append(list(p))
            seeds.append(derive_seed(decoding.seed, q.id, i))
    responses, truncated = sample_batch(policy_old, rows, decoding, TOKENIZER.eos_id, seeds)
    old_lp, _, _ = score_responses(policy_old, rows, responses)
    groups = []
    for k, q in enumerate(queries):
        rollouts = []
        for i in range(group_size):
            j = k * group_size + i
            resp = responses[j]
            rb = score_fn(q, resp) if score_fn else reward(q, TOKENIZER.decode(resp))
            rollouts.append(Rollout(q.id, rows[j], resp, old_lp[j], rb, truncated[j]))
        groups.append(RolloutGroup(q.id, rollouts))
    return groups


def collect_group(policy_old: Policy, query: Query, group_size: int, decoding: DecodingConfig) -> RolloutGroup:
    return collect_groups(policy_old, [query], group_size, decoding)[0]


def compute_advantages(rewards: Sequence[float]) -> np.ndarray:
    """(r - mean) / population std; all zeros when the group is uniform."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("need at least two rewards")
    std = r.std()
    if std < ADV_STD_FLOOR:
        return np.zeros_like(r)
    return (r - r.mean()) / std


def token_kl(logp_cur, logp_ref):
    """k3 estimator of KL(cur || ref) for a sampled token: e^d - d - 1 with d = ref - cur."""
    d = np.asarray(logp_ref, dtype=np.float64) - np.asarray(logp_cur, dtype=np.float64)
    out = np.expm1(d) - d
    return float(out) if out.ndim == 0 else out


def reference_log_probs(ref_policy: Policy, groups: Sequence[RolloutGroup]) -> List[List[np.ndarray]]:
    prompts = [r.prompt_tokens for g in groups for r in g.rollouts]
    responses = [r.response_tokens for g in groups for r in g.rollouts]
    flat, _, _ = score_responses(ref_policy, prompts, responses)
    out, k = [], 0
    for g in groups:
        out.append(flat[k : k + len(g.rollouts)])
        k += len(g.rollouts)
    return out


# --------------------------------------------------------------------------
# loss


@dataclass
class GrpoLossResult:
    loss: float
    grads: ParameterSet
    ppo_clip_fraction: float
    mean_kl: float
    mean_entropy: float
    n_tokens: int


def grpo_loss(
    policy: Policy,
    groups: Sequence[RolloutGroup],
    ref_log_probs: Sequence[Sequence[np.ndarray]],
    clip_epsilon: float,
    kl_coefficient: float,
    scale: float = 1.0,
) -> GrpoLossResult:
    """Negated GRPO objective averaged over groups, with its gradient.

    Per token: min(r*A, clip(r, 1-eps, 1+eps)*A) - beta*k3, averaged over the
    rollout's tokens, then over the G rollouts of a group, then over groups.
    Tokens on the clipped branch contribute a constant.  ``scale`` multiplies
    the loss and gradient (used when mixing with other loss terms).
    """
    rollouts = [r for g in groups for r in g.rollouts]
    if not rollouts:
        raise ValueError("no rollouts")
    for g, refs in zip(groups, ref_log_probs):
        if g.advantages is None:
            raise ValueError(f"advantages not computed for group {g.query_id}")
        if len(g.advantages) != len(g.rollouts) or len(refs) != len(g.rollouts):
            raise ShapeError("advantages / reference log-probs do not match the group")
        for r, ref in zip(g.rollouts, refs):
            if len(ref) != len(r.response_tokens) or len(r.old_log_probs) != len(r.response_tokens):
                raise ShapeError("log-prob sequences misaligned with response tokens")
    if len(ref_log_probs) != len(groups):
        raise ShapeError("one reference log-prob list per group is required")

    prompts = [r.prompt_tokens for r in rollouts]
    responses = [r.response_tokens for r in rollouts]
    cur, lp, scored = score_responses(policy, prompts, responses, keep_cache=True)
    dtype = lp.dtype
    weights = np.zeros(lp.shape[:2], dtype=np.float64)
    slices = response_slices(prompts, responses)
    n_groups = len(groups)
    objective = 0.0
    clipped = kls = ent = 0.0
    n_tok = 0
    k = 0
    for g, refs in zip(groups, ref_log_probs):
        G = len(g.rollouts)
        for i, r in enumerate(g.rollouts):
            c = cur[k].astype(np.float64)
            n = len(c)
            if n:
                adv = float(g.advantages[i])
                ratio = np.exp(c - r.old_log_probs.astype(np.float64))
                clipped_ratio = np.clip(ratio, 1 - clip_epsilon, 1 + clip_epsilon)
                on_clip = clipped_ratio * adv < ratio * adv
                surr = np.where(on_clip, clipped_ratio * adv, ratio * adv)
                ref = np.asarray(refs[i], dtype=np.float64)
                kl = token_kl(c, ref)
                coef = 1.0 / (G * n * n_groups)
                objective += coef * float(np.sum(surr - kl_coefficient * kl))
                # d objective / d log pi per token
                dsurr = np.where(on_clip, 0.0, ratio * adv)
                dkl = -np.expm1(ref - c)
                weights[k, slices[k]] = coef * (dsurr - kl_coefficient * dkl)
                probs = np.exp(lp[k, slices[k]].astype(np.float64))
                ent += float(-(probs * lp[k, slices[k]]).sum())
                clipped += float(on_clip.sum())
                kls += float(kl.sum())
                n_tok += n
            k += 1
    # gradient of the loss (= -objective): backward takes weights on -log p
    grads = grad_from_weights(policy.params, lp, scored, (weights * scale).astype(dtype), policy.config.num_heads)
    return GrpoLossResult(
        loss=-objective * scale,
        grads=grads,
        ppo_clip_fraction=clipped / max(n_tok, 1),
        mean_kl=kls / max(n_tok, 1),
        mean_entropy=ent / max(n_tok, 1),
        n_tokens=n_tok,
    )


# --------------------------------------------------------------------------
# easy-sample filter


def filter_easy(queries: Sequence[Query], profile, keep_easiest: bool) -> List[Query]:
    """Drop queries the baseline solved in every profiled run unless ``keep_easiest``.

    ``profile`` is a DifficultyProfile (pass counts over ``profile.runs`` runs).
    """
    if keep_easiest:
        return list(queries)
    out = []
    for q in queries:
        if q.id not in profile.pass_counts:
            raise KeyError(f"no baseline pass count for query {q.id}")
        if profile.pass_counts[q.id] < profile.runs:
            out.append(q)
    return out


# --------------------------------------------------------------------------
# training loop


@dataclass
class RlResult:
    params: ParameterSet
    checkpoints: List[ParameterSet]
    metrics: List[dict]


def rl_steps(n_queries: int, config: RlConfig) -> int:
    return config.epochs * math.ceil(n_queries / config.batch_size)


def query_batches(queries: Sequence[Query], config: RlConfig):
    """Yield (epoch, batch) pairs; queries are reshuffled each epoch."""
    rng = np.random.default_rng(derive_seed(config.seed, "order"))
    for epoch in range(config.epochs):
        order = rng.permutation(len(queries))
        for start in range(0, len(order), config.batch_size):
            yield epoch, [queries[i] for i in order[start : start + config.batch_size]]


def rollout_metrics(step: int, groups: Sequence[RolloutGroup], losses: Sequence[GrpoLossResult]) -> MetricsRecord:
    rollouts = [r for g in groups for r in g.rollouts]
    tok = sum(l.n_tokens for l in losses) or 1
    return MetricsRecord(
        step=step,
        mean_reward=float(np.mean([r.reward.total for r in rollouts])),
        mean_entropy=sum(l.mean_entropy * l.n_tokens for l in losses) / tok,
        mean_response_length=float(np.mean([len(r.response_tokens) for r in rollouts])),
        length_truncation_ratio=sum(r.truncated for r in rollouts) / len(rollouts),
        ppo_clip_fraction=sum(l.ppo_clip_fraction * l.n_tokens for l in losses) / tok,
        mean_kl_to_ref=sum(l.mean_kl * l.n_tokens for l in losses) / tok,
        extra={"accuracy": float(np.mean([r.reward.correct for r in rollouts]))},
    )


def train_rl(
    policy: Policy,
    queries: Sequence[Query],
    config: RlConfig,
    ref_params: Optional[ParameterSet] = None,
    step_offset: int = 0,
    log: Optional[Callable[[dict], None]] = None,
) -> RlResult:
    """GRPO with pi_old refreshed before every rollout batch and pi_ref frozen at the start."""
    config.validate()
    if not queries:
        raise ValueError("no queries")
    params = copy_params(policy.params)
    model = policy.with_params(params)
    ref = policy.with_params(copy_params(ref_params if ref_params is not None else policy.params))
    opt = make_optimizer(config.optimizer, config.learning_rate)
    checkpoints: List[ParameterSet] = []
    metrics: List[dict] = []
    step = step_offset
    last_epoch = 0
    for epoch, batch in query_batches(queries, config):
        if epoch != last_epoch:
            checkpoints.append(copy_params(params))
            last_epoch = epoch
        opt.lr = config.lr_at(step - step_offset)
        old = model.with_params(copy_params(params))
        groups = collect_groups(old, batch, config.group_size, config.decoding(derive_seed(config.seed, "rollout", step)))
        for g in groups:
            g.fill_advantages()
        refs = reference_log_probs(ref, groups)
        losses = []
        for mb in np.array_split(np.arange(len(groups)), config.mini_batches):
            res = grpo_loss(model, [groups[i] for i in mb], [refs[i] for i in mb], config.clip_epsilon, config.kl_coefficient)
            if not math.isfinite(res.loss) or not all_finite(res.grads):
                raise TrainingAborted(
                    f"numeric divergence at step {step}",
                    checkpoints[-1] if checkpoints else copy_params(policy.params),
                    checkpoints,
                    metrics,
                )
            norm = clip_grad_norm(res.grads, config.grad_clip)
            opt.step(params, res.grads)
            losses.append(res)
        rec = rollout_metrics(step, groups, losses).to_dict()
        rec.update(stage="rl", loss=float(np.mean([l.loss for l in losses])), grad_norm=norm)
        metrics.append(rec)
        if log:
            log(rec)
        step += 1
    checkpoints.append(copy_params(params))
    return RlResult(params, checkpoints, metrics)
