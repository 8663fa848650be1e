"""Masked cross-entropy fine-tuning on supervised traces."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .optim import clip_grad_norm, make_optimizer
from .policy import NumericError, ParameterSet, Policy, batch_weighted_grad, copy_params, zeros_like


class LossKind(str, enum.Enum):
    SFT = "SFT"
    RL = "RL"
    IGNORE = "IGNORE"


class DegenerateTraceError(ValueError):
    pass


class TrainingAborted(RuntimeError):
    """Raised on numeric divergence; carries the last good state."""

    def __init__(self, message, params, checkpoints, metrics):
        super().__init__(message)
        self.params = params
        self.checkpoints = checkpoints
        self.metrics = metrics


@dataclass
class SupervisedTrace:
    prompt_tokens: List[int]
    target_tokens: List[int]
    loss_kind: List[LossKind]
    loss_weight: List[float]
    source: str = ""
    query_id: str = ""

    def __post_init__(self):
        n = len(self.target_tokens)
        if len(self.loss_kind) != n or len(self.loss_weight) != n:
            raise ValueError("target_tokens, loss_kind and loss_weight must have equal length")
        self.loss_kind = [LossKind(k) for k in self.loss_kind]
        for kind, w in zip(self.loss_kind, self.loss_weight):
            if w < 0:
                raise ValueError("loss weights must be non-negative")
            if kind is LossKind.IGNORE and w != 0:
                raise ValueError("IGNORE tokens must carry weight 0")

    @classmethod
    def sft(cls, prompt, target, weight: float = 1.0, source: str = "", query_id: str = ""):
        n = len(target)
        return cls(list(prompt), list(target), [LossKind.SFT] * n, [float(weight)] * n, source, query_id)

    @property
    def n_sft(self) -> int:
        return sum(k is LossKind.SFT for k in self.loss_kind)

    def sft_weights(self) -> np.ndarray:
        """Per-target weights of the normalized SFT loss (zero for non-SFT tokens)."""
        n = self.n_sft
        if n == 0:
            raise DegenerateTraceError("trace has no SFT-kind tokens")
        return np.array(
            [w / n if k is LossKind.SFT else 0.0 for k, w in zip(self.loss_kind, self.loss_weight)]
        )


@dataclass
class SftConfig:
    learning_rate: float = 3e-3
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    shuffle: bool = True
    optimizer: str = "adam"
    grad_clip: float = 1.0
    warmup_steps: int = 0
    schedule: str = "constant"  # or "cosine": decay to zero over the run after warmup
    checkpoint_every: int = 0  # steps; 0 = epoch ends only
    stop_at_score: Optional[float] = None

    def validate(self) -> "SftConfig":
        if not 0 <= self.learning_rate <= 1:
            raise ValueError("learning_rate must be in [0, 1]")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.warmup_steps < 0 or self.checkpoint_every < 0:
            raise ValueError("warmup_steps and checkpoint_every must be >= 0")
        if self.batch_size <= 0 or self.epochs < 0:
            raise ValueError("batch_size must be positive and epochs non-negative")
        return self

    def lr_at(self, step: int, total: int) -> float:
        if self.warmup_steps and step < self.warmup_steps:
            return self.learning_rate * (step + 1) / self.warmup_steps
        if self.schedule == "cosine":
            span = max(total - self.warmup_steps, 1)
            progress = min(max(step - self.warmup_steps, 0) / span, 1.0)
            return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))
        return self.learning_rate


def _weight_matrix(traces: Sequence[SupervisedTrace], per_trace: Sequence[np.ndarray], dtype):
    width = max(len(t.prompt_tokens) + len(t.target_tokens) for t in traces) - 1
    w = np.zeros((len(traces), width), dtype=dtype)
    for i, (t, pw) in enumerate(zip(traces, per_trace)):
        start = len(t.prompt_tokens) - 1
        w[i, start : start + len(pw)] = pw
    return w


def sft_batch_loss(
    policy: Policy, traces: Sequence[SupervisedTrace]
) -> Tuple[float, ParameterSet, List[float]]:
    """Mean over traces of each trace's normalized SFT loss, with its gradient."""
    per_trace = [t.sft_weights() for t in traces]
    dtype = policy.params["tok_emb"].dtype
    w = _weight_matrix(traces, [pw / len(traces) for pw in per_trace], dtype)
    seqs = [t.prompt_tokens + t.target_tokens for t in traces]
    logp, grads = batch_weighted_grad(policy.params, seqs, w, policy.config.num_heads)
    losses = []
    for i, (t, pw) in enumerate(zip(traces, per_trace)):
        start = len(t.prompt_tokens) - 1
        losses.append(float(-(pw * logp[i, start : start + len(pw)]).sum()))
    return float(np.mean(losses)), grads, losses


def sft_loss(policy: Policy, trace: SupervisedTrace) -> Tuple[float, ParameterSet]:
    loss, grads, _ = sft_batch_loss(policy, [trace])
    return loss, grads


@dataclass
class SftResult:
    params: ParameterSet
    checkpoints: List[ParameterSet]
    metrics: List[dict] = field(default_factory=list)
    best_index: Optional[int] = None
    scores: List[float] = field(default_factory=list)
    stopped_early: bool = False


def train_sft(
    policy: Policy,
    dataset: Sequence[SupervisedTrace],
    config: SftConfig,
    select_fn: Optional[Callable[[ParameterSet], float]] = None,
    step_offset: int = 0,
    log: Optional[Callable[[dict], None]] = None,
) -> SftResult:
    """Mini-batch SFT with checkpoints at every epoch end (and every
    ``config.checkpoint_every`` steps when set).

    ``select_fn`` scores each checkpoint (e.g. held-out pass rate) and
    ``best_index`` points at the highest-scoring one.  With
    ``config.stop_at_score`` training ends at the first checkpoint whose score
    reaches it.
    """
    config.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    if config.stop_at_score is not None and select_fn is None:
        raise ValueError("stop_at_score needs a select_fn")
    params = copy_params(policy.params)
    if config.epochs == 0:
        return SftResult(params, [], [])
    model = policy.with_params(params)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    checkpoints: List[ParameterSet] = []
    metrics: List[dict] = []
    scores: List[float] = []
    step = step_offset
    total = config.epochs * math.ceil(len(dataset) / config.batch_size)

    def checkpoint() -> bool:
        checkpoints.append(copy_params(params))
        if select_fn is None:
            return False
        scores.append(float(select_fn(checkpoints[-1])))
        return config.stop_at_score is not None and scores[-1] >= config.stop_at_score

    for epoch in range(config.epochs):
        order = rng.permutation(len(dataset)) if config.shuffle else np.arange(len(dataset))
        starts = range(0, len(order), config.batch_size)
        for n, start in enumerate(starts):
            batch = [dataset[i] for i in order[start : start + config.batch_size]]
            opt.lr = config.lr_at(step - step_offset, total)
            loss, grads, _ = sft_batch_loss(model, batch)
            if not math.isfinite(loss):
                raise TrainingAborted(
                    f"non-finite loss at step {step}",
                    checkpoints[-1] if checkpoints else copy_params(policy.params),
                    checkpoints,
                    metrics,
                )
            norm = clip_grad_norm(grads, config.grad_clip)
            opt.step(params, grads)
            rec = {"stage": "sft", "step": step, "epoch": epoch, "loss": loss, "grad_norm": norm}
            metrics.append(rec)
            if log:
                log(rec)
            step += 1
            done = step - step_offset
            last_in_epoch = n == len(starts) - 1
            if last_in_epoch or (config.checkpoint_every and done % config.checkpoint_every == 0):
                if checkpoint():
                    return SftResult(params, checkpoints, metrics, len(checkpoints) - 1, scores, True)
    best = int(np.argmax(scores)) if scores else None
    return SftResult(params, checkpoints, metrics, best, scores)


def mean_sft_loss(policy: Policy, dataset: Sequence[SupervisedTrace], batch_size: int = 32) -> float:
    losses: List[float] = []
    for start in range(0, len(dataset), batch_size):
        _, _, per = sft_batch_loss(policy, dataset[start : start + batch_size])
        losses.extend(per)
    return float(np.mean(losses))
