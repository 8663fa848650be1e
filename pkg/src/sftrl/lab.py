"""Shared experiment building blocks: model shapes, query sets, baseline training.

A *baseline* is the starting point of every comparison: a policy trained with
CONCISE SFT until its greedy accuracy on a validation set reaches a target.
Picking the stopping point by score instead of by step count keeps baselines
comparable across seeds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .policy import DecodingConfig, EVAL_DECODING, ParameterSet, Policy, PolicyConfig, sample_many
from .seeding import derive_seed
from .sft import SftConfig, SftResult, train_sft
from .task import TOKENIZER, Query, TraceStyle, generate_queries, oracle_trace, reward, task_policy_config

ALL_DIFFICULTIES = (1, 2, 3, 4, 5)
# sampled evaluation: short for CONCISE-style models, long enough for any long-CoT trace
SHORT_EVAL = EVAL_DECODING.replace(max_new_tokens=40)
LONG_EVAL = EVAL_DECODING.replace(max_new_tokens=300)
VALIDATION_DECODING = DecodingConfig(greedy=True, max_new_tokens=30)


@dataclass(frozen=True)
class ModelShape:
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 8
    context_len: int = 512

    def policy_config(self, seed: int) -> PolicyConfig:
        return task_policy_config(
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            context_len=self.context_len,
            seed=derive_seed(seed, "init"),
        )


def parse_difficulties(text) -> tuple:
    if isinstance(text, (tuple, list)):
        values = tuple(int(x) for x in text)
    else:
        values = tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)
    if not values or any(not 1 <= d <= 5 for d in values):
        raise ValueError(f"difficulties must be a nonempty list drawn from 1..5, got {text!r}")
    return values


def query_set(seed: int, label: str, n: int, difficulties: Sequence[int] = ALL_DIFFICULTIES) -> List[Query]:
    """Deterministic query set; ids are ``label`` + index, so distinct labels never collide."""
    if n <= 0:
        raise ValueError("query count must be positive")
    return generate_queries(tuple(difficulties), n, seed, prefix=label)


def greedy_accuracy(policy: Policy, queries: Sequence[Query], decoding: DecodingConfig = VALIDATION_DECODING,
                    workers: Optional[int] = None) -> float:
    prompts = [q.prompt for q in queries]
    seeds = list(range(len(queries)))
    responses, _ = sample_many(policy, prompts, decoding, TOKENIZER.eos_id, seeds, workers)
    return float(np.mean([reward(q, TOKENIZER.decode(r)).correct for q, r in zip(queries, responses)]))


@dataclass
class BaselineConfig:
    target: float = 0.6
    learning_rate: float = 3e-3
    batch_size: int = 16
    warmup_steps: int = 100
    checkpoint_every: int = 50
    max_queries: int = 32000
    val_queries: int = 100
    style: str = "CONCISE"
    difficulties: tuple = ALL_DIFFICULTIES

    def validate(self) -> "BaselineConfig":
        if not 0 < self.target <= 1:
            raise ValueError("target must be in (0, 1]")
        if self.val_queries <= 0 or self.max_queries <= 0:
            raise ValueError("val_queries and max_queries must be positive")
        TraceStyle(self.style)
        self.sft_config(0).validate()
        return self

    def sft_config(self, seed: int) -> SftConfig:
        return SftConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=derive_seed(seed, "baseline-order"),
            warmup_steps=self.warmup_steps,
            checkpoint_every=self.checkpoint_every,
            stop_at_score=self.target,
        )


@dataclass
class Baseline:
    policy: Policy
    sft: SftResult
    validation: List[Query] = field(repr=False, default_factory=list)

    @property
    def params(self) -> ParameterSet:
        return self.policy.params

    def first_reaching(self, score: float) -> ParameterSet:
        """Earliest checkpoint whose validation score reaches ``score``."""
        for s, ckpt in zip(self.sft.scores, self.sft.checkpoints):
            if s >= score:
                return ckpt
        raise ValueError(f"no checkpoint reached {score}")


def train_baseline(seed: int, config: Optional[BaselineConfig] = None, shape: ModelShape = ModelShape(),
                   log=None) -> Baseline:
    """Train from scratch until greedy validation accuracy reaches ``config.target``.

    If the data runs out first, the last checkpoint is used.
    """
    config = (config or BaselineConfig()).validate()
    policy = Policy(shape.policy_config(seed))
    validation = query_set(seed, "v", config.val_queries, config.difficulties)
    train = query_set(seed, "b", config.max_queries, config.difficulties)
    traces = [oracle_trace(q, config.style) for q in train]

    def score(params):
        return greedy_accuracy(policy.with_params(params), validation)

    result = train_sft(policy, traces, config.sft_config(seed), select_fn=score, log=log)
    return Baseline(policy.with_params(result.params), result, validation)
