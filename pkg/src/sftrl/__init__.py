"""Desk-scale lab for comparing SFT, GRPO, hybrid schedules, data mixing and model merging
on a tiny numpy transformer and a synthetic arithmetic task."""

from .seeding import derive_seed
from .policy import DecodingConfig, EVAL_DECODING, Policy, PolicyConfig
from .task import TOKENIZER, Query, TraceStyle, generate_queries, oracle_trace, reward, task_policy_config
from .sft import SftConfig, SupervisedTrace, train_sft
from .grpo import RlConfig, train_rl
from .hybrid import HybridConfig, HybridMode, run_two_stage, train_hybrid
from .mixing import assemble_mixed, distill
from .merging import MergeMethod, MergeRecipe, merge
from .analysis import accuracy_by_level, evaluate, pass_rate_profile
from .checkpoint import load_checkpoint, save_checkpoint

__version__ = "0.1.0"
