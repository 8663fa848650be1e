"""Synthetic verifiable arithmetic task: queries, tokenizer, verifier, reward, oracle traces."""
from __future__ import annotations

import enum
import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from .policy import PolicyConfig
from .seeding import derive_seed

INSTRUCTION = (
    "Please reason step by step within <think> </think> tags, "
    "and put your final answer within \\boxed{}."
)
THINK_OPEN, THINK_CLOSE, BOXED = "<think>", "</think>", "\\boxed{"

DEFAULT_LEXICON = (
    "wait", "check", "mistake", "alternative", "however",
    "first", "next", "verify", "hmm", "maybe",
)

PAD, EOS, BOS = "<pad>", "<eos>", "<bos>"

# every integer in [0, MAX_VALUE] is a single token; running values never leave that range
MAX_VALUE = 9

_VOCAB: List[str] = (
    [PAD, EOS, BOS]
    + [str(n) for n in range(MAX_VALUE + 1)]
    + list(" +-*()=,.")
    + [THINK_OPEN, THINK_CLOSE, BOXED, "}"]
    + list(DEFAULT_LEXICON)
    + [INSTRUCTION]
    + ["compute", "so", "then", "ok", "is", "again", "result", "let", "the", "final", "answer"]
)


class TokenizeError(ValueError):
    pass


class Tokenizer:
    """Greedy longest-match tokenizer over a closed vocabulary.

    Integers 0..MAX_VALUE, operators and punctuation are single tokens, as is
    every lexicon word, tag, and the whole instruction sentence.
    """

    def __init__(self, vocab: Sequence[str] = tuple(_VOCAB)):
        self.vocab = list(vocab)
        self.index = {s: i for i, s in enumerate(self.vocab)}
        self._by_len = sorted((s for s in self.vocab if s not in (PAD, EOS, BOS)), key=len, reverse=True)
        self.pad_id, self.eos_id, self.bos_id = self.index[PAD], self.index[EOS], self.index[BOS]

    def __len__(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> List[int]:
        out, i = [], 0
        while i < len(text):
            for piece in self._by_len:
                if text.startswith(piece, i):
                    out.append(self.index[piece])
                    i += len(piece)
                    break
            else:
                raise TokenizeError(f"cannot tokenize {text[i:i + 12]!r}")
        return out

    def decode(self, ids: Iterable[int]) -> str:
        parts = []
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise TokenizeError(f"token id {i} outside the vocabulary")
            if i not in (self.pad_id, self.eos_id, self.bos_id):
                parts.append(self.vocab[i])
        return "".join(parts)


TOKENIZER = Tokenizer()


def task_policy_config(**overrides) -> PolicyConfig:
    """Policy architecture sized to the task vocabulary."""
    overrides.setdefault("vocab_size", len(TOKENIZER))
    return PolicyConfig(**overrides).validate()


# --------------------------------------------------------------------------
# queries


@dataclass(frozen=True)
class Query:
    id: str
    expression: str
    answer: int
    difficulty: int
    prompt_tokens: tuple = field(default=(), compare=False, repr=False)

    @property
    def prompt(self) -> List[int]:
        return list(self.prompt_tokens)


def _apply(op: str, a: int, b: int) -> int:
    return a + b if op == "+" else a - b if op == "-" else a * b


def generate_steps(difficulty: int, seed: int):
    """Operand/operator chain with difficulty+1 operations, applied left to right.

    Running values stay in [0, MAX_VALUE].
    """
    if not 1 <= difficulty <= MAX_DIFFICULTY:
        raise ValueError(f"difficulty must be in 1..5, got {difficulty}")
    rng = np.random.default_rng(seed)
    value = int(rng.integers(1, MAX_VALUE + 1))
    start, steps = value, []
    while len(steps) < difficulty + 1:
        b = int(rng.integers(1, MAX_VALUE + 1))
        ops = [op for op in "+-*" if 0 <= _apply(op, value, b) <= MAX_VALUE]
        if not ops:
            continue
        op = ops[int(rng.integers(len(ops)))]
        value = _apply(op, value, b)
        steps.append((op, b, value))
    return start, steps


def format_expression(start: int, steps) -> str:
    """Flat expression such as ``3+4*2-5``; the task evaluates it strictly left to right."""
    return str(start) + "".join(f"{op}{b}" for op, b, _ in steps)


MAX_DIFFICULTY = 5
# operand/operator tokens of the longest expression
_EXPR_WIDTH = 2 * (MAX_DIFFICULTY + 1) + 1


def render_prompt(query_or_expression) -> List[int]:
    """Fixed-width prompt: the expression is left-aligned and padded before the instruction.

    Every prompt has the same length, so the k-th operand and the start of the
    response sit at the same positions for every difficulty.
    """
    expression = getattr(query_or_expression, "expression", query_or_expression)
    expr = TOKENIZER.encode(expression)
    if len(expr) > _EXPR_WIDTH:
        raise ValueError(f"expression longer than {_EXPR_WIDTH} tokens: {expression!r}")
    pad = [TOKENIZER.pad_id] * (_EXPR_WIDTH - len(expr))
    return (
        [TOKENIZER.bos_id]
        + TOKENIZER.encode("compute ")
        + expr
        + TOKENIZER.encode(".")
        + pad
        + TOKENIZER.encode(INSTRUCTION)
    )


def generate_query(difficulty: int, seed: int, qid: Optional[str] = None) -> Query:
    start, steps = generate_steps(difficulty, seed)
    expression = format_expression(start, steps)
    return Query(
        id=qid if qid is not None else f"d{difficulty}-{seed}",
        expression=expression,
        answer=steps[-1][2],
        difficulty=difficulty,
        prompt_tokens=tuple(render_prompt(expression)),
    )


def generate_queries(difficulties: Sequence[int], n: int, seed: int, prefix: str = "q") -> List[Query]:
    """``n`` queries cycling through ``difficulties``, each with a derived seed."""
    out = []
    for i in range(n):
        d = difficulties[i % len(difficulties)]
        out.append(generate_query(d, derive_seed(seed, prefix, i), qid=f"{prefix}{i}"))
    return out


def chain_of(query: Query):
    """Recover (start, steps) from an expression."""
    tokens = re.findall(r"\d+|[-+*]", query.expression)
    value = int(tokens[0])
    start, steps = value, []
    for op, b in zip(tokens[1::2], tokens[2::2]):
        value = _apply(op, value, int(b))
        steps.append((op, int(b), value))
    return start, steps


# --------------------------------------------------------------------------
# verification and reward

_BOXED_RE = re.compile(r"\\boxed\{([^{}]*)\}")
ACCURACY_REWARD = 0.9
FORMAT_REWARD = 0.1


def extract_answer(response_text: str) -> Optional[int]:
    """Integer inside the last ``\\boxed{...}``; None if absent or unparseable."""
    matches = _BOXED_RE.findall(response_text)
    if not matches:
        return None
    try:
        return int(matches[-1].strip())
    except ValueError:
        return None


def check_format(response_text: str) -> bool:
    if response_text.count(THINK_OPEN) != 1 or response_text.count(THINK_CLOSE) != 1:
        return False
    close = response_text.index(THINK_CLOSE)
    if response_text.index(THINK_OPEN) > close:
        return False
    return _BOXED_RE.search(response_text, close) is not None


@dataclass(frozen=True)
class RewardBreakdown:
    accuracy: float
    format: float
    total: float
    correct: bool


def reward(query: Query, response_text: str) -> RewardBreakdown:
    correct = extract_answer(response_text) == query.answer
    acc = ACCURACY_REWARD if correct else 0.0
    fmt = FORMAT_REWARD if check_format(response_text) else 0.0
    return RewardBreakdown(acc, fmt, acc + fmt, correct)


# --------------------------------------------------------------------------
# oracle traces


class TraceStyle(str, enum.Enum):
    CONCISE = "CONCISE"
    LONG_COT_GOOD = "LONG_COT_GOOD"
    LONG_COT_VERBOSE = "LONG_COT_VERBOSE"


VERBOSE_FACTOR = 3


def _step_text(prev: int, op: str, b: int, value: int) -> str:
    return f"{prev}{op}{b}={value}"


def trace_text(query: Query, style: TraceStyle | str, seed: int = 0) -> str:
    style = TraceStyle(style)
    start, steps = chain_of(query)
    answer = query.answer
    if style is TraceStyle.CONCISE:
        # intermediate values only; the last one goes straight into the box
        values = ",".join(str(v) for _, _, v in steps[:-1])
        return f"{THINK_OPEN}{values}{THINK_CLOSE}{BOXED}{answer}}}"

    prevs = [start] + [v for _, _, v in steps[:-1]]
    derivations = [_step_text(p, op, b, v) for (op, b, v), p in zip(steps, prevs)]
    words = ["first"] + ["next"] * (len(steps) - 1)
    if style is TraceStyle.LONG_COT_GOOD:
        body = "".join(f"{w} {d}." for w, d in zip(words, derivations))
        body += f"verify {answer} ok.so the answer is {answer}."
        return f"{THINK_OPEN}{body}{THINK_CLOSE}so the result is {BOXED}{answer}}}"

    # verbose: one self-corrected slip, then whole re-check passes until the
    # trace is at least VERBOSE_FACTOR times the good trace
    rng = np.random.default_rng(seed)
    slip = int(rng.integers(len(steps)))
    v_slip = steps[slip][2]
    wrong = [x for x in range(v_slip - 3, v_slip + 4) if x != v_slip and 0 <= x <= MAX_VALUE]
    wrong_value = wrong[int(rng.integers(len(wrong)))]
    body = ""
    for i, ((op, b, v), p, w, d) in enumerate(zip(steps, prevs, words, derivations)):
        if i == slip:
            body += f"{w} {_step_text(p, op, b, wrong_value)}.wait,mistake.let {d}."
        else:
            body += f"{w} {d}."
    recheck = "hmm,check again." + "".join(f"{d}." for d in derivations) + f"maybe verify {answer} ok."
    ending = f"so the result is {answer}."
    target = VERBOSE_FACTOR * len(response_tokens(trace_text(query, TraceStyle.LONG_COT_GOOD)))
    text = f"{THINK_OPEN}{body}{ending}{THINK_CLOSE}so the final answer is {BOXED}{answer}}}"
    while len(response_tokens(text)) < target:
        body += recheck
        text = f"{THINK_OPEN}{body}{ending}{THINK_CLOSE}so the final answer is {BOXED}{answer}}}"
    return text


def response_tokens(text: str) -> List[int]:
    """Target tokens for a response text, terminated by EOS."""
    return TOKENIZER.encode(text) + [TOKENIZER.eos_id]


def oracle_trace(query: Query, style: TraceStyle | str, seed: int = 0):
    from .sft import SupervisedTrace

    style = TraceStyle(style)
    text = trace_text(query, style, seed)
    return SupervisedTrace.sft(query.prompt, response_tokens(text), source=style.value, query_id=query.id)


# --------------------------------------------------------------------------
# dataset files (one JSON record per line)


def dataset_record(query: Query, trace_text_: str, style: str) -> dict:
    return {
        "id": query.id,
        "expression": query.expression,
        "answer": query.answer,
        "difficulty": query.difficulty,
        "prompt": TOKENIZER.decode(query.prompt),
        "trace": trace_text_,
        "style": style,
    }


def write_dataset(path, records: Iterable[dict]) -> None:
    with open(path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_dataset(path) -> List[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def query_from_record(rec: dict) -> Query:
    return Query(
        id=rec["id"],
        expression=rec["expression"],
        answer=int(rec["answer"]),
        difficulty=int(rec["difficulty"]),
        prompt_tokens=tuple(render_prompt(rec["expression"])),
    )
