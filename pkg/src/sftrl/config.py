"""Experiment spec files: flat ``key = value`` text with includes.

Syntax::

    # comment
    include = common.cfg          # path relative to this file; processed in place
    name = kl-ablation
    seed = 0
    stages = base, rl_beta0, rl_beta
    stage.base.kind = baseline
    stage.rl_beta0.kind = rl
    stage.rl_beta0.init = base
    stage.rl_beta0.kl_coefficient = 0

Later assignments override earlier ones (including ones pulled in by an
include).  Every key is checked against the typed stage/eval/model schemas
when the spec is built, so a bad spec fails before anything is computed.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .grpo import RlConfig
from .hybrid import HybridConfig, HybridMode
from .lab import ALL_DIFFICULTIES, BaselineConfig, ModelShape, parse_difficulties
from .merging import MergeMethod
from .policy import DecodingConfig, EVAL_DECODING
from .sft import SftConfig
from .task import TraceStyle


class SpecError(ValueError):
    """Invalid spec file or value; raised before any stage runs."""


# --------------------------------------------------------------------------
# flat key/value text


def parse_text(text: str, origin: str = "<text>", base_dir: Optional[Path] = None,
               _stack: Tuple[str, ...] = ()) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SpecError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise SpecError(f"{origin}:{lineno}: empty key")
        if key == "include":
            if base_dir is None:
                raise SpecError(f"{origin}:{lineno}: include needs a file location")
            out.update(parse_file(base_dir / value, _stack))
        else:
            out[key] = value
    return out


def parse_file(path, _stack: Tuple[str, ...] = ()) -> Dict[str, str]:
    path = Path(path)
    key = str(path.resolve())
    if key in _stack:
        raise SpecError(f"include cycle through {path}")
    try:
        text = path.read_text()
    except OSError as e:
        raise SpecError(f"cannot read spec {path}: {e.strerror}") from None
    return parse_text(text, str(path), path.parent, _stack + (key,))


def parse_overrides(items) -> Dict[str, str]:
    """``["a.b=1", ...]`` from the command line."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise SpecError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def render(flat: Dict[str, str]) -> str:
    """Canonical text of a resolved spec (sorted keys, no includes)."""
    return "".join(f"{k} = {flat[k]}\n" for k in sorted(flat))


# --------------------------------------------------------------------------
# typed sections


def _coerce(value: str, typ, where: str):
    try:
        if typ is bool:
            low = value.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is tuple:
            return parse_difficulties(value)
        return value
    except ValueError:
        raise SpecError(f"{where}: cannot read {value!r} as {getattr(typ, '__name__', typ)}") from None


def _build(cls, values: Dict[str, str], where: str):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(values) - names)
    if unknown:
        raise SpecError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        typ = hints[k]
        if typing.get_origin(typ) is typing.Union:  # Optional[...]
            typ = next(a for a in typing.get_args(typ) if a is not type(None))
        kwargs[k] = _coerce(v, typ, f"{where}.{k}")
    return cls(**kwargs)


@dataclass
class BaselineStage:
    target: float = 0.6
    learning_rate: float = 3e-3
    batch_size: int = 16
    warmup_steps: int = 100
    checkpoint_every: int = 50
    max_queries: int = 32000
    val_queries: int = 100
    style: str = "CONCISE"
    difficulties: tuple = ALL_DIFFICULTIES

    def baseline_config(self) -> BaselineConfig:
        return BaselineConfig(**dataclasses.asdict(self))


@dataclass
class SftStage:
    init: str = ""
    style: str = "LONG_COT_GOOD"
    queries: int = 4800
    difficulties: tuple = ALL_DIFFICULTIES
    query_label: str = ""
    dataset: str = ""  # a distill stage, or a dataset file; replaces generated queries
    learning_rate: float = 2e-3
    batch_size: int = 16
    epochs: int = 1
    warmup_steps: int = 0
    optimizer: str = "adam"
    grad_clip: float = 1.0

    def sft_config(self, seed: int) -> SftConfig:
        return SftConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                         seed=seed, optimizer=self.optimizer, grad_clip=self.grad_clip,
                         warmup_steps=self.warmup_steps)


@dataclass
class RlStage:
    init: str = ""
    queries: int = 1600
    difficulties: tuple = ALL_DIFFICULTIES
    query_label: str = ""
    learning_rate: float = 3e-4
    batch_size: int = 8
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_coefficient: float = 0.005
    max_new_tokens: int = 32
    epochs: int = 1
    keep_easiest: bool = True
    profile_runs: int = 16  # baseline runs used to find always-solved queries
    warmup_steps: int = 0
    mini_batches: int = 1
    optimizer: str = "adam"
    grad_clip: float = 1.0

    def rl_config(self, seed: int) -> RlConfig:
        return RlConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, group_size=self.group_size,
                        clip_epsilon=self.clip_epsilon, kl_coefficient=self.kl_coefficient,
                        max_new_tokens=self.max_new_tokens, epochs=self.epochs, keep_easiest=self.keep_easiest,
                        seed=seed, optimizer=self.optimizer, grad_clip=self.grad_clip,
                        mini_batches=self.mini_batches, warmup_steps=self.warmup_steps)


@dataclass
class HybridStage(RlStage):
    mode: str = "TWO_STAGE"
    style: str = "LONG_COT_GOOD"
    max_new_tokens: int = 96
    prefix_weight: float = 0.2
    total_steps: int = 0  # prefix fade length; 0 = the whole run
    sft_queries: int = 4800
    sft_learning_rate: float = 2e-3
    sft_batch_size: int = 16
    sft_epochs: int = 1

    def hybrid_config(self, seed: int) -> HybridConfig:
        return HybridConfig(
            mode=HybridMode(self.mode.upper()),
            sft_config=SftConfig(learning_rate=self.sft_learning_rate, batch_size=self.sft_batch_size,
                                 epochs=self.sft_epochs, seed=seed, optimizer=self.optimizer),
            rl_config=self.rl_config(seed),
            prefix_weight=self.prefix_weight,
            total_steps=self.total_steps or None,
            oracle_style=TraceStyle(self.style),
        )


@dataclass
class DistillStage:
    init: str = ""
    queries: int = 400
    difficulties: tuple = ALL_DIFFICULTIES
    query_label: str = ""
    n_samples: int = 8
    keep: str = "all"
    style: str = "LONG_COT_GOOD"  # backfill style
    max_new_tokens: int = 40


@dataclass
class MergeStage:
    a: str = ""
    b: str = ""
    method: str = "LINEAR"
    ratios: str = "0,0.25,0.5,0.75,1"
    density: float = 0.2
    base: str = ""

    def ratio_list(self) -> List[float]:
        try:
            values = sorted({float(x) for x in self.ratios.split(",") if x.strip()})
        except ValueError:
            raise SpecError(f"bad ratio list {self.ratios!r}") from None
        if not values or any(not 0 <= r <= 1 for r in values):
            raise SpecError(f"merge ratios must lie in [0, 1], got {self.ratios!r}")
        return values


STAGE_KINDS = {
    "baseline": BaselineStage,
    "sft": SftStage,
    "rl": RlStage,
    "hybrid": HybridStage,
    "distill": DistillStage,
    "merge": MergeStage,
}
CHECKPOINT_KINDS = ("baseline", "sft", "rl", "hybrid")


@dataclass
class EvalSpec:
    models: str = ""  # comma list; default every checkpoint-producing stage (merges expand per ratio)
    runs: int = 4
    queries: int = 200
    difficulties: tuple = ALL_DIFFICULTIES
    max_new_tokens: int = 300
    temperature: float = EVAL_DECODING.temperature
    top_p: float = EVAL_DECODING.top_p
    top_k: int = EVAL_DECODING.top_k
    profile: str = ""  # model whose pass rates define difficulty levels; default the first baseline
    profile_runs: int = 16
    greedy: bool = True
    kl_queries: int = 4

    def decoding(self) -> DecodingConfig:
        return DecodingConfig(temperature=self.temperature, top_p=self.top_p, top_k=self.top_k,
                              max_new_tokens=self.max_new_tokens).validate()


@dataclass
class StageSpec:
    name: str
    kind: str
    params: object


@dataclass
class ExperimentSpec:
    name: str
    seed: int
    output_dir: str
    model: ModelShape
    stages: List[StageSpec]
    eval: Optional[EvalSpec]
    flat: Dict[str, str] = field(repr=False, default_factory=dict)

    def stage(self, name: str) -> StageSpec:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name


# --------------------------------------------------------------------------
# building + validation


_TOP_KEYS = {"name", "seed", "output_dir", "stages", "description"}


def _validate_stage(st: StageSpec, seed: int, earlier: Dict[str, str]) -> None:
    p, where = st.params, f"stage.{st.name}"

    def need_ckpt(ref: str, key: str):
        if not ref:
            raise SpecError(f"{where}.{key} is required")
        if ref not in earlier:
            raise SpecError(f"{where}.{key} refers to {ref!r}, which is not an earlier stage")
        if earlier[ref] not in CHECKPOINT_KINDS:
            raise SpecError(f"{where}.{key}: stage {ref!r} ({earlier[ref]}) produces no single checkpoint")

    try:
        if st.kind == "baseline":
            p.baseline_config().validate()
        elif st.kind == "sft":
            need_ckpt(p.init, "init")
            TraceStyle(p.style)
            p.sft_config(seed).validate()
            if p.dataset and p.dataset in earlier and earlier[p.dataset] != "distill":
                raise SpecError(f"{where}.dataset: stage {p.dataset!r} is not a distill stage")
            if p.dataset and p.dataset not in earlier and not Path(p.dataset).is_file():
                raise SpecError(f"{where}.dataset: {p.dataset!r} is neither an earlier distill stage nor a file")
        elif st.kind in ("rl", "hybrid"):
            need_ckpt(p.init, "init")
            p.rl_config(seed).validate()
            if p.profile_runs < 1:
                raise SpecError(f"{where}.profile_runs must be >= 1")
            if st.kind == "hybrid":
                p.hybrid_config(seed).validate()
        elif st.kind == "distill":
            need_ckpt(p.init, "init")
            TraceStyle(p.style)
            if p.keep not in ("all", "shortest") or p.n_samples < 1 or p.max_new_tokens < 1:
                raise SpecError(f"{where}: keep must be all|shortest, n_samples and max_new_tokens positive")
        elif st.kind == "merge":
            need_ckpt(p.a, "a")
            need_ckpt(p.b, "b")
            method = MergeMethod(p.method.upper())
            p.ratio_list()
            if method is MergeMethod.TIES:
                need_ckpt(p.base, "base")
            if not 0 < p.density <= 1:
                raise SpecError(f"{where}.density must be in (0, 1]")
    except SpecError:
        raise
    except (ValueError, KeyError) as e:
        raise SpecError(f"{where}: {e}") from None


def build_spec(flat: Dict[str, str]) -> ExperimentSpec:
    """Typed, fully validated spec.  Raises SpecError on any problem."""
    flat = dict(flat)
    for k in ("name", "stages"):
        if not flat.get(k):
            raise SpecError(f"missing required key {k!r}")
    name = flat["name"]
    if "/" in name or name in (".", ".."):
        raise SpecError(f"invalid experiment name {name!r}")
    seed = _coerce(flat.get("seed", "0"), int, "seed")
    output_dir = flat.get("output_dir", "runs")
    order = [s.strip() for s in flat["stages"].split(",") if s.strip()]
    if len(set(order)) != len(order):
        raise SpecError("duplicate stage names")

    sections: Dict[str, Dict[str, str]] = {"model": {}, "eval": {}}
    stage_keys: Dict[str, Dict[str, str]] = {s: {} for s in order}
    for key, value in flat.items():
        if key in _TOP_KEYS:
            continue
        head, _, rest = key.partition(".")
        if head == "stage":
            sname, _, field_name = rest.partition(".")
            if sname not in stage_keys:
                raise SpecError(f"{key}: stage {sname!r} is not listed in 'stages'")
            if not field_name:
                raise SpecError(f"{key}: missing field name")
            stage_keys[sname][field_name] = value
        elif head in sections and rest:
            sections[head][rest] = value
        else:
            raise SpecError(f"unknown key {key!r}")

    model = _build(ModelShape, sections["model"], "model")
    try:
        model.policy_config(seed)
    except ValueError as e:
        raise SpecError(f"model: {e}") from None

    stages, earlier = [], {}
    for sname in order:
        values = dict(stage_keys[sname])
        kind = values.pop("kind", "")
        if kind not in STAGE_KINDS:
            raise SpecError(f"stage {sname!r}: unknown kind {kind!r} (expected one of {', '.join(STAGE_KINDS)})")
        st = StageSpec(sname, kind, _build(STAGE_KINDS[kind], values, f"stage.{sname}"))
        _validate_stage(st, seed, earlier)
        stages.append(st)
        earlier[sname] = kind

    ev = None
    if sections["eval"] or any(s.kind in CHECKPOINT_KINDS + ("merge",) for s in stages):
        ev = _build(EvalSpec, sections["eval"], "eval")
        try:
            ev.decoding()
        except ValueError as e:
            raise SpecError(f"eval: {e}") from None
        if ev.runs < 1 or ev.queries < 1 or ev.profile_runs < 1:
            raise SpecError("eval.runs, eval.queries and eval.profile_runs must be positive")
        names = set(eval_models(stages, ev, validate=True))
        if ev.profile and ev.profile not in names:
            raise SpecError(f"eval.profile {ev.profile!r} is not an evaluated model")
    return ExperimentSpec(name, seed, output_dir, model, stages, ev, flat)


def merge_model_name(stage: str, ratio: float) -> str:
    return f"{stage}@{ratio:g}"


def eval_models(stages: List[StageSpec], ev: EvalSpec, validate: bool = False) -> List[str]:
    available: List[str] = []
    for s in stages:
        if s.kind in CHECKPOINT_KINDS:
            available.append(s.name)
        elif s.kind == "merge":
            available += [merge_model_name(s.name, r) for r in s.params.ratio_list()]
    if not ev.models:
        return available
    chosen = [m.strip() for m in ev.models.split(",") if m.strip()]
    out = []
    for m in chosen:
        if m in available:
            out.append(m)
        elif any(s.name == m and s.kind == "merge" for s in stages):
            out += [a for a in available if a.startswith(m + "@")]
        elif validate:
            raise SpecError(f"eval.models: {m!r} is not a checkpoint-producing stage")
    return out


def profile_model(spec: ExperimentSpec) -> Optional[str]:
    if spec.eval is None:
        return None
    if spec.eval.profile:
        return spec.eval.profile
    models = eval_models(spec.stages, spec.eval)
    for s in spec.stages:
        if s.kind == "baseline" and s.name in models:
            return s.name
    return models[0] if models else None


def load_spec(path, overrides: Optional[Dict[str, str]] = None) -> ExperimentSpec:
    flat = parse_file(path)
    flat.update(overrides or {})
    return build_spec(flat)
