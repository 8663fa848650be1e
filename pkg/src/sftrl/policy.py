"""Tiny decoder-only transformer policy in numpy with hand-written backprop.

A ParameterSet is a plain ordered ``dict[str, np.ndarray]``.  Every compute
path runs in the dtype of the parameters it is handed (float32 by default;
gradient checks cast to float64).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

ParameterSet = Dict[str, np.ndarray]

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ConfigError(ValueError):
    pass


class SequenceLengthError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    vocab_size: int = 64
    context_len: int = 512
    embed_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    seed: int = 0

    def validate(self) -> "PolicyConfig":
        for name in ("vocab_size", "context_len", "embed_dim", "num_layers", "num_heads"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(
                f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}"
            )
        return self

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DecodingConfig:
    temperature: float = 1.0
    top_p: float = 1.0
    top_k: int = 0
    max_new_tokens: int = 64
    seed: int = 0
    greedy: bool = False

    def validate(self) -> "DecodingConfig":
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0 (use greedy=True for argmax decoding)")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.top_k < 0:
            raise ConfigError("top_k must be non-negative")
        if self.max_new_tokens <= 0:
            raise ConfigError("max_new_tokens must be positive")
        return self

    def replace(self, **changes) -> "DecodingConfig":
        data = asdict(self)
        data.update(changes)
        return DecodingConfig(**data)


# evaluation defaults (temperature 0.6, top-p 0.95, top-k 20); rollouts use temperature 1
EVAL_DECODING = DecodingConfig(temperature=0.6, top_p=0.95, top_k=20)
ROLLOUT_DECODING = DecodingConfig(temperature=1.0)


# --------------------------------------------------------------------------
# parameter sets


def param_shapes(config: PolicyConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    config.validate()
    d, v, c = config.embed_dim, config.vocab_size, config.context_len
    shapes = [("tok_emb", (v, d)), ("pos_emb", (c, d))]
    for layer in range(config.num_layers):
        p = f"h{layer}."
        shapes += [
            (p + "ln1.g", (d,)),
            (p + "ln1.b", (d,)),
            (p + "attn.w_qkv", (d, 3 * d)),
            (p + "attn.b_qkv", (3 * d,)),
            (p + "attn.w_o", (d, d)),
            (p + "attn.b_o", (d,)),
            (p + "ln2.g", (d,)),
            (p + "ln2.b", (d,)),
            (p + "mlp.w_in", (d, 4 * d)),
            (p + "mlp.b_in", (4 * d,)),
            (p + "mlp.w_out", (4 * d, d)),
            (p + "mlp.b_out", (d,)),
        ]
    shapes += [("ln_f.g", (d,)), ("ln_f.b", (d,)), ("head.w", (d, v))]
    return shapes


def init_params(config: PolicyConfig) -> ParameterSet:
    """Deterministic small-scale initialization.

    The output head starts at a tenth of the usual scale so the initial
    next-token distribution is close to uniform.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    resid_scale = 0.02 / math.sqrt(2 * config.num_layers)
    params: ParameterSet = {}
    for name, shape in param_shapes(config):
        if name.endswith(".g"):
            value = np.ones(shape)
        elif name.endswith((".b", "b_qkv", "b_o", "b_in", "b_out")):
            value = np.zeros(shape)
        elif name.endswith(("attn.w_o", "mlp.w_out")):
            value = rng.normal(0.0, resid_scale, shape)
        elif name == "head.w":
            value = rng.normal(0.0, 0.002, shape)
        else:
            value = rng.normal(0.0, 0.02, shape)
        params[name] = value.astype(np.float32)
    return params


def zeros_like(params: ParameterSet) -> ParameterSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params: ParameterSet) -> ParameterSet:
    return {k: v.copy() for k, v in params.items()}


def astype(params: ParameterSet, dtype) -> ParameterSet:
    return {k: v.astype(dtype) for k, v in params.items()}


def add_scaled(a: ParameterSet, b: ParameterSet, scale: float = 1.0) -> ParameterSet:
    return {k: a[k] + scale * b[k] for k in a}


def global_norm(params: ParameterSet) -> float:
    return math.sqrt(sum(float(np.sum(np.square(v, dtype=np.float64))) for v in params.values()))


def params_equal(a: ParameterSet, b: ParameterSet) -> bool:
    return list(a) == list(b) and all(np.array_equal(a[k], b[k]) for k in a)


def all_finite(params: ParameterSet) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())


def num_params(params: ParameterSet) -> int:
    return sum(v.size for v in params.values())


def check_compatible(a: ParameterSet, b: ParameterSet) -> None:
    if list(a) != list(b):
        raise ValueError("parameter sets have different tensor names")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"shape mismatch for {k}: {a[k].shape} vs {b[k].shape}")


# --------------------------------------------------------------------------
# building blocks


def _layer_norm(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layer_norm_backward(dy, g, cache):
    xhat, rstd = cache
    dxhat = dy * g
    n = xhat.shape[-1]
    dx = rstd / n * (
        n * dxhat
        - dxhat.sum(-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(-1, keepdims=True)
    )
    lead = tuple(range(dy.ndim - 1))
    return dx, (dy * xhat).sum(lead), dy.sum(lead)


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_backward(du_out, u, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * hd)


def _num_layers(params: ParameterSet) -> int:
    return sum(1 for k in params if k.endswith("ln1.g"))


# --------------------------------------------------------------------------
# full-sequence forward / backward


_MASKS: dict = {}


def _causal_mask(t: int, dtype) -> np.ndarray:
    """Additive (t, t) mask: 0 on and below the diagonal, -inf above."""
    key = (t, np.dtype(dtype).str)
    if key not in _MASKS:
        m = np.zeros((t, t), dtype=dtype)
        m[np.triu_indices(t, 1)] = -np.inf
        m.setflags(write=False)
        _MASKS[key] = m
    return _MASKS[key]


def forward(params: ParameterSet, ids: np.ndarray, num_heads: int, keep_cache: bool = False):
    """Logits for a right-padded batch of token ids, shape (B, T, V)."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    bsz, t = ids.shape
    if t > params["pos_emb"].shape[0]:
        raise SequenceLengthError(f"sequence length {t} exceeds context {params['pos_emb'].shape[0]}")
    dtype = params["tok_emb"].dtype
    scale = dtype.type(1.0 / math.sqrt(params["tok_emb"].shape[1] // num_heads))
    neg_mask = _causal_mask(t, dtype)
    x = params["tok_emb"][ids] + params["pos_emb"][:t]
    caches = []
    for layer in range(_num_layers(params)):
        p = f"h{layer}."
        h, ln1 = _layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        qkv = h @ params[p + "attn.w_qkv"] + params[p + "attn.b_qkv"]
        q, k, v = (_split_heads(a, num_heads) for a in np.split(qkv, 3, axis=-1))
        s = q @ k.transpose(0, 1, 3, 2)
        s *= scale
        s += neg_mask
        s -= s.max(-1, keepdims=True)
        pr = np.exp(s, out=s)
        pr /= pr.sum(-1, keepdims=True)
        o = _merge_heads(pr @ v)
        x = x + o @ params[p + "attn.w_o"] + params[p + "attn.b_o"]
        h2, ln2 = _layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        u = h2 @ params[p + "mlp.w_in"] + params[p + "mlp.b_in"]
        a, tanh_u = _gelu(u)
        x = x + a @ params[p + "mlp.w_out"] + params[p + "mlp.b_out"]
        if keep_cache:
            caches.append((h, ln1, q, k, v, pr, o, h2, ln2, u, tanh_u, a))
    xf, lnf = _layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = xf @ params["head.w"]
    if keep_cache:
        return logits, (ids, caches, xf, lnf, scale)
    return logits


def _backward_from_logits(params: ParameterSet, dlogits: np.ndarray, cache, num_heads: int) -> ParameterSet:
    ids, caches, xf, lnf, scale = cache
    grads = zeros_like(params)
    d = xf.shape[-1]
    grads["head.w"] = xf.reshape(-1, d).T @ dlogits.reshape(-1, dlogits.shape[-1])
    dx, grads["ln_f.g"], grads["ln_f.b"] = _layer_norm_backward(
        dlogits @ params["head.w"].T, params["ln_f.g"], lnf
    )
    for layer in reversed(range(len(caches))):
        p = f"h{layer}."
        h, ln1, q, k, v, pr, o, h2, ln2, u, tanh_u, a = caches[layer]
        # MLP
        grads[p + "mlp.w_out"] = a.reshape(-1, a.shape[-1]).T @ dx.reshape(-1, d)
        grads[p + "mlp.b_out"] = dx.sum((0, 1))
        du = _gelu_backward(dx @ params[p + "mlp.w_out"].T, u, tanh_u)
        grads[p + "mlp.w_in"] = h2.reshape(-1, d).T @ du.reshape(-1, du.shape[-1])
        grads[p + "mlp.b_in"] = du.sum((0, 1))
        dh2, grads[p + "ln2.g"], grads[p + "ln2.b"] = _layer_norm_backward(
            du @ params[p + "mlp.w_in"].T, params[p + "ln2.g"], ln2
        )
        dx = dx + dh2
        # attention
        grads[p + "attn.w_o"] = o.reshape(-1, d).T @ dx.reshape(-1, d)
        grads[p + "attn.b_o"] = dx.sum((0, 1))
        do = _split_heads(dx @ params[p + "attn.w_o"].T, num_heads)
        dpr = do @ v.transpose(0, 1, 3, 2)
        dv = pr.transpose(0, 1, 3, 2) @ do
        ds = dpr
        ds -= (dpr * pr).sum(-1, keepdims=True)
        ds *= pr
        ds *= scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
        grads[p + "attn.w_qkv"] = h.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        grads[p + "attn.b_qkv"] = dqkv.sum((0, 1))
        dh, grads[p + "ln1.g"], grads[p + "ln1.b"] = _layer_norm_backward(
            dqkv @ params[p + "attn.w_qkv"].T, params[p + "ln1.g"], ln1
        )
        dx = dx + dh
    t = ids.shape[1]
    onehot = np.zeros((ids.size, grads["tok_emb"].shape[0]), dtype=dx.dtype)
    onehot[np.arange(ids.size), ids.reshape(-1)] = 1
    grads["tok_emb"] += onehot.T @ dx.reshape(-1, d)
    grads["pos_emb"][:t] = dx.sum(0)
    return grads


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = 0) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def batch_token_logprobs(
    params: ParameterSet, seqs: Sequence[Sequence[int]], num_heads: int, keep_cache: bool = False
):
    """Log-probability of every next token in each sequence.

    Returns ``(logp, logprobs_full)`` where ``logp[b, j]`` scores token ``j+1``
    of row ``b`` and ``logprobs_full`` is the (B, T-1, V) log-distribution.
    """
    ids = pad_batch(seqs)
    out = forward(params, ids[:, :-1], num_heads, keep_cache=keep_cache)
    logits, cache = out if keep_cache else (out, None)
    lp = log_softmax(logits)
    targets = ids[:, 1:]
    logp = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    if keep_cache:
        return logp, lp, (ids, cache)
    return logp, lp


def grad_from_weights(
    params: ParameterSet, lp: np.ndarray, scored, weights: np.ndarray, num_heads: int
) -> ParameterSet:
    """Backward pass for a batch scored with ``keep_cache=True``.

    Returns the gradient of ``sum_{b,j} weights[b, j] * (-log p(token_{j+1}))``.
    """
    ids, cache = scored
    weights = np.asarray(weights, dtype=lp.dtype)
    if not np.all(np.isfinite(weights)):
        raise NumericError("non-finite loss weights")
    targets = ids[:, 1:, None]
    # d(-w log p)/dlogits = w * (p - onehot)
    dlogits = np.exp(lp) * weights[..., None]
    np.put_along_axis(
        dlogits, targets, np.take_along_axis(dlogits, targets, axis=-1) - weights[..., None], axis=-1
    )
    return _backward_from_logits(params, dlogits, cache, num_heads)


def batch_weighted_grad(
    params: ParameterSet,
    seqs: Sequence[Sequence[int]],
    weights: np.ndarray,
    num_heads: int,
) -> Tuple[np.ndarray, ParameterSet]:
    """Gradient of ``sum_{b,j} weights[b, j] * (-log p(token_{j+1}))``.

    ``weights`` has shape (B, T-1) aligned with next-token targets of the
    right-padded batch; padded slots must carry weight 0.
    """
    if not np.all(np.isfinite(np.asarray(weights, dtype=np.float64))):
        raise NumericError("non-finite loss weights")
    logp, lp, scored = batch_token_logprobs(params, seqs, num_heads, keep_cache=True)
    return logp, grad_from_weights(params, lp, scored, weights, num_heads)


def response_slices(prompts: Sequence[Sequence[int]], responses: Sequence[Sequence[int]]):
    """Column slice of each row's response targets in a (B, T-1) next-token block."""
    return [slice(len(p) - 1, len(p) - 1 + len(r)) for p, r in zip(prompts, responses)]


def score_responses(
    policy: "Policy",
    prompts: Sequence[Sequence[int]],
    responses: Sequence[Sequence[int]],
    keep_cache: bool = False,
):
    """Per-token log-probabilities of each response under ``policy``.

    Returns ``(list of arrays, full (B, T-1, V) log-distribution, scored)``;
    ``scored`` is only populated when ``keep_cache`` is set.
    """
    seqs = [list(p) + list(r) for p, r in zip(prompts, responses)]
    if max(len(s) for s in seqs) > policy.config.context_len:
        raise SequenceLengthError("prompt + response exceeds context_len")
    out = batch_token_logprobs(policy.params, seqs, policy.config.num_heads, keep_cache=keep_cache)
    logp, lp = out[0], out[1]
    per_row = [logp[i, sl] for i, sl in enumerate(response_slices(prompts, responses))]
    return per_row, lp, (out[2] if keep_cache else None)


# --------------------------------------------------------------------------
# single-sequence API


class Policy:
    """Binds a ParameterSet to its architecture hyper-parameters."""

    def __init__(self, config: PolicyConfig, params: Optional[ParameterSet] = None):
        self.config = config.validate()
        self.params = init_params(config) if params is None else params

    def with_params(self, params: ParameterSet) -> "Policy":
        return Policy(self.config, params)

    def _check_len(self, n: int) -> None:
        if n > self.config.context_len:
            raise SequenceLengthError(f"{n} tokens exceed context_len={self.config.context_len}")

    def next_token_logprobs(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        """Full log-distribution at each response position, shape (|response|, V)."""
        if not len(prompt):
            raise ValueError("prompt must be nonempty")
        seq = list(prompt) + list(response)
        self._check_len(len(seq))
        if not len(response):
            return np.zeros((0, self.config.vocab_size), dtype=self.params["tok_emb"].dtype)
        logits = forward(self.params, np.asarray(seq[:-1])[None], self.config.num_heads)[0]
        return log_softmax(logits)[len(prompt) - 1 :]

    def log_probs(self, prompt: Sequence[int], response: Sequence[int]) -> np.ndarray:
        lp = self.next_token_logprobs(prompt, response)
        return lp[np.arange(len(response)), np.asarray(response, dtype=np.int64)] if len(response) else lp[:, 0]

    def backward(
        self, prompt: Sequence[int], response: Sequence[int], per_token_loss_weights: Sequence[float]
    ) -> ParameterSet:
        """Gradient of ``sum_t w_t * (-log p(response_t | prefix))``."""
        w = np.asarray(per_token_loss_weights, dtype=self.params["tok_emb"].dtype)
        if w.shape != (len(response),):
            raise ValueError("weights must match response length")
        if not np.all(np.isfinite(w)):
            raise NumericError("non-finite loss weights")
        if not len(prompt):
            raise ValueError("prompt must be nonempty")
        self._check_len(len(prompt) + len(response))
        if not len(response):
            return zeros_like(self.params)
        seq = list(prompt) + list(response)
        full = np.zeros((1, len(seq) - 1), dtype=w.dtype)
        full[0, len(prompt) - 1 :] = w
        _, grads = batch_weighted_grad(self.params, [seq], full, self.config.num_heads)
        return grads

    def sample(
        self, prompt: Sequence[int], decoding: DecodingConfig, eos_id: int
    ) -> Tuple[List[int], bool]:
        (resp,), (trunc,) = sample_batch(self, [prompt], decoding, eos_id, seeds=[decoding.seed])
        return resp, trunc


# --------------------------------------------------------------------------
# incremental decoding


def _filter_probs(logits: np.ndarray, decoding: DecodingConfig) -> np.ndarray:
    """Temperature, top-k and top-p filtering on a (B, V) block, in float64."""
    z = logits.astype(np.float64) / decoding.temperature
    if decoding.top_k and decoding.top_k < z.shape[-1]:
        kth = np.partition(z, -decoding.top_k, axis=-1)[:, -decoding.top_k][:, None]
        z = np.where(z < kth, -np.inf, z)
    z = z - z.max(-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(-1, keepdims=True)
    if decoding.top_p < 1.0:
        order = np.argsort(-p, axis=-1, kind="stable")
        sorted_p = np.take_along_axis(p, order, axis=-1)
        cum = np.cumsum(sorted_p, axis=-1)
        # keep the smallest prefix whose mass reaches top_p
        drop_sorted = (cum - sorted_p) >= decoding.top_p
        drop = np.zeros_like(drop_sorted)
        np.put_along_axis(drop, order, drop_sorted, axis=-1)
        p = np.where(drop, 0.0, p)
        p /= p.sum(-1, keepdims=True)
    return p


def sample_batch(
    policy: Policy,
    prompts: Sequence[Sequence[int]],
    decoding: DecodingConfig,
    eos_id: int,
    seeds: Sequence[int],
) -> Tuple[List[List[int]], List[bool]]:
    """Sample one continuation per prompt with a KV cache.

    Row ``i`` draws its randomness from its own generator seeded with
    ``seeds[i]``, so results do not depend on how rows are batched.
    """
    decoding.validate()
    params, cfg = policy.params, policy.config
    if any(not len(p) for p in prompts):
        raise ValueError("prompt must be nonempty")
    lens = np.array([len(p) for p in prompts])
    max_new = int(min(decoding.max_new_tokens, cfg.context_len - lens.max()))
    if max_new <= 0:
        raise SequenceLengthError("prompt leaves no room for generation")
    bsz = len(prompts)
    rngs = [np.random.default_rng(s) for s in seeds]
    dtype = params["tok_emb"].dtype
    heads, hd = cfg.num_heads, cfg.head_dim
    scale = dtype.type(1.0 / math.sqrt(hd))
    total = int(lens.max()) + max_new
    n_layers = _num_layers(params)

    ids = pad_batch(prompts)
    _, cache = forward(params, ids, heads, keep_cache=True)
    kcache = np.zeros((n_layers, bsz, heads, total, hd), dtype=dtype)
    vcache = np.zeros_like(kcache)
    for layer, c in enumerate(cache[1]):
        kcache[layer, :, :, : ids.shape[1]] = c[3]
        vcache[layer, :, :, : ids.shape[1]] = c[4]
    # logits at each row's last prompt position
    xf = cache[2][np.arange(bsz), lens - 1]
    logits = xf @ params["head.w"]

    responses: List[List[int]] = [[] for _ in range(bsz)]
    done = np.zeros(bsz, dtype=bool)
    pos = lens.copy()
    rows = np.arange(bsz)
    positions = np.arange(total)
    for step in range(max_new):
        if decoding.greedy:
            nxt = logits.argmax(-1)
        else:
            p = _filter_probs(logits, decoding)
            cum = np.cumsum(p, axis=-1)
            u = np.array([rngs[i].random() if not done[i] else 0.0 for i in range(bsz)])
            nxt = np.minimum((cum < (u * cum[:, -1])[:, None]).sum(-1), p.shape[-1] - 1)
        for i in np.flatnonzero(~done):
            tok = int(nxt[i])
            responses[i].append(tok)
            if tok == eos_id:
                done[i] = True
        if done.all() or step == max_new - 1:
            break
        # one incremental step for every row (finished rows are ignored)
        x = params["tok_emb"][nxt] + params["pos_emb"][pos]
        x = x[:, None, :]
        valid = positions[None, :] <= pos[:, None]
        for layer in range(n_layers):
            pf = f"h{layer}."
            h, _ = _layer_norm(x, params[pf + "ln1.g"], params[pf + "ln1.b"])
            qkv = h @ params[pf + "attn.w_qkv"] + params[pf + "attn.b_qkv"]
            q, k, v = (_split_heads(a, heads) for a in np.split(qkv, 3, axis=-1))
            kcache[layer, rows, :, pos] = k[:, :, 0]
            vcache[layer, rows, :, pos] = v[:, :, 0]
            s = (q @ kcache[layer].transpose(0, 1, 3, 2)) * scale
            s = np.where(valid[:, None, None, :], s, -np.inf)
            s = s - s.max(-1, keepdims=True)
            pr = np.exp(s)
            pr /= pr.sum(-1, keepdims=True)
            o = _merge_heads(pr @ vcache[layer])
            x = x + o @ params[pf + "attn.w_o"] + params[pf + "attn.b_o"]
            h2, _ = _layer_norm(x, params[pf + "ln2.g"], params[pf + "ln2.b"])
            a, _ = _gelu(h2 @ params[pf + "mlp.w_in"] + params[pf + "mlp.b_in"])
            x = x + a @ params[pf + "mlp.w_out"] + params[pf + "mlp.b_out"]
        xf, _ = _layer_norm(x[:, 0], params["ln_f.g"], params["ln_f.b"])
        logits = xf @ params["head.w"]
        pos = pos + 1
    truncated = [not (len(r) and r[-1] == eos_id) for r in responses]
    return responses, truncated


WORKERS_ENV = "SFTRL_WORKERS"


def default_workers() -> int:
    """Worker count from the SFTRL_WORKERS environment variable (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be >= 1")
    return n


def sample_many(
    policy: Policy,
    prompts: Sequence[Sequence[int]],
    decoding: DecodingConfig,
    eos_id: int,
    seeds: Sequence[int],
    workers: Optional[int] = None,
    chunk: int = 256,
) -> Tuple[List[List[int]], List[bool]]:
    """``sample_batch`` over fixed-size chunks, optionally on a thread pool.

    Chunk boundaries do not depend on ``workers``, so every worker count
    returns the same rows; ``workers=1`` runs the chunks in order.
    """
    workers = default_workers() if workers is None else workers
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    spans = [(i, min(i + chunk, len(prompts))) for i in range(0, len(prompts), chunk)]

    def run(span):
        a, b = span
        return sample_batch(policy, prompts[a:b], decoding, eos_id, seeds[a:b])

    if workers == 1 or len(spans) < 2:
        parts = [run(s) for s in spans]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, spans))
    responses: List[List[int]] = []
    truncated: List[bool] = []
    for r, t in parts:
        responses.extend(r)
        truncated.extend(t)
    return responses, truncated
