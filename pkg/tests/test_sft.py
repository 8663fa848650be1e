import math

import numpy as np
import pytest

from sftrl.policy import Policy, params_equal
from sftrl.sft import (
    DegenerateTraceError,
    LossKind,
    SftConfig,
    SupervisedTrace,
    TrainingAborted,
    mean_sft_loss,
    sft_batch_loss,
    sft_loss,
    train_sft,
)
from sftrl.task import TraceStyle, generate_queries, oracle_trace

from conftest import fd_check, tiny_config


def traces(n, seed=0, style=TraceStyle.CONCISE, difficulties=(1, 2)):
    return [oracle_trace(q, style) for q in generate_queries(list(difficulties), n, seed)]


def test_trace_invariants():
    with pytest.raises(ValueError):
        SupervisedTrace([1], [2, 3], [LossKind.SFT], [1.0, 1.0])
    with pytest.raises(ValueError):
        SupervisedTrace([1], [2], [LossKind.IGNORE], [1.0])
    with pytest.raises(ValueError):
        SupervisedTrace([1], [2], [LossKind.SFT], [-1.0])


def test_all_ignore_is_degenerate(tiny_policy):
    tr = SupervisedTrace([2, 3], [4, 5], [LossKind.IGNORE] * 2, [0.0, 0.0])
    with pytest.raises(DegenerateTraceError):
        sft_loss(tiny_policy, tr)


def test_one_token_loss_is_negative_log_prob(tiny_policy):
    tr = SupervisedTrace.sft([2, 3, 4], [7])
    loss, _ = sft_loss(tiny_policy, tr)
    lp = tiny_policy.log_probs([2, 3, 4], [7])[0]
    assert loss == pytest.approx(-float(lp), rel=1e-5)


def test_loss_normalizes_over_sft_tokens_only(tiny_policy):
    kinds = [LossKind.SFT, LossKind.RL, LossKind.SFT, LossKind.IGNORE]
    tr = SupervisedTrace([2, 3], [5, 6, 7, 8], kinds, [1.0, 0.5, 2.0, 0.0])
    lp = tiny_policy.log_probs([2, 3], [5, 6, 7, 8]).astype(np.float64)
    expected = -(1.0 * lp[0] + 2.0 * lp[2]) / 2
    assert sft_loss(tiny_policy, tr)[0] == pytest.approx(expected, rel=1e-5)


def test_sft_gradient_matches_finite_differences(tiny_policy64):
    pol = tiny_policy64
    tr = SupervisedTrace([2, 9, 14], [20, 31, 5, 1], [LossKind.SFT] * 3 + [LossKind.IGNORE], [1.0, 0.3, 2.0, 0.0])
    _, grads = sft_loss(pol, tr)
    assert fd_check(pol, lambda: sft_loss(pol, tr)[0], grads) < 1e-4


def test_batch_loss_is_mean_of_trace_losses(tiny_policy):
    batch_traces = traces(3)
    batch, grads, per = sft_batch_loss(tiny_policy, batch_traces)
    singles = [sft_loss(tiny_policy, t) for t in batch_traces]
    np.testing.assert_allclose(per, [s[0] for s in singles], rtol=1e-5)
    assert batch == pytest.approx(np.mean(per))
    for k in grads:
        np.testing.assert_allclose(grads[k], sum(s[1][k] for s in singles) / 3, atol=1e-6)


def test_zero_epochs_returns_input_unchanged(tiny_policy):
    res = train_sft(tiny_policy, traces(4), SftConfig(epochs=0))
    assert params_equal(res.params, tiny_policy.params)
    assert res.checkpoints == [] and res.metrics == []


def test_loss_invariant_to_order_at_zero_learning_rate(tiny_policy):
    data = traces(12)
    a = train_sft(tiny_policy, data, SftConfig(learning_rate=0.0, batch_size=12, seed=1))
    b = train_sft(tiny_policy, data[::-1], SftConfig(learning_rate=0.0, batch_size=12, seed=2))
    assert a.metrics[0]["loss"] == pytest.approx(b.metrics[0]["loss"], rel=1e-6)
    assert params_equal(a.params, tiny_policy.params)


def test_training_reduces_loss_and_is_deterministic():
    pol = Policy(tiny_config(embed_dim=16, context_len=128, seed=0))
    data = traces(200, seed=3, style=TraceStyle.LONG_COT_GOOD)
    cfg = SftConfig(learning_rate=3e-3, batch_size=16, epochs=5, seed=4)
    before = mean_sft_loss(pol, data)
    res = train_sft(pol, data, cfg)
    assert mean_sft_loss(pol.with_params(res.params), data) < before
    assert len(res.checkpoints) == 5
    assert params_equal(res.checkpoints[-1], res.params)
    assert len(res.metrics) == 5 * math.ceil(200 / 16)
    assert all(math.isfinite(m["loss"]) for m in res.metrics)
    again = train_sft(pol, data, cfg)
    assert params_equal(again.params, res.params)


def test_best_checkpoint_and_early_stop(tiny_policy):
    data = traces(8)
    scores = iter([0.1, 0.7, 0.3])
    res = train_sft(tiny_policy, data, SftConfig(epochs=3, batch_size=8), select_fn=lambda p: next(scores))
    assert res.best_index == 1 and res.scores == [0.1, 0.7, 0.3]
    scores = iter([0.1, 0.7, 0.3])
    res = train_sft(tiny_policy, data, SftConfig(epochs=3, batch_size=8, stop_at_score=0.5),
                    select_fn=lambda p: next(scores))
    assert res.stopped_early and len(res.checkpoints) == 2
    with pytest.raises(ValueError):
        train_sft(tiny_policy, data, SftConfig(stop_at_score=0.5))
    with pytest.raises(ValueError):
        train_sft(tiny_policy, [], SftConfig())


def test_non_finite_loss_aborts_with_last_checkpoint(tiny_policy):
    bad = dict(tiny_policy.params)
    bad["head.w"] = np.full_like(bad["head.w"], np.nan)
    with pytest.raises(TrainingAborted) as info:
        train_sft(tiny_policy.with_params(bad), traces(4), SftConfig(batch_size=2))
    assert info.value.checkpoints == []
    assert all(np.array_equal(info.value.params[k], bad[k], equal_nan=True) for k in bad)


def test_lr_schedule():
    cfg = SftConfig(learning_rate=1.0, warmup_steps=4, schedule="cosine")
    assert cfg.lr_at(0, 20) == pytest.approx(0.25)
    assert cfg.lr_at(4, 20) == pytest.approx(1.0)
    assert cfg.lr_at(20, 20) == pytest.approx(0.0, abs=1e-12)
    assert SftConfig(learning_rate=0.5).lr_at(100, 10) == 0.5
    for bad in [dict(learning_rate=2.0), dict(batch_size=0), dict(schedule="step"), dict(warmup_steps=-1)]:
        with pytest.raises(ValueError):
            SftConfig(**bad).validate()
