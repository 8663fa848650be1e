import numpy as np
import pytest

from sftrl.policy import Policy, PolicyConfig, astype
from sftrl.task import task_policy_config


def tiny_config(**kw):
    kw.setdefault("embed_dim", 8)
    kw.setdefault("num_layers", 1)
    kw.setdefault("num_heads", 2)
    kw.setdefault("context_len", 48)
    return task_policy_config(**kw)


def perturbed(policy, scale, seed):
    """Same architecture, parameters moved by gaussian noise (keeps dtype)."""
    rng = np.random.default_rng(seed)
    params = {k: (v + rng.normal(0, scale, v.shape)).astype(v.dtype) for k, v in policy.params.items()}
    return policy.with_params(params)


def fd_check(policy, loss_fn, grads, h=1e-5, n_entries=None, seed=0):
    """Max relative error between analytic ``grads`` and central differences of ``loss_fn``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in policy.params.items():
        flat = p.reshape(-1)
        idx = range(flat.size) if n_entries is None else rng.choice(flat.size, min(n_entries, flat.size), replace=False)
        g = grads[name].reshape(-1)
        scale = max(np.abs(g).max(), 1e-8)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num = (up - down) / (2 * h)
            # relative to the tensor's gradient scale so that near-zero entries do not blow up
            worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-3 * scale))
    return worst


@pytest.fixture
def tiny_policy():
    return Policy(tiny_config(seed=1))


@pytest.fixture
def tiny_policy64():
    """A float64 policy with non-trivial weights, for finite-difference checks."""
    pol = Policy(tiny_config(seed=2))
    pol = pol.with_params(astype(pol.params, np.float64))
    return perturbed(pol, 0.3, 5)


@pytest.fixture
def three_token_policy():
    cfg = PolicyConfig(vocab_size=3, context_len=16, embed_dim=4, num_layers=1, num_heads=1, seed=4)
    pol = Policy(cfg)
    return perturbed(pol.with_params(astype(pol.params, np.float64)), 0.5, 6)


@pytest.fixture(scope="session")
def partly_trained():
    """A small policy briefly fine-tuned on concise difficulty-1 traces: it solves some queries some of the time."""
    from sftrl.sft import SftConfig, train_sft
    from sftrl.task import TraceStyle, generate_queries, oracle_trace

    pol = Policy(tiny_config(embed_dim=32, num_layers=2, num_heads=4, context_len=40, seed=0))
    traces = [oracle_trace(q, TraceStyle.CONCISE) for q in generate_queries([1], 2000, 0, prefix="t")]
    res = train_sft(pol, traces, SftConfig(learning_rate=3e-3, batch_size=16, epochs=2, seed=0))
    return pol.with_params(res.params)


# one line per acceptance criterion, printed at the end of the session
CRITERIA = {}


def record_criterion(number, passed, detail=""):
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    # numbered criteria first, then named extra checks
    for key in sorted(CRITERIA, key=lambda k: (isinstance(k, str), str(k).rjust(3))):
        passed, detail = CRITERIA[key]
        label = f"criterion {key:2d}" if isinstance(key, int) else f"check {key}"
        terminalreporter.write_line(f"{label}: {'PASS' if passed else 'FAIL'}  {detail}")
