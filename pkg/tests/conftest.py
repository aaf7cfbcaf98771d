import numpy as np
import pytest

from m3tn.data import ColumnSpec
from m3tn.models import ModelConfig, ModelKind, build_model

MIXED_FEATURES = (
    ColumnSpec("a", "numeric"),
    ColumnSpec("c", "categorical", cardinality=3),
    ColumnSpec("b", "numeric"),
    ColumnSpec("d", "numeric"),
)


def numeric_features(d):
    return tuple(ColumnSpec(f"x{j}", "numeric") for j in range(d))


def small_model(kind, features=MIXED_FEATURES, K=2, seed=0, **kw):
    cfg = dict(kind=kind, num_treatments=K, features=features, num_experts=2,
               expert_hidden=(5, 4), head_hidden=(3,), l2_lambda=0.01, seed=seed)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg))


def jitter_biases(model, rng, scale=0.1):
    """Move off the zero-bias init so no ReLU sits exactly on its kink."""
    for name, p in model.named_parameters():
        if name.endswith(".bias"):
            p += rng.normal(0.0, scale, p.shape)


def random_batch(rng, features=MIXED_FEATURES, n=8, K=2):
    x = rng.standard_normal((n, len(features)))
    for j, f in enumerate(features):
        if f.is_categorical:
            x[:, j] = rng.integers(0, f.cardinality, n)
    t = np.resize(np.arange(K + 1), n)
    rng.shuffle(t)
    y = rng.standard_normal(n)
    return x, t, y


def finite_difference_errors(model, x, t, y, eps=1e-5, rtol=1e-4, atol=1e-7):
    """Central differences over every scalar parameter; returns list of failures."""
    _, grads = model.loss_and_grad(x, t, y)
    failures = []
    checked = 0
    for name, p in model.named_parameters():
        flat = p.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = model.forward_loss(x, t, y)
            flat[i] = old - eps
            lm = model.forward_loss(x, t, y)
            flat[i] = old
            fd = (lp - lm) / (2 * eps)
            an = grads[name].reshape(-1)[i]
            scale = max(abs(fd), abs(an))
            ok = abs(fd - an) <= atol if scale < atol * 10 else abs(fd - an) <= rtol * scale
            checked += 1
            if not ok:
                failures.append((name, i, fd, an))
    model._tape = None
    return failures, checked


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ALL_KINDS = list(ModelKind)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
