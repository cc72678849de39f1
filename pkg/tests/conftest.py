import sys

import numpy as np
import pytest

from gradmix import tensor_net as tn
from gradmix.config import RunConfig, from_dict


def central_difference(f, theta, eps=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. the flat array ``theta`` (modified in place)."""
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + eps
        fp = f()
        theta[i] = old - eps
        fm = f()
        theta[i] = old
        grad[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def random_net(rng, variant):
    """Small nets that between them exercise every layer kind."""
    if variant % 3 == 0:
        layers = [tn.conv(2, 3, 3, 1, 1), tn.RELU, tn.maxpool(2), tn.conv(3, 2, 3, 2, 1), tn.RELU,
                  tn.FLATTEN, tn.dense(2 * 2 * 2, 5), tn.RELU]
        shape = (8, 8, 2)
    elif variant % 3 == 1:
        layers = [tn.conv(1, 3, 3, 1, 0), tn.RELU, tn.conv(3, 2, 2, 1, 1), tn.maxpool(2), tn.FLATTEN,
                  tn.dense(2 * 2 * 2, 4), tn.RELU, tn.dense(4, 6)]
        shape = (6, 6, 1)
    else:
        layers = [tn.FLATTEN, tn.dense(12, 7), tn.RELU, tn.dense(7, 5), tn.RELU]
        shape = (2, 3, 2)
    params = tn.init_network(layers, {"a": 3, "b": 4}, seed=int(rng.integers(1 << 30)))
    # random biases so ReLU boundaries are not all at the init point
    for t in params.trunk:
        t += 0.05 * rng.standard_normal(t.shape)
    return params, shape


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def toy_cfg(**changes):
    """Synthetic digits, tiny network: a few seconds per run."""
    c = RunConfig().to_dict()
    c.update(steps=60, eval_every=20, batch_size=16, finetune_steps=40)
    c["data"].update(kind="synthetic", synthetic_per_class=150, test_size=100, hyper_val_size=100)
    c["arch"].update(widths=[4, 4, 8, 8], hidden=16)
    for s in c["sources"]:
        s["n_images"] = 300
    for key, value in changes.items():
        if isinstance(value, dict):
            c[key].update(value)
        else:
            c[key] = value
    return from_dict(c)


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
