import numpy as np
import pytest

from ebrm.config import ABLATION_SCALE, ExperimentConfig
from ebrm.tasks import make_dataset
from ebrm.training import train

FD_STEP = 1e-5
FD_TOL = 1e-4


def numeric_grad(f, x, h=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


_CACHE = {}


def trained(task, **overrides):
    """Ablation-scale checkpoint and dataset, memoized for the whole session."""
    cfg = ExperimentConfig(task=task).replace(**ABLATION_SCALE, **overrides)
    key = cfg.digest()
    if key not in _CACHE:
        ds = make_dataset(task, cfg.seed, cfg.split_sizes, cfg.to_dict())
        ckpt, history = train(task, ds, cfg)
        _CACHE[key] = (ckpt, ds, history)
    return _CACHE[key]


@pytest.fixture(scope="session")
def logic_run():
    return trained("logic")


@pytest.fixture(scope="session")
def graph_run():
    return trained("graph")


@pytest.fixture(scope="session")
def arith_run():
    return trained("arithmetic")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.LINES):
            terminalreporter.write_line(line)
