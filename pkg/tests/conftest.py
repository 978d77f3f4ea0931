import numpy as np
import pytest

from bcp_lab import autodiff as ad
from bcp_lab.datakit import DatasetSpec, synth_generate

GRAD_EPS = 1e-5
GRAD_FLOOR = 1e-3


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale acceptance runs")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return

    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    "Max of |a − n| / max(|a|, |n|, 1e-3) over all elements."
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0


def check_gradients(fn, inputs: dict, eps: float = GRAD_EPS) -> float:
    """
    Compare the analytic gradients of the scalar ``fn(**tensors)`` against
    central finite differences. Returns the worst relative error over all
    inputs.
    """
    tensors = {k: ad.Tensor(v, grad_enabled=True) for k, v in inputs.items()}

    with ad.Tape():
        loss = fn(**tensors)
        ad.backward(loss)

    worst = 0.0

    for name, base in inputs.items():
        base = np.asarray(base, dtype=np.float64)
        numeric = np.zeros_like(base)

        for idx in np.ndindex(base.shape):
            values = {}
            for sign in (1, -1):
                moved = base.copy()
                moved[idx] += sign * eps
                args = {k: ad.const(moved if k == name else v) for k, v in inputs.items()}
                values[sign] = fn(**args).item()
            numeric[idx] = (values[1] - values[-1]) / (2 * eps)

        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        worst = max(worst, rel_error(analytic, numeric))

    return worst


@pytest.fixture
def gradcheck():
    return check_gradients


TINY_SPEC = dict(n_labeled=4, n_unlabeled=6, n_val=2, n_test=3, shape=(16, 16), num_classes=3, shift=0.3, seed=5)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    "A small generated dataset, shared by the whole session; treat it as read-only."
    out = tmp_path_factory.mktemp("tiny-data")
    return synth_generate(DatasetSpec(**TINY_SPEC), out)
