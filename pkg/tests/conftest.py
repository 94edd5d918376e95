import numpy as np
import pytest
import torch
from torch import nn

from rapattack import ImageBatch
from rapattack.models import TorchModel, ToyModelSpec, build_net

torch.set_num_threads(1)


def random_cnn(seed=0, dtype=torch.float64, shape=(3, 16, 16), widths=(4, 8, 16), num_classes=5):
    torch.manual_seed(seed)
    spec = ToyModelSpec("small_cnn", widths, num_classes=num_classes, input_shape=shape)
    return TorchModel(build_net(spec).to(dtype), num_classes, shape)


def random_mlp(seed=0, dtype=torch.float64, shape=(3, 16, 16), num_classes=5):
    torch.manual_seed(seed)
    spec = ToyModelSpec("mlp", (32,), num_classes=num_classes, input_shape=shape)
    return TorchModel(build_net(spec).to(dtype), num_classes, shape)


def random_batch(n=6, shape=(3, 16, 16), num_classes=5, seed=0, dtype=torch.float64):
    rng = np.random.default_rng(seed)
    x = torch.from_numpy(rng.uniform(0.1, 0.9, (n, *shape))).to(dtype)
    y = torch.from_numpy(rng.integers(0, num_classes, n))
    t = (y + torch.from_numpy(rng.integers(1, num_classes, n))) % num_classes
    return ImageBatch(x, y, t)


@pytest.fixture
def cnn():
    return random_cnn()


@pytest.fixture
def mlp():
    return random_mlp()


@pytest.fixture
def batch():
    return random_batch()


class Linear(nn.Module):
    """Fixed linear classifier, handy for closed-form checks."""

    def __init__(self, w):
        super().__init__()
        self.w = nn.Parameter(w)

    def forward(self, z):
        return z.flatten(1) @ self.w


# --- acceptance reporting -----------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and short title")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in getattr(report, "criterion_marks", []):
        n, title = mark
        prev = _CRITERIA.get(n, (title, "PASS"))[1]
        _CRITERIA[n] = (title, "PASS" if prev == "PASS" and report.passed else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    report.criterion_marks = [tuple(m.args) for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}")
