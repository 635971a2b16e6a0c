import pytest
import torch

from osnadv.data import make_synthetic
from osnadv.target_models import ClassifierSpec, train_reference_cnn


@pytest.fixture(scope="session")
def small_data():
    return make_synthetic(3000, seed=11)


@pytest.fixture(scope="session")
def tiny_target(small_data):
    """A quickly trained reference CNN, good enough to have correctly classified inputs."""
    x, y = small_data
    model, _ = train_reference_cnn(
        x, y, seed=0, spec=ClassifierSpec(width=16), epochs=4, lr=1e-3, min_accuracy=None
    )
    return model


@pytest.fixture(scope="session")
def correct_batch(tiny_target):
    x, y = make_synthetic(64, seed=12)
    ok = tiny_target.classify(x) == y
    assert ok.sum() >= 10, "fixture classifier is too weak"
    return x[ok], y[ok]


class LinearTarget:
    """Two-class affine target ``Z = W x + b`` on flat inputs."""

    def __init__(self, W, b):
        self.W = torch.as_tensor(W, dtype=torch.float64)
        self.b = torch.as_tensor(b, dtype=torch.float64)
        self.num_classes = self.W.shape[0]

    def logits(self, x):
        return x.reshape(len(x), -1).to(self.W.dtype) @ self.W.T + self.b

    __call__ = logits

    @torch.no_grad()
    def classify(self, x):
        return self.logits(x).argmax(dim=1)


@pytest.fixture
def linear_target():
    return LinearTarget


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one ``(criterion, passed, detail)`` line per acceptance criterion."""
    return pytestconfig.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num, passed, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
