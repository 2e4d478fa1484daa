import numpy as np
import pytest

from gpdesign.gp import Design, Hyperparameters, TrainingData, fit


def random_training_data(rng, n, d, m=1, tol_range=(1e-2, 3e-1)):
    """Random well-separated design on the unit box with random outputs."""
    while True:
        pts = rng.random((n, d))
        if n < 2 or np.min(np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(n)) > 0.05:
            break
    tols = rng.uniform(*tol_range, size=n)
    design = Design(pts, tols, np.zeros(d), np.ones(d))
    return TrainingData(design, rng.normal(size=(n, m)))


def random_hyper(rng, d):
    return Hyperparameters(rng.uniform(0.5, 2.0), rng.uniform(0.2, 1.0, size=d))


def random_model(rng, n, d, m=1):
    return fit(random_training_data(rng, n, d, m), random_hyper(rng, d))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str):
    ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
