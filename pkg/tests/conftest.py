import numpy as np
import pytest

from crossdepict.autodiff import ParamSet
from crossdepict.data import Batch, SyntheticConfig, generate_synthetic
from crossdepict.model import FeatureNetSpec, build_model
from crossdepict.trainers import model_loss

_ACCEPTANCE = {}


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_fd(f, params: ParamSet, eps: float) -> ParamSet:
    """Central differences of a scalar ``f(ParamSet) -> float`` over every coordinate."""
    flat = params.flatten()
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += eps
        dn[i] -= eps
        out[i] = (f(params.unflatten(up)) - f(params.unflatten(dn))) / (2 * eps)
    return params.unflatten(out)


def tanh_model(widths=(8, 16), n_classes=4, seed=0):
    return build_model(FeatureNetSpec(widths, "tanh", seed), n_classes, "trainable")


def random_batch(rng, n, dim, n_classes):
    return Batch(rng.normal(size=(n, dim)), rng.integers(0, n_classes, size=n),
                 np.zeros(n, dtype=int))


@pytest.fixture
def toy_net():
    """8 -> 16 tanh -> 4 classifier, 32 random inputs, and its loss function."""
    rng = np.random.default_rng(7)
    model = tanh_model()
    batch = random_batch(rng, 32, 8, 4)
    return model, batch, model_loss(model)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic(SyntheticConfig(per_class=30, seed=3))


@pytest.fixture
def record_acceptance(request):
    """Call with (number, passed, detail); a summary line per criterion is printed at the end."""
    def record(number, passed, detail=""):
        _ACCEPTANCE[number] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
