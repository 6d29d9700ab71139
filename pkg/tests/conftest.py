import numpy as np
import pytest

from filter_attenuation.nn import Conv2D, Dense, Flatten, MaxPool2D, Model, ReLU

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def record():
    def _record(name, passed, detail=""):
        ACCEPTANCE_RESULTS.append((name, bool(passed), detail))
        print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return _record


def random_model(rng, in_shape=(2, 8, 8), channels=(4, 5), n_classes=3, dtype=np.float64,
                 spread=True):
    """Small conv-relu-pool stack; ``spread`` gives filters very different norms."""
    layers = []
    c, h, w = in_shape
    for out_c in channels:
        wts = rng.normal(size=(out_c, c, 3, 3))
        if spread:
            wts *= rng.uniform(0.05, 2.0, size=(out_c, 1, 1, 1))
        layers += [Conv2D(wts.astype(dtype), rng.normal(0, 0.1, out_c).astype(dtype), 1, 1),
                   ReLU(), MaxPool2D()]
        c, h, w = out_c, h // 2, w // 2
    layers += [Flatten(), Dense(rng.normal(size=(n_classes, c * h * w)).astype(dtype),
                                rng.normal(size=n_classes).astype(dtype))]
    return Model(layers, in_shape)


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. array ``x`` (mutated in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)
