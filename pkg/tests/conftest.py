import os
import sys

import numpy as np
import pytest
from hypothesis import settings

from cnftpr.flow import FlowModel

settings.register_profile("default", deadline=None, max_examples=30)
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {number:>2}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, step=1e-5):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += step
        dn[idx] -= step
        g[idx] = (f(up) - f(dn)) / (2 * step)
    return g


def constant_field(c, hidden=(4,)):
    """A model whose velocity is exactly c everywhere."""
    model = FlowModel.init(len(c), hidden, seed=0, zero_last=True)
    last = model.num_layers - 1
    model.params[f"gate_w{last}"][...] = 0.0
    model.params[f"gate_b{last}"][...] = 0.0  # sigmoid(0) = 1/2
    model.params[f"b{last}"][...] = 2.0 * np.asarray(c, dtype=float)
    return model


def linear_field_1d(a):
    """Single concatsquash layer with no activation: v(y) = a y."""
    model = FlowModel.init(1, (), seed=0)
    model.params["gate_w0"][...] = 0.0
    model.params["gate_b0"][...] = 0.0
    model.params["hyper_w0"][...] = 0.0
    model.params["b0"][...] = 0.0
    model.params["W0"][...] = 2.0 * a
    return model
