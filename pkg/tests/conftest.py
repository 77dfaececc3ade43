import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "cfm", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("cfm")


def numeric_param_grad(net, f, h=1e-6):
    """Central differences of scalar ``f()`` over the flat parameter vector of ``net``."""
    theta = net.flat_params()
    out = np.zeros_like(theta)
    for i in range(len(theta)):
        t = theta.copy()
        t[i] += h
        net.set_flat_params(t)
        fp = f()
        t[i] -= 2 * h
        net.set_flat_params(t)
        fm = f()
        out[i] = (fp - fm) / (2 * h)
    net.set_flat_params(theta)
    return out


def flat(grads):
    return np.concatenate([g.ravel() for g in grads])


def rel_err(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0 else float(np.linalg.norm(a - b) / den)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE: list[str] = []


def record(criterion: str, ok: bool, detail: str = "") -> bool:
    line = f"{'PASS' if ok else 'FAIL'} {criterion}" + (f": {detail}" if detail else "")
    ACCEPTANCE.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].split(".")[0])):
            terminalreporter.write_line(line)
