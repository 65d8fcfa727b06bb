import numpy as np
import pytest

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    props = {k: v for k, v in report.user_properties}
    _ACCEPTANCE[name] = (report.outcome, props)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name in sorted(_ACCEPTANCE):
        outcome, props = _ACCEPTANCE[name]
        status = "PASS" if outcome == "passed" else "FAIL"
        detail = "; ".join(f"{k}: {v}" for k, v in props.items())
        label = name.replace("test_criterion_", "criterion ")
        terminalreporter.write_line(f"{status}  {label}" + (f"  [{detail}]" if detail else ""))


def dense_sphere(n=4000):
    """Deterministic near-uniform full-sphere grid for quadrature oracles."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


@pytest.fixture(scope="session")
def sphere_grid():
    return dense_sphere()


def random_unit(rng, n=1):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)
