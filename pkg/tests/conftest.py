import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


def central_difference(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` w.r.t. every entry of ``x`` (in place probe)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f())
        flat[i] = orig - eps
        fm = float(f())
        flat[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor_frac: float = 1e-2) -> float:
    """Largest per-entry relative error.

    The denominator is floored at ``floor_frac`` times the largest numeric
    entry: float32 rounding in the probed loss leaves ~1e-4 absolute noise in
    every difference quotient, which would swamp entries that are themselves
    near zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = max(floor_frac * float(np.abs(n).max()), 1e-12)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def report():
    """Record one pass/fail line per acceptance criterion."""

    def _report(criterion: str, passed: bool | None, detail: str = ""):
        status = "NOT RUN" if passed is None else ("PASS" if passed else "FAIL")
        line = f"[{status}] {criterion}" + (f" :: {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
