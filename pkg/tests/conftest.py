import numpy as np
import pytest

from hvar import tensor as T

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arrays, index, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` with respect to ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn(*arrays)
        x[i] = old - h
        down = fn(*arrays)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def relative_error(a, b) -> float:
    """``||a - b|| / max(||a||, ||b||)`` with a floor for all-zero gradients."""
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(num / den)


def gradcheck(build, arrays, h=1e-5):
    """Largest relative error over inputs between tape gradients and finite differences.

    ``build(*tensors)`` must return a scalar Tensor; a fixed random projection
    of non-scalar outputs is applied by the caller when needed.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*arrs):
        with T.no_grad():
            return build(*[T.Tensor(a) for a in arrs]).item()

    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    build(*tensors).backward()
    worst = 0.0
    for k, t in enumerate(tensors):
        worst = max(worst, relative_error(t.grad, numeric_grad(value, arrays, k, h)))
    return worst
