import numpy as np
import pytest

from prunediff import tensor as T


def numeric_grad(f, arrays, i, eps=1e-3):
    """Central finite differences of scalar f(*arrays) with respect to arrays[i]."""
    x = arrays[i]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = f(*arrays)
        x[idx] = orig - eps
        lo = f(*arrays)
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


def analytic_grads(build, arrays):
    ts = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    with T.Tape() as tape:
        loss = build(*ts)
    tape.backward(loss)
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, ts)]


def max_rel_error(a, n):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float((np.abs(a - n) / denom).max())


def gradcheck(build, arrays, eps=1e-3):
    """Largest element-wise relative error between tape gradients and central differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*xs):
        with T.no_tape():
            return build(*[T.Tensor(x, dtype=np.float64) for x in xs]).item()

    grads = analytic_grads(build, arrays)
    return max(max_rel_error(g, numeric_grad(value, arrays, i, eps)) for i, g in enumerate(grads))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_CRITERIA: dict[int, list[str]] = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    detail = dict(report.user_properties).get("detail", "")
    _CRITERIA.setdefault(n, []).append(("PASS" if report.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        results = _CRITERIA[n]
        verdict = "PASS" if all(r == "PASS" for r, _ in results) else "FAIL"
        details = "; ".join(d for _, d in results if d)
        terminalreporter.write_line(f"criterion {n}: {verdict}" + (f"  ({details})" if details else ""))
