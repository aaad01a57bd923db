import numpy as np
import pytest
import torch


def fd_check(fn, tensors, probes=20, eps=1e-3, seed=0, floor=1e-6):
    """Compare autograd against central differences at random entries of ``tensors``.

    ``fn`` maps nothing to a scalar and reads the tensors in place. Returns the
    worst relative error over all probes. The denominator is floored at
    ``floor`` because differences of a near-zero derivative are pure rounding.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    fn().backward()
    grads = [t.grad.detach().clone() for t in tensors]
    worst = 0.0
    for _ in range(probes):
        k = int(rng.integers(len(tensors)))
        t, g = tensors[k], grads[k]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        vals = {}
        with torch.no_grad():
            orig = t[idx].item()
            for k in (-2, -1, 1, 2):
                t[idx] = orig + k * eps
                vals[k] = fn().item()
            t[idx] = orig
        # fourth-order central stencil
        num = (vals[-2] - 8 * vals[-1] + 8 * vals[1] - vals[2]) / (12 * eps)
        ana = g[idx].item()
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


@pytest.fixture
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(number, title)(ok, detail)`` asserts ``ok``."""

    def start(number: int, title: str):
        def finish(ok: bool, detail: str):
            line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
            _ACCEPTANCE.append(line)
            print(line)
            assert ok, line

        return finish

    return start


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
