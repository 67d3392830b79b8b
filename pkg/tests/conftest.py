import numpy as np
import pytest

from tervit import autodiff as ad
from tervit.model import ViTConfig


def numeric_grad(f, arrays, i, eps=1e-3):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[i]``."""
    x = arrays[i]
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        hi = f(*arrays)
        x[idx] = old - eps
        lo = f(*arrays)
        x[idx] = old
        g[idx] = (hi - lo) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


def check_op_grads(op, *arrays, seed=0, tol=1e-3):
    """Compare tape gradients of ``sum(op(*x) * R)`` with finite differences."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = op(*[ad.Tensor(a) for a in arrays]).shape
    R = np.random.default_rng(seed).standard_normal(out_shape)

    def scalar(*xs):
        return float((op(*[ad.Tensor(x) for x in xs]).data * R).sum())

    ts = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.GradTape() as tape:
        loss = ad.tsum(op(*ts) * ad.Tensor(R))
    tape.backward(loss)
    errs = []
    for i, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, i)
        errs.append(rel_err(t.grad, num))
    assert max(errs) < tol, errs
    return errs


@pytest.fixture
def toy_config():
    return ViTConfig(image_size=16, patch_size=8, in_chans=1, embed_dim=16, depth=2,
                     num_heads=2, mlp_ratio=4.0, num_classes=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
