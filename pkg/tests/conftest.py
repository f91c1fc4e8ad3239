import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from attnvote import tensor as T

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def rel_error(a, b, floor: float = 1e-12) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-5, entries=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place and restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in (range(flat.size) if entries is None else entries):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2 * eps)
    return g


def grad_check(build, tensors, eps: float = 1e-5, seed: int = 0, entries_per_tensor=None, floor=1e-5):
    """Compare backprop and central differences for ``sum(build() * R)``.

    ``tensors`` are leaves with ``requires_grad``; returns the worst relative
    error over them. Must be called under 64-bit precision. Gradients that are
    zero by symmetry (a bias shared across a softmax row) leave only rounding
    noise, hence the absolute floor.
    """
    out = build()
    weights = np.random.default_rng(seed).standard_normal(out.shape)

    def loss_value():
        with T.no_grad():
            return float(np.sum(build().data * weights))

    for t in tensors:
        t.grad = None
    out = build()
    (out * weights).sum().backward()
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for t in tensors:
        entries = None
        if entries_per_tensor is not None and t.size > entries_per_tensor:
            entries = rng.choice(t.size, entries_per_tensor, replace=False)
        num = numeric_grad(loss_value, t.data, eps, entries)
        ana = np.zeros_like(num) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
        if entries is not None:
            num, ana = num.reshape(-1)[entries], ana.reshape(-1)[entries]
        worst = max(worst, rel_error(ana, num, floor))
    return worst


@pytest.fixture
def f64():
    with T.precision(np.float64):
        yield


def jitter_batchnorm(module, seed: int = 0, scale: float = 0.1):
    """Move BN affine parameters and running stats off their init values.

    At init every beta is 0, so a point sitting exactly on its group center
    hits ReLU exactly at its kink; finite differences are meaningless there.
    """
    rng = np.random.default_rng(seed)
    for name, p in module.named_parameters():
        if "norms" in name or name.endswith(("gamma", "beta")):
            p.data[...] = p.data + rng.normal(0, scale, p.shape)
    for name, buf in module.named_buffers():
        if name.endswith("running_mean"):
            buf[...] = rng.normal(0, scale, buf.shape)
        elif name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 2.0, buf.shape)


_ACCEPTANCE = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
