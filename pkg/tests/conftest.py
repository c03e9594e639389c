import numpy as np
import pytest

from tokenmerge.model import VitConfig, VitModel


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (x is perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def tiny_config(**kw) -> VitConfig:
    base = dict(depth=2, dim=16, heads=2, grid=(4, 4), patch=2, channels=1, num_classes=3,
                use_cls=True, dtype="float64")
    base.update(kw)
    return VitConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return VitModel(tiny_config())


def images_for(cfg: VitConfig, n: int, seed: int = 0) -> np.ndarray:
    r = np.random.default_rng(seed)
    h, w = cfg.grid
    return r.uniform(0, 1, size=(n, cfg.channels, h * cfg.patch, w * cfg.patch))


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
