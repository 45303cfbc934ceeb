import numpy as np
import pytest

from boneage.backbone import BackboneConfig
from boneage.data import SynthConfig, synth_generate, with_scores
from boneage.pipeline import ModelConfig

FD_STEP = 1e-5


def numerical_gradient(f, x: np.ndarray, h: float = FD_STEP, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place).

    With ``coords`` (flat indices) only those entries are computed; the rest stay 0.
    """
    grad = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for k in (range(x.size) if coords is None else coords):
        orig = flat_x[k]
        flat_x[k] = orig + h
        fp = f()
        flat_x[k] = orig - h
        fm = f()
        flat_x[k] = orig
        flat_g[k] = (fp - fm) / (2 * h)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def tiny_model_config(**kw) -> ModelConfig:
    kw.setdefault("backbone", BackboneConfig(widths=(4, 4, 8, 8), out_channels=8))
    kw.setdefault("head_hidden", (8, 4))
    kw.setdefault("cab_hidden", (8,))
    return ModelConfig(**kw)


@pytest.fixture(scope="session")
def tiny_synth():
    """32 samples of 64x64 synthetic images with scores attached."""
    ds = synth_generate(SynthConfig(count=32, seed=3, image_size=64))
    return with_scores(ds.samples, ds.hidden_scores)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------------

CRITERIA_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
