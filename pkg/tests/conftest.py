from __future__ import annotations

import numpy as np
import pytest

from streamvit.backbone import Backbone
from streamvit.config import ModelConfig

# acceptance criterion number -> (title, list of outcomes)
_ACCEPTANCE: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test belongs to")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    _, outcomes = _ACCEPTANCE.setdefault(number, (title, []))
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcomes.append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, outcomes = _ACCEPTANCE[number]
        if not outcomes:
            verdict = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            verdict = "PASS"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIPPED"
        else:
            verdict = "FAIL"
        terminalreporter.write_line(f"criterion {number} {title}: {verdict}")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_config() -> ModelConfig:
    """Smaller than the desk preset so per-op tests stay fast."""
    return ModelConfig(image_size=16, patch_size=8, d_model=16, n_layers=2, n_heads=2, lora_rank=4, max_frames=32, proj_dim=8)


@pytest.fixture(scope="session")
def tiny_config64(tiny_config) -> ModelConfig:
    return tiny_config.replace(dtype="float64")


def randomize(backbone: Backbone, rng: np.random.Generator, scale: float = 0.3) -> Backbone:
    """Give gates and LoRA up-projections non-zero values so every path is live."""
    for blk in backbone.blocks:
        blk.time.gate.data = np.asarray(rng.uniform(0.3, 1.0), dtype=blk.time.gate.dtype)
        for p in (blk.space.qb, blk.space.kb, blk.space.vb):
            p.data = (rng.standard_normal(p.shape) * scale).astype(p.dtype)
        blk.time.wq.data = (rng.standard_normal(blk.time.wq.shape) * scale).astype(blk.time.wq.dtype)
        blk.time.wk.data = (rng.standard_normal(blk.time.wk.shape) * scale).astype(blk.time.wk.dtype)
    return backbone


def random_clip(rng: np.random.Generator, T: int, size: int, dtype=np.float32) -> np.ndarray:
    return rng.random((T, size, size, 3)).astype(dtype)
