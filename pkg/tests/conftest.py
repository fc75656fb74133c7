import numpy as np
import pytest

from aqpcd.data import TileParams, generate_dataset
from aqpcd.model import Detector, ModelConfig
from aqpcd.backbone import BackboneConfig

TINY = ModelConfig(BackboneConfig(stem_channels=4, stage_channels=(8, 8, 16), blocks_per_stage=(1, 2, 1)), head_channels=8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return Detector(TINY, seed=3)


@pytest.fixture(scope="session")
def small_dataset():
    """Twelve 64x64 tiles: 9 train, 3 val."""
    return generate_dataset(12, seed=5, params=TileParams(), val=3)


def random_inputs(rng, n=2, hw=32):
    oi = rng.normal(size=(n, 1, hw, hw)).astype(np.float32)
    dem = rng.normal(size=(n, 1, hw, hw)).astype(np.float32)
    return oi, dem


# ---- acceptance summary --------------------------------------------------------

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("criterion")
    if m is None or (rep.when != "call" and not rep.failed):
        return
    n, title = m.args
    entry = _CRITERIA.setdefault(n, {"title": title, "ok": True, "notes": []})
    entry["ok"] &= rep.passed
    entry["notes"] += [str(v) for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        notes = "; ".join(e["notes"])
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if e['ok'] else 'FAIL'}  {e['title']}" + (f"  [{notes}]" if notes else ""))
