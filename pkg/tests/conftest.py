import json
from pathlib import Path

import numpy as np
import pytest

from lmmiqa.dataset import Dataset, ImageRecord, encode_png8, write_manifest
from lmmiqa.synthetic import bundled_dir

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN = Path(__file__).parent / "golden"

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")
    config.addinivalue_line("markers", "sweep: runs after every other test")


def pytest_collection_modifyitems(session, config, items):
    # sweeps inspect artifacts written by the rest of the session, so they go last
    items.sort(key=lambda item: item.get_closest_marker("sweep") is not None)


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        # several tests may share a criterion; any failure sticks
        prior = _criteria.get(number, (title, "PASS"))[1]
        status = "PASS" if report.passed and prior == "PASS" else "FAIL"
        _criteria[number] = (title, status)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")


@pytest.fixture(scope="session")
def bundled_manifest() -> Path:
    return bundled_dir() / "manifest.csv"


@pytest.fixture
def pinned_epoch(monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")


def make_png_dataset(root: Path, n_train: int = 6, n_test: int = 3, metadata: bool = True, seed: int = 0) -> Dataset:
    """Small on-disk dataset of 32x32 8-bit noisy slices with evenly spread scores."""
    rng = np.random.default_rng(seed)
    (root / "img").mkdir(parents=True, exist_ok=True)
    records = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        sigma = 0.01 + 0.07 * i / max(n_train + n_test - 1, 1)
        px = np.clip(0.5 + rng.normal(0, sigma, (32, 32)), 0, 1)
        rel = f"img/{split}{i}.png"
        (root / rel).write_bytes(encode_png8(px))
        score = round(4 * i / max(n_train + n_test - 1, 1), 2)
        region = ["abdomen", "liver", "chest"][i % 3] if metadata else None
        noise = round(sigma, 3) if metadata else None
        records.append(ImageRecord(f"{split}{i}", rel, split, score, region, noise))
    ds = Dataset(tuple(records), root)
    write_manifest(ds, root / "manifest.csv")
    return ds


def load_json(name: str):
    return json.loads((FIXTURES / name).read_text(encoding="utf-8"))
