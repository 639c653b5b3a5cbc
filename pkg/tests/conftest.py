import numpy as np
import pytest

from matk.cli import class_labels
from matk.datakit import SynthSpec, synth_generate
from matk.embedder import EmbedderConfig, TrainHyper, init_model, train


@pytest.fixture(scope="session")
def synth_ds():
    return synth_generate(SynthSpec())


@pytest.fixture(scope="session")
def train_model(synth_ds):
    """Cached trainer: ``train_model(seed, loss="cross_entropy")`` with desk-scale defaults."""
    cache = {}
    labels, ids = class_labels(synth_ds.train)

    def get(seed, loss="cross_entropy"):
        key = (seed, loss)
        if key not in cache:
            shape = synth_ds.train[0].pixels.shape
            cfg = EmbedderConfig(shape, num_classes=len(ids) if loss == "cross_entropy" else 0)
            hyper = TrainHyper(seed=seed, batch_size=32)
            cache[key] = train(init_model(cfg, seed, loss), synth_ds.train, labels, hyper, loss)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def clean_model(train_model):
    return train_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------------

CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.fixture
def detail(request):
    """Attach a one-line measurement summary to the running criterion."""
    marker = request.node.get_closest_marker("criterion")

    def note(text):
        if marker is not None:
            CRITERIA.setdefault(marker.args[0], {})["detail"] = text
    return note


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    entry = CRITERIA.setdefault(marker.args[0], {})
    entry["title"] = marker.args[1]
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        entry["passed"] = entry.get("passed", True) and rep.passed


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        entry = CRITERIA[number]
        status = "PASS" if entry.get("passed") else "FAIL"
        line = f"criterion {number:2d} {status}  {entry.get('title', '')}"
        if entry.get("detail"):
            line += f" | {entry['detail']}"
        terminalreporter.write_line(line)
