import time
from dataclasses import dataclass

import pytest

from bridgetrace.bridgesim import default_config, generate
from bridgetrace.pipeline import Models, evaluate, train_all

_timings: dict[str, float] = {}


@pytest.fixture(scope="session")
def default_dataset():
    t0 = time.perf_counter()
    ds = generate(default_config())
    _timings["simulate"] = time.perf_counter() - t0
    return ds


@dataclass
class TrainedRun:
    models: Models
    seconds: dict


@pytest.fixture(scope="session")
def default_run(default_dataset):
    """All three stages trained once on the default world, with stage timings."""
    t0 = time.perf_counter()
    models = train_all(default_dataset)
    _timings["train"] = time.perf_counter() - t0
    return TrainedRun(models, _timings)


@pytest.fixture(scope="session")
def default_eval(default_dataset, default_run):
    """Test-split metrics and trace results per direction, computed once."""
    out = {}
    t0 = time.perf_counter()
    for direction in ("forward", "backward", "both"):
        results: list = []
        out[direction] = (evaluate(default_dataset, default_run.models, direction, results_out=results), results)
    _timings["eval"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def saved_default(tmp_path_factory, default_dataset, default_run):
    """Default dataset and trained models written to disk for CLI and service tests."""
    root = tmp_path_factory.mktemp("default")
    default_dataset.save(root / "data")
    default_run.models.save(root / "models")
    return root


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
