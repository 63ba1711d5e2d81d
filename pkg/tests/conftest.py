import numpy as np
import pytest
import torch

from polypnext.data import SynthSpec, scan_dataset, synthesize_dataset
from polypnext.encoder import EncoderConfig
from polypnext.model import ModelConfig


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synthesize_dataset(SynthSpec(n_clips=4, n_frames=7, size=64, eval_clips=2), seed=3, root=root)
    return root


@pytest.fixture(scope="session")
def synth_records(synth_root):
    return scan_dataset(synth_root)


@pytest.fixture
def tiny_config():
    """Toy widths and depths for fast model tests."""
    return ModelConfig(
        frames=3,
        input_size=(32, 32),
        encoder=EncoderConfig(stage_depths=(1, 1, 1), stage_channels=(8, 16, 32)),
    )


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


_ACCEPTANCE = pytest.StashKey[dict]()
_EXPECTED = pytest.StashKey[set]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = {}
    config.stash[_EXPECTED] = set()


@pytest.hookimpl(trylast=True)
def pytest_collection_modifyitems(config, items):
    for item in items:
        if item.module.__name__.endswith("test_acceptance"):
            config.stash[_EXPECTED].add(int(item.name.split("_")[1]))


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: ``criterion(n, title, ok, detail)`` then assert ``ok``."""
    results = request.config.stash[_ACCEPTANCE]

    def record(number: int, title: str, ok: bool, detail: str = ""):
        results[number] = (title, bool(ok), detail)
        assert ok, f"criterion {number} ({title}) failed: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE, {})
    expected = config.stash.get(_EXPECTED, set())
    if not expected:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(expected | set(results)):
        title, ok, detail = results.get(number, ("not recorded", False, "test errored or was deselected"))
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
