import pytest

from sgdwalk.data import synth_blobs
from sgdwalk.mlp import MlpSpec

_ACCEPTANCE_LINES = []


@pytest.fixture
def record_acceptance():
    """Collect one pass/fail line per acceptance criterion for the summary."""
    def record(number, name, ok, detail=""):
        status = "PASS" if ok else "FAIL"
        suffix = f"  [{detail}]" if detail else ""
        _ACCEPTANCE_LINES.append(f"{status}  acceptance {number:02d}: {name}{suffix}")
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    del exitstatus, config
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synth_blobs(seed=11, n_per_class=20, num_classes=3, dim=5,
                       separation=3.0)


@pytest.fixture(scope="session")
def tiny_spec():
    return MlpSpec(layer_sizes=(5, 8, 3), init_seed=123)
