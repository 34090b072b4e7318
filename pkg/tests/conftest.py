import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from redcane import capsnet, data  # noqa: E402


@pytest.fixture(scope="session")
def digits():
    return data.digits_split(seed=0)


@pytest.fixture(scope="session")
def trained_model(digits):
    """The default toy network trained with default settings (seed 0)."""
    train, _ = digits
    return capsnet.train(capsnet.build_network(capsnet.toy_spec(), seed=0), train, capsnet.TrainConfig(seed=0))


@pytest.fixture(scope="session")
def trained_model_path(trained_model, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "toy.json"
    trained_model.save(path)
    return path


@pytest.fixture(scope="session")
def pipeline_result(trained_model, digits):
    from redcane import methodology

    _, test = digits
    return methodology.run_pipeline(trained_model, test, methodology.RunConfig(seed=0))


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion for the summary table."""

    def record(number: int, ok: bool, detail: str) -> bool:
        _ACCEPTANCE[number] = (bool(ok), detail)
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
