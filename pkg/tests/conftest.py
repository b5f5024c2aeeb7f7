import numpy as np
import pytest

from hierparc.taxonomy import load_taxonomy, parse_taxonomy

ACCEPTANCE_RESULTS: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE_RESULTS, key=lambda k: int(k.split(".")[0])):
        ok, detail = ACCEPTANCE_RESULTS[name]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")


FIVE = "root\n a\n  a1\n  a2\n b"


@pytest.fixture
def five():
    return parse_taxonomy(FIVE)


@pytest.fixture
def flat3():
    return load_taxonomy("flat3")


@pytest.fixture
def binary2():
    return parse_taxonomy("root\n a\n  a1\n  a2\n b\n  b1\n  b2")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class ReferenceRun:
    def __init__(self, model, log, seconds):
        self.model = model
        self.log = log
        self.seconds = seconds


@pytest.fixture(scope="session")
def reference_data():
    from hierparc.trainer import reference_dataset

    return reference_dataset()


def _train_reference(dataset, variant):
    import time

    from hierparc.trainer import reference_config, train

    start = time.perf_counter()
    model, log = train(reference_config(variant), dataset)
    return ReferenceRun(model, log, time.perf_counter() - start)


@pytest.fixture(scope="session")
def reference_h(reference_data):
    return _train_reference(reference_data, "H")


@pytest.fixture(scope="session")
def reference_h_unc(reference_data):
    return _train_reference(reference_data, "H_unc")


@pytest.fixture(scope="session")
def h_unc_validation(reference_data, reference_h_unc):
    """Prediction of the trained H_unc model on the validation volume."""
    from hierparc.trainer import predict, reference_config

    _, val, _ = reference_data.split(reference_config("H_unc"))
    volume, labels = val[0]
    return predict(reference_h_unc.model, volume, "H_unc", reference_data.tree), labels
