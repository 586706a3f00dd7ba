import numpy as np
import pytest

from hypercare.cohort import Cohort, MedicalCode, SyntheticConfig, Visit, generate_synthetic


@pytest.fixture(scope="session")
def small_config():
    return SyntheticConfig(n_visits=300, n_basic=8, n_extra=6, extra_fraction=0.3, seed=3)


@pytest.fixture(scope="session")
def small_cohort(small_config):
    return generate_synthetic(small_config)


def make_cohort(visits, n_basic=2, n_extra=1, num_labels=1):
    codes = [MedicalCode(i, f"b{i}", "basic") for i in range(n_basic)]
    codes += [MedicalCode(n_basic + i, f"e{i}", "extra") for i in range(n_extra)]
    vs = [Visit(i, tuple(sorted(c)), tuple(y), g, s) for i, (c, y, g, s) in enumerate(visits)]
    return Cohort(tuple(codes), tuple(vs), num_labels)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record_criterion(key: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[key] = (ok, detail)
    print(f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.rstrip("abcd")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})")
