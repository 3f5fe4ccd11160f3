import pytest
from hypothesis import HealthCheck, settings

from imdsec.protocol import EcosystemConfig, build_ecosystem

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def eco():
    return build_ecosystem(EcosystemConfig(seed=11))


def make_eco(**overrides):
    return build_ecosystem(EcosystemConfig(**overrides))


# Acceptance verdict lines, printed together once the session ends.
ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
