from pathlib import Path

import pytest
import tomli

from nim_hyper.experiments import config_from_dict

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def load_config(name: str, **overrides):
    with open(CONFIGS / f"{name}.toml", "rb") as fh:
        cfg = config_from_dict(tomli.load(fh))
    return cfg.with_(**overrides) if overrides else cfg


@pytest.fixture
def configs_dir():
    return CONFIGS


_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion_line(request):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def emit(number: int, checks: dict, detail: str = ""):
        failed = [k for k, ok in checks.items() if not ok]
        status = "PASS" if not failed else "FAIL (" + ", ".join(failed) + ")"
        line = f"criterion {number:2d}: {status}  {detail}".rstrip()
        lines[number] = line
        print(line)
        return failed

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
