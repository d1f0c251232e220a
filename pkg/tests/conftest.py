"""Shared fixtures and the acceptance summary printed at the end of a run."""
from __future__ import annotations

import pytest

from shadowlab import workloads
from shadowlab.config import Integrity, Mapping, ShadowConfig, Validation

ACCEPTANCE_LINES = []

ALL_CONFIGS = [ShadowConfig(m, v) for m in Mapping for v in Validation]


def config_id(cfg):
    return cfg.label if cfg is not None else "baseline"


@pytest.fixture(scope="session")
def standard_programs():
    return workloads.standard()


@pytest.fixture(scope="session")
def victim():
    return workloads.workload("rop_victim")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
