import numpy as np
import pytest

from grank.config import Config
from grank.data import chronological_split, synth_generate


def tiny_config(**overrides) -> Config:
    cfg = Config()
    cfg.update(
        {
            "generator.d": 8,
            "generator.L": 6,
            "generator.N": 1,
            "generator.d_top": 8,
            "generator.behavior_window": 16,
            "ranker.long_len": 12,
            "trainer.batch_size": 8,
            "trainer.epochs": 1,
            "trainer.log_interval": 2,
            "serving.k1": 20,
            "serving.k2": 5,
            **overrides,
        }
    )
    return cfg


@pytest.fixture(scope="session")
def tiny_data():
    ds = synth_generate(seed=3, n_items=60, n_users=40, n_topics=4, seq_len=24)
    return chronological_split(ds)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""

    def record(number: int, name: str, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number} {name}: {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
