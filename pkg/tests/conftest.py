import numpy as np
import pytest

from diffptq import experiment
from diffptq.config import ExperimentConfig

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; printed in the terminal summary."""
    def record(name: str, passed: bool, detail: str = ""):
        _ACCEPTANCE.append((name, bool(passed), detail))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in sorted(_ACCEPTANCE, key=lambda r: int(r[0].split()[0])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {name}  {detail}")


@pytest.fixture(scope="session")
def trained(tmp_path_factory):
    """Default-config model trained once per session: ``(cfg, model, sched, run_dir)``."""
    run = tmp_path_factory.mktemp("trained")
    cfg = ExperimentConfig(out=str(run))
    model, sched = experiment.run_train(cfg)
    return cfg, model, sched, run


@pytest.fixture(scope="session")
def tiny_cfg(tmp_path_factory):
    """Fast config for CLI and round-trip tests."""
    return ExperimentConfig().replace(
        schedule={"T": 10},
        training={"steps": 200, "log_every": 20},
        dataset={"n_train": 1024},
        quant={"conditions": 8, "samples_per_condition": 2, "grid_points": 20},
        eval={"samples": 128},
        probe={"interval": [1, 2], "n_seeds": 2},
        relax={"sweep_taus": [0.0, 0.1, 0.2]},
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
