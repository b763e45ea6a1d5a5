import numpy as np
import pytest

from occtrack.harness.synth import SynthConfig, generate_sequence, sample_config
from occtrack.harness.training import TrainingPlan, train_all
from occtrack.trajnet import TrajectoryNetConfig


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def textured_sequence():
    return generate_sequence(SynthConfig(seed=3, length=20, start=(32.0, 32.0), velocity=(1.0, 0.5)))


@pytest.fixture(scope="session")
def occluded_sequence():
    return generate_sequence(sample_config(11, occlusion=True))


@pytest.fixture(scope="session")
def small_models():
    """Quickly trained models: enough to exercise every code path, not to be accurate."""
    plan = TrainingPlan(
        traj_sequences=4,
        assess_sequences=4,
        calib_sequences=2,
        length=24,
        traj_epochs=1,
        assess_epochs=3,
        traj=TrajectoryNetConfig(map_shape=(16, 16)),
    )
    return train_all(plan).models


# --- acceptance summary -------------------------------------------------------------------

ACCEPTANCE_CRITERIA = {
    1: "correlation oracle",
    2: "gradient checks",
    3: "motion accumulation",
    4: "background-motion recovery",
    5: "calibration properties",
    6: "occlusion gain",
    7: "ablation orderings",
    8: "determinism",
}
_verdicts = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_verdicts] = {}


@pytest.fixture
def verdict(request):
    """Record ``(passed, detail)`` for an acceptance criterion; printed in the summary."""

    def record(number: int, passed: bool, detail: str = "") -> bool:
        request.config.stash[_verdicts][number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    got = config.stash.get(_verdicts, {})
    if not got:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in ACCEPTANCE_CRITERIA.items():
        passed, detail = got.get(n, (False, "not run or errored"))
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {n} ({name}): {detail}")
