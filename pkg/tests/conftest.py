import numpy as np
import pytest

from dai.experiment import calibration_run
from dai.streamgen import GenConfig, NetworkCondition, generate_stream
from dai.traffic_core import Capture, UdpRecord


def make_records(payloads, ts=None, flow=("10.0.0.1", "10.0.0.2", 5000, 6000)):
    ts = ts if ts is not None else range(0, 1000 * len(payloads), 1000)
    return [UdpRecord(t, *flow, p) for t, p in zip(ts, payloads)]


def make_capture(payloads, ts=None, flow=("10.0.0.1", "10.0.0.2", 5000, 6000), epoch_us=0):
    return Capture(tuple(make_records(payloads, ts, flow)), epoch_us)


@pytest.fixture(scope="session")
def calibration():
    """Default-layout calibration set with its ground truth."""
    cal, truths, _ = calibration_run(0, duration_s=30.0)
    return cal, truths


@pytest.fixture(scope="session")
def clean_stream():
    """60 s at the top gear without impairments."""
    return generate_stream(GenConfig(duration_s=60, seed=11, start_gear=3))


@pytest.fixture(scope="session")
def lossy_stream():
    return generate_stream(GenConfig(duration_s=60, seed=12, start_gear=3,
                                     condition=NetworkCondition(loss_rate=0.05)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
