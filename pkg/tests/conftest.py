import numpy as np
import pytest

# acceptance test name -> printed label, in report order
ACCEPTANCE = {
    "test_gradient_suite": "1 gradient suite",
    "test_metric_oracles": "2 metric oracles",
    "test_exact_retrieval": "3 exact retrieval",
    "test_closed_form_losses": "4 closed-form losses",
    "test_contrastive_gain_all_channels": "5 contrastive gain, all channels",
    "test_channel_matched_ablation": "6 channel-matched ablation",
    "test_diagnostics_direction": "7 diagnostics direction",
    "test_bitwise_reproducibility": "8 bitwise reproducibility",
    "test_checkpoint_round_trip": "9 checkpoint round trip",
}
_outcomes = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if name not in ACCEPTANCE:
        return
    prev = _outcomes.get(name, "PASS")
    if report.failed:
        _outcomes[name] = "FAIL"
    elif report.when == "call":
        _outcomes[name] = prev if report.passed else "SKIP"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name, label in ACCEPTANCE.items():
        if name in _outcomes:
            terminalreporter.write_line(f"{_outcomes[name]}  [{label}]  {name}")
