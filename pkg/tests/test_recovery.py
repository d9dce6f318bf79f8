import pytest

from tinymr.runtime.recovery import (
    MINUTES_PER_MONTH, FailureModel, expected_failures, justify_job_level_recovery
)


def test_expected_failures():
    model = FailureModel(4.3 * MINUTES_PER_MONTH, 10., w=1.5, n_nodes=100)
    assert expected_failures(model) == pytest.approx(0.00796, abs=1e-4)
    assert model.fw == expected_failures(model)


def test_no_nodes_no_failures():
    assert expected_failures(FailureModel(1000., 10., n_nodes=0)) == 0.


def test_bad_parameters():
    with pytest.raises(ValueError):
        expected_failures(FailureModel(0., 10.))
    with pytest.raises(ValueError):
        FailureModel(100., -1.)


def test_job_level_recovery_is_justified():
    decision = justify_job_level_recovery(
        FailureModel(4.3 * MINUTES_PER_MONTH, 10., 1.5, 100, cost_tl=0.21)
    )
    assert decision.job_level


def test_frequent_failures_need_task_level_recovery():
    decision = justify_job_level_recovery(FailureModel(100., 60., 1.5, 100))
    assert decision.fw > 1
    assert not decision.job_level


def test_tie_goes_to_job_level():
    decision = justify_job_level_recovery(FailureModel(1., 0.21, w=1., n_nodes=1, cost_tl=0.21))
    assert decision.fw == decision.cost_tl
    assert decision.job_level


def test_free_task_level_recovery_wins():
    decision = justify_job_level_recovery(FailureModel(10 ** 9, 1., n_nodes=1, cost_tl=0.))
    assert not decision.job_level


def test_report():
    decision = justify_job_level_recovery(
        FailureModel(4.3 * MINUTES_PER_MONTH, 10., 1.5, 100)
    )
    lines = decision.report().split('\n')
    assert lines[0] == 'expected failures per execution (fw): 0.0080'
    assert lines[-1] == 'recommended recovery: job-level'
