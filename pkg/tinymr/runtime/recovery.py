"""
Job-level recovery: when any node fails, the whole job is restarted with the
same seed, instead of re-running the failed tasks. This module holds the
arithmetic that decides whether that's a good trade, and the exceptions that
drive restarts.
"""
from dataclasses import dataclass

# 30.44 days
MINUTES_PER_MONTH = 43833.6


class NodeFailure(Exception):
    """
    A worker or the data layer failed during a job. `node_id` names the
    failed worker, or is None when the failure wasn't a worker's.
    """
    def __init__(self, message, node_id=None):
        super().__init__(message)
        self.node_id = node_id


class JobFailed(Exception):
    "A job couldn't be completed within the restart cap."
    pass


@dataclass
class FailureModel:
    """
    `mttf` is the mean time to a node or disk failure, and `slo` is the
    worst-case running time of a job, in the same units. `w` is a safety
    multiplier on the running time, `n_nodes` is the cluster size, and
    `cost_tl` is the slowdown that task-level fault tolerance would add.
    """
    mttf: float
    slo: float
    w: float = 1.5
    n_nodes: int = 1
    cost_tl: float = 0.21

    def __post_init__(self):
        if self.slo < 0 or self.w < 0 or self.n_nodes < 0 or self.cost_tl < 0:
            raise ValueError("Failure model parameters can't be negative")

    @property
    def fw(self):
        return expected_failures(self)


@dataclass
class RecoveryDecision:
    job_level: bool
    fw: float
    cost_tl: float

    def report(self):
        choice = 'job-level' if self.job_level else 'task-level'
        return ('expected failures per execution (fw): %.4f\n'
                'task-level recovery slowdown (cost_tl): %.4f\n'
                'recommended recovery: %s' % (self.fw, self.cost_tl, choice))


def expected_failures(model):
    """
    The expected number of failures during one execution:
    N * w * P(w) / mttf.

    >>> round(expected_failures(FailureModel(4.3 * MINUTES_PER_MONTH, 10., 1.5, 100)), 4)
    0.008
    """
    if model.mttf <= 0:
        raise ValueError("mttf must be positive, got %r" % model.mttf)
    return model.n_nodes * model.w * model.slo / model.mttf


def justify_job_level_recovery(model):
    """
    Restarting whole jobs is the better choice when the expected cost of
    reruns, fw, is no more than the slowdown task-level recovery would cost
    on every run. A tie goes to job-level recovery, the simpler mechanism.
    With cost_tl = 0, task-level recovery is free and always wins.
    """
    fw = expected_failures(model)
    job_level = model.cost_tl > 0 and fw <= model.cost_tl
    return RecoveryDecision(job_level, fw, model.cost_tl)
