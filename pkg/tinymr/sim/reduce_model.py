"""
A model of how a job's makespan changes with the number of reducers.

The model is calibrated with a job's average map, reduce and shuffle times.
Map tasks run in waves over the available slots; the reduce work is split
over R reducers, and shuffling to R reducers costs one fan-in per reducer:

    makespan(R) = startup + ceil(n_map / slots) * map
                  + R * shuffle + ceil(reduce_work / R) * reduce

The runtime itself always reduces on the master, so this only feeds the
simulator's what-if tables.
"""
import math
from dataclasses import dataclass

import pandas as pd

MAX_REDUCERS = 64


@dataclass
class ReduceModel:
    """
    `reduce_work` is the number of reduce partitions the reduce work divides
    into; each takes `avg_reduce_ms` on one reducer.
    """
    avg_map_ms: float
    avg_reduce_ms: float
    avg_shuffle_ms: float
    reduce_slots: int = 1
    startup_ms: float = 0.
    reduce_work: int = MAX_REDUCERS

    def __post_init__(self):
        if min(self.avg_map_ms, self.avg_reduce_ms, self.avg_shuffle_ms,
               self.startup_ms) < 0:
            raise ValueError("Calibration times can't be negative")
        if self.reduce_slots < 1 or self.reduce_work < 1:
            raise ValueError("Need at least one reducer and one reduce partition")


def reduce_makespan(model, n_map_tasks, slots, reducers=None):
    """
    Predicted makespan for one reducer count (the model's own by default).

    >>> reduce_makespan(ReduceModel(100., 10., 1., reduce_work=8), 4, 2, 1)
    281.0
    >>> reduce_makespan(ReduceModel(100., 10., 1., reduce_work=8), 4, 2, 4)
    224.0
    """
    if reducers is None:
        reducers = model.reduce_slots
    if slots < 1 or reducers < 1:
        raise ValueError("Need at least one map slot and one reducer")
    map_waves = math.ceil(n_map_tasks / slots)
    return (model.startup_ms + map_waves * model.avg_map_ms
            + reducers * model.avg_shuffle_ms
            + math.ceil(model.reduce_work / reducers) * model.avg_reduce_ms)


def reduce_stage_model(model, n_map_tasks, slots, max_reducers=MAX_REDUCERS):
    """
    The predicted makespan for every reducer count from 1 to `max_reducers`,
    as a table with columns `reducers` and `makespan_ms`.
    """
    if max_reducers < 1:
        raise ValueError("max_reducers must be at least 1")
    counts = list(range(1, max_reducers + 1))
    return pd.DataFrame({
        'reducers': counts,
        'makespan_ms': [reduce_makespan(model, n_map_tasks, slots, count)
                        for count in counts],
    })


def best_reducer_count(curve):
    "The reducer count with the smallest makespan; ties go to fewer reducers."
    return int(curve.reducers[curve.makespan_ms.idxmin()])


def marginal_gains(curve):
    """
    The relative makespan improvement from each added reducer: row R holds
    the gain of going from R to R + 1.
    """
    makespans = curve.makespan_ms.to_numpy()
    gains = (makespans[:-1] - makespans[1:]) / makespans[:-1]
    return pd.DataFrame({'reducers': curve.reducers.to_numpy()[:-1], 'gain': gains})
