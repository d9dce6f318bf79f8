import pytest

from tinymr.sim.reduce_model import (
    ReduceModel, best_reducer_count, marginal_gains, reduce_makespan, reduce_stage_model
)


def test_makespan_formula():
    model = ReduceModel(100., 10., 1., reduce_work=8)
    assert reduce_makespan(model, 4, 2, 1) == 281.
    assert reduce_makespan(model, 4, 2, 4) == 224.
    assert reduce_makespan(model, 4, 2) == 281.


def test_map_heavy_job_gains_little_from_reducers():
    model = ReduceModel(avg_map_ms=1000., avg_reduce_ms=10., avg_shuffle_ms=1.)
    curve = reduce_stage_model(model, n_map_tasks=100, slots=12)
    gains = marginal_gains(curve).set_index('reducers').gain
    assert gains.loc[4] == pytest.approx(29. / 9164.)
    assert (gains.loc[4:] < 0.01).all()


def test_reduce_heavy_job_wants_many_reducers():
    model = ReduceModel(avg_map_ms=10., avg_reduce_ms=500., avg_shuffle_ms=20.)
    curve = reduce_stage_model(model, n_map_tasks=100, slots=12)
    assert len(curve) == 64
    assert best_reducer_count(curve) == 32
    assert curve.makespan_ms[0] > 10 * curve.makespan_ms.min()


def test_ties_go_to_fewer_reducers():
    model = ReduceModel(10., 0., 0.)
    assert best_reducer_count(reduce_stage_model(model, 4, 2, 8)) == 1


def test_validation():
    with pytest.raises(ValueError):
        ReduceModel(-1., 1., 1.)
    with pytest.raises(ValueError):
        ReduceModel(1., 1., 1., reduce_work=0)
    with pytest.raises(ValueError):
        reduce_stage_model(ReduceModel(1., 1., 1.), 4, 2, 0)
    with pytest.raises(ValueError):
        reduce_makespan(ReduceModel(1., 1., 1.), 4, 0, 1)
