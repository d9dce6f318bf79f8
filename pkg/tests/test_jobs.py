import pytest

from tinymr.config import ConfigError
from tinymr.runtime.jobs import (
    JobResult, JobSpec, cache_from_kb, dataset_from_config, dump_per_sample,
    job_spec_from_config, map_task, monitor_toggle, read_per_sample, run_in_process
)
from tinymr.sizing import KneepointReport, Task
from tinymr.workload import Dataset, SubsampleSpec, reduce_combine, save_dataset, subsample


def small_spec(**kwargs):
    dataset = Dataset.from_sizes([256] * 12, seed=3)
    report = KneepointReport.for_dataset(1024, dataset)
    return JobSpec(dataset, SubsampleSpec(fraction=0.5, repetitions=4), report=report,
                   seed=3, **kwargs)


def test_job_spec_validation():
    dataset = Dataset.from_sizes([256] * 4)
    with pytest.raises(ValueError):
        JobSpec(dataset, n_workers=0)
    with pytest.raises(ValueError):
        JobSpec(dataset, SubsampleSpec(repetitions=30), repetition_range=(3, 40))
    spec = JobSpec(dataset, SubsampleSpec(seed=1), seed=5)
    assert spec.subsample.seed == 5
    assert spec.repetition_range == (0, 30)


def test_empty_repetition_range():
    spec = small_spec(repetition_range=(2, 2))
    assert spec.is_empty()
    assert spec.tasks() == []
    result = run_in_process(spec)
    assert result.aggregate is None
    assert result.per_sample == {}
    assert result.tasks_dispatched == 0


def test_run_in_process_matches_direct_reduce():
    spec = small_spec()
    parts = [subsample(sample, spec.subsample, rep)
             for sample in spec.dataset for rep in range(4)]
    expected = reduce_combine(parts)
    result = run_in_process(spec)
    assert result.aggregate == expected.aggregate
    assert result.per_sample == expected.per_sample
    assert result.tasks_dispatched == 3
    assert result.count == expected.count


def test_map_task():
    dataset = Dataset.from_sizes([256] * 3)
    spec = SubsampleSpec(fraction=0.5, repetitions=6)
    task = Task(0, [0, 1, 2], 768, spec, (2, 5))
    results = map_task(task, [dataset.sample(i) for i in range(3)])
    assert len(results) == 9
    assert sorted(set(r.repetition_index for r in results)) == [2, 3, 4]
    assert all(r.count == 8 for r in results)


def test_monitor_toggle():
    spec = small_spec()
    on = monitor_toggle(spec, True)
    assert on.monitor and not spec.monitor
    assert on.dataset is spec.dataset
    assert not monitor_toggle(on, False).monitor


def test_job_result_wire_form():
    result = JobResult(0.5, {2: 0.25, 1: 0.75}, wall_ms=1., startup_ms=4., restarts=1)
    assert result.wall_ms == 4.
    values = result.to_dict()
    assert list(values['per_sample']) == ['1', '2']
    assert values['restarts'] == 1
    with pytest.raises(ValueError):
        JobResult(0., {}, 1., 0., restarts=-1)


def test_config_with_unknown_key():
    with pytest.raises(ConfigError):
        job_spec_from_config({'workload': 'uniform', 'n_samples': 4, 'colour': 'red'})


def test_config_with_bad_fraction():
    with pytest.raises(ConfigError):
        job_spec_from_config({'workload': 'uniform', 'n_samples': 4, 'fraction': 1.5})


def test_config_builds_a_job():
    spec = job_spec_from_config({
        'workload': 'uniform', 'n_samples': 8, 'sample_bytes': 512,
        'fraction': 0.25, 'repetitions': 10, 'seed': 9, 'workers': 3,
        'kneepoint_bytes': 2048, 'repetition_start': 2, 'cache_kb': '8,40',
        'data_nodes': '10.0.0.1:7071, 10.0.0.2:7071'
    })
    assert len(spec.dataset) == 8
    assert spec.subsample == SubsampleSpec(0.25, 10, 0.98, 9)
    assert spec.report.samples_per_task == 4
    assert spec.repetition_range == (2, 10)
    assert spec.n_workers == 3
    assert spec.data_nodes == ['10.0.0.1:7071', '10.0.0.2:7071']
    assert len(spec.cache.all_levels()) == 2


def test_dataset_from_config(tmp_path):
    dataset = dataset_from_config({'workload': 'uniform', 'n_samples': 5, 'sample_bytes': 100})
    assert [s.size_bytes for s in dataset] == [96] * 5
    with pytest.raises(ConfigError):
        dataset_from_config({'workload': 'zipf'})

    save_dataset(dataset, str(tmp_path / 'data'))
    loaded = dataset_from_config({'dataset': 'data'}, str(tmp_path))
    assert loaded.sample(3).payload() == dataset.sample(3).payload()


def test_cache_from_kb():
    cache = cache_from_kb('8,40')
    assert cache.all_levels() == [(128, 1.0), (640, 10.0)]
    assert cache_from_kb(256).capacity_blocks == 4096
    with pytest.raises(ConfigError):
        cache_from_kb('lots')
    with pytest.raises(ConfigError):
        cache_from_kb('')


def test_dump_per_sample(tmp_path):
    result = run_in_process(small_spec())
    path = str(tmp_path / 'per-sample.msgpack')
    dump_per_sample(result, path)
    assert read_per_sample(path) == result.per_sample
