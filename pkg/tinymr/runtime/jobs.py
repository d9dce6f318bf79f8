"""
Job descriptions and results, and the single-process reference run that
every distributed run must agree with.
"""
import dataclasses
import logging
import os
import time
from dataclasses import dataclass, field

from tinymr.cache_model import CacheConfig, profile_curve
from tinymr.config import ConfigError
from tinymr.formats.msgpack_stream import MsgpackStreamWriter, read_msgpack_stream
from tinymr.scheduler import EventLog, ScheduleConfig
from tinymr.sizing import (
    KneepointReport, candidate_sizes, find_kneepoint, pack_tasks
)
from tinymr.workload import (
    Dataset, IntermediateResult, SubsampleSpec, generate_heavy_tailed_dataset,
    generate_ratings_dataset, load_dataset, reduce_combine, subsample
)

logger = logging.getLogger(__name__)

DEFAULT_CACHE_BYTES = (256 * 1024,)

JOB_KEYS = {
    'dataset', 'workload', 'n_samples', 'mean_size_bytes', 'sample_bytes',
    'with_outliers', 'fraction', 'repetitions', 'confidence', 'seed',
    'repetition_start', 'repetition_stop', 'workers', 'data_nodes',
    'kneepoint_bytes', 'report', 'cache_kb', 'monitor', 'slo_ms', 'addr',
    'crash_after', 'monitor_interval_ms', 'spare_data_nodes'
}


@dataclass
class JobSpec:
    """
    Everything that determines a job's result. `report` may be None, in
    which case the master profiles the dataset against `cache` and finds
    the kneepoint at launch. `repetition_range` defaults to every
    repetition in `subsample`.

    With `slo_ms` set, the master adapts replication to keep fetches within
    each task's share of the deadline, drawing on `spare_data_nodes`, which
    must already hold the dataset.
    """
    dataset: Dataset
    subsample: SubsampleSpec = field(default_factory=SubsampleSpec)
    report: KneepointReport = None
    n_workers: int = 1
    data_nodes: list = field(default_factory=list)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    slo_ms: float = None
    seed: int = 0
    monitor: bool = False
    monitor_interval_ms: float = 1000.
    repetition_range: tuple = None
    cache: CacheConfig = None
    spare_data_nodes: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("A job needs at least one worker")
        if self.subsample.seed != self.seed:
            self.subsample = dataclasses.replace(self.subsample, seed=self.seed)
        if self.repetition_range is None:
            self.repetition_range = (0, self.subsample.repetitions)
        start, stop = self.repetition_range
        if not 0 <= start <= stop <= self.subsample.repetitions:
            raise ValueError("repetition_range %r is outside 0..%d"
                             % (self.repetition_range, self.subsample.repetitions))
        self.repetition_range = (int(start), int(stop))

    def is_empty(self):
        start, stop = self.repetition_range
        return stop <= start or len(self.dataset) == 0

    def kneepoint_report(self):
        if self.report is None:
            self.report = profile_kneepoint(self.dataset, self.subsample,
                                            self.cache, self.n_workers)
        return self.report

    def tasks(self):
        if self.is_empty():
            return []
        return pack_tasks(self.dataset, self.kneepoint_report(), self.subsample,
                          repetition_range=self.repetition_range)


@dataclass
class JobResult:
    aggregate: float
    per_sample: dict
    wall_ms: float
    startup_ms: float
    event_log: EventLog = field(repr=False, default_factory=EventLog)
    restarts: int = 0
    tasks_dispatched: int = 0
    count: int = 0
    frame_counts: dict = field(default_factory=dict)
    monitor_snapshots: list = field(default_factory=list, repr=False)
    replication_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.restarts < 0:
            raise ValueError("restarts can't be negative")
        if self.wall_ms < self.startup_ms:
            self.wall_ms = self.startup_ms

    def to_dict(self):
        return {
            'aggregate': self.aggregate,
            'per_sample': {str(sid): value for sid, value in sorted(self.per_sample.items())},
            'count': self.count,
            'wall_ms': self.wall_ms,
            'startup_ms': self.startup_ms,
            'restarts': self.restarts,
            'tasks_dispatched': self.tasks_dispatched,
        }


def profile_kneepoint(dataset, spec, cache=None, n_nodes=1, noise=0.05):
    """
    Profile a dataset's miss-rate curve and find its kneepoint.
    """
    if cache is None:
        cache = CacheConfig.from_bytes(DEFAULT_CACHE_BYTES)
    sizes = candidate_sizes(dataset, n_nodes)
    if len(sizes) < 3:
        # Too little data per node to search: each node gets one task
        return KneepointReport.for_dataset(sizes[-1], dataset)
    curve = profile_curve(dataset, spec, sizes, cache)
    return find_kneepoint(curve.measure, curve.sizes, dataset.avg_sample_size, noise)


def map_task(task, samples):
    """
    Run one map task over samples that are already loaded: every repetition
    in the task's range, for every sample in the task.
    """
    results = []
    for repetition in task.repetitions:
        for sample in samples:
            results.append(subsample(sample, task.spec, repetition))
    return results


def results_to_wire(results):
    return [result.to_list() for result in results]


def results_from_wire(rows):
    return [IntermediateResult.from_list(row) for row in rows]


def run_in_process(spec):
    """
    Run a job sequentially in this process. Distributed runs of the same
    spec give exactly this result.
    """
    start = time.monotonic()
    log = EventLog()
    tasks = spec.tasks()
    startup_ms = (time.monotonic() - start) * 1000.
    parts = []
    for task in tasks:
        samples = [spec.dataset.sample(sid) for sid in task.sample_ids]
        parts.extend(map_task(task, samples))
        log.record((time.monotonic() - start) * 1000., 'complete', 0, task.id)
    wall_ms = (time.monotonic() - start) * 1000.
    if not parts:
        return JobResult(None, {}, wall_ms, startup_ms, log, tasks_dispatched=0)
    statistic = reduce_combine(parts)
    return JobResult(statistic.aggregate, statistic.per_sample, wall_ms, startup_ms,
                     log, tasks_dispatched=len(tasks), count=statistic.count)


def monitor_toggle(spec, enabled):
    "A copy of the job spec with monitoring switched on or off."
    return dataclasses.replace(spec, monitor=bool(enabled))


def dataset_from_config(values, base_dir='.'):
    """
    Get the dataset a job config describes: a directory written by
    `save_dataset` under the key `dataset`, or a synthetic `workload` of
    type heavy_tailed, ratings or uniform.
    """
    seed = int(values.get('seed', 0))
    if 'dataset' in values:
        path = os.path.join(base_dir, str(values['dataset']))
        return load_dataset(path)
    workload = values.get('workload', 'heavy_tailed')
    n_samples = int(values.get('n_samples', 64))
    if workload == 'heavy_tailed':
        return generate_heavy_tailed_dataset(
            n_samples, int(values.get('mean_size_bytes', 4096)), seed,
            with_outliers=bool(values.get('with_outliers', True))
        )
    elif workload == 'ratings':
        return generate_ratings_dataset(n_samples, int(values.get('sample_bytes', 4096)), seed)
    elif workload == 'uniform':
        return Dataset.from_sizes([int(values.get('sample_bytes', 4096))] * n_samples, seed)
    raise ConfigError("unknown workload %r" % workload)


def job_spec_from_config(values, base_dir='.'):
    """
    Build a JobSpec from flat config values (a job file merged with
    command-line overrides).
    """
    unknown = sorted(set(values) - JOB_KEYS)
    if unknown:
        raise ConfigError("unknown setting(s): %s" % ', '.join(unknown))
    seed = int(values.get('seed', 0))
    try:
        subsample_spec = SubsampleSpec(
            fraction=float(values.get('fraction', 0.1)),
            repetitions=int(values.get('repetitions', 30)),
            confidence=float(values.get('confidence', 0.98)),
            seed=seed
        )
    except ValueError as err:
        raise ConfigError(str(err))
    dataset = dataset_from_config(values, base_dir)
    report = None
    if 'report' in values:
        report = KneepointReport.load(os.path.join(base_dir, str(values['report'])))
    elif 'kneepoint_bytes' in values:
        report = KneepointReport.for_dataset(int(values['kneepoint_bytes']), dataset)
    cache = None
    if 'cache_kb' in values:
        cache = cache_from_kb(values['cache_kb'])
    data_nodes = addr_list(values.get('data_nodes', ''))
    repetition_range = None
    if 'repetition_start' in values or 'repetition_stop' in values:
        repetition_range = (int(values.get('repetition_start', 0)),
                            int(values.get('repetition_stop', subsample_spec.repetitions)))
    return JobSpec(
        dataset=dataset, subsample=subsample_spec, report=report,
        n_workers=int(values.get('workers', 1)), data_nodes=data_nodes,
        spare_data_nodes=addr_list(values.get('spare_data_nodes', '')),
        slo_ms=values.get('slo_ms'), seed=seed,
        monitor=bool(values.get('monitor', False)),
        monitor_interval_ms=float(values.get('monitor_interval_ms', 1000.)),
        repetition_range=repetition_range, cache=cache
    )


def addr_list(value):
    return [addr.strip() for addr in str(value).split(',') if addr.strip()]


def crash_plan_from_config(value):
    """
    Read the `crash_after` fault-injection setting of a loopback run: a
    comma-separated list of `worker:tasks` pairs.

    >>> crash_plan_from_config('0:1, 2:3')
    {0: 1, 2: 3}
    >>> crash_plan_from_config(None)
    {}
    """
    if value is None:
        return {}
    plan = {}
    for item in str(value).split(','):
        if not item.strip():
            continue
        worker, _sep, tasks = item.partition(':')
        try:
            plan[int(worker)] = int(tasks)
        except ValueError:
            raise ConfigError("crash_after should look like 0:1,2:3, got %r" % value)
    return plan


def cache_from_kb(value):
    """
    A cache hierarchy from level sizes in KB, given as a number or as a
    comma-separated list, smallest level first.

    >>> cache_from_kb('8,40').all_levels()
    [(128, 1.0), (640, 10.0)]
    >>> cache_from_kb(256).capacity_blocks
    4096
    """
    try:
        sizes = [int(item) for item in str(value).split(',') if item.strip()]
    except ValueError:
        raise ConfigError("cache_kb should be a list of sizes in KB, got %r" % value)
    if not sizes:
        raise ConfigError("cache_kb is empty")
    return CacheConfig.from_bytes([size * 1024 for size in sizes])


def dump_per_sample(result, filename):
    """
    Write a job's per-sample statistics as a msgpack stream of
    [sample_id, value] pairs, in order of sample id.
    """
    writer = MsgpackStreamWriter(filename)
    for sample_id, value in sorted(result.per_sample.items()):
        writer.write([sample_id, value])
    writer.close()


def read_per_sample(filename):
    return {int(sample_id): value for sample_id, value in read_msgpack_stream(filename)}
