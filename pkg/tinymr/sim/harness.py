"""
A discrete-event simulation of a whole tinymr job.

The simulation drives the real scheduler and data layer from a virtual
clock. Task durations come from the cache model: a task runs for its
per-task overhead plus its trace length times its average memory access
time, scaled to milliseconds by `cycle_scale` and divided by the speed of
the node it runs on. Data fetches go through `datalayer.fetch` against data
nodes whose response times are drawn from a shifted exponential.

Everything is seeded, and events at the same instant are handled in the
order they were scheduled, so a given (JobSpec, SimConfig) always produces
the same report, event log included.
"""
import dataclasses
import heapq
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tinymr.cache_model import (
    AmatModel, CacheConfig, amat, level_miss_rates, measure_task_size, task_trace
)
from tinymr.datalayer import (
    DataNode, ReplicationController, build_initial_plan, fetch, interference_ratio,
    shifted_exponential
)
from tinymr.scheduler import EventLog, Scheduler, check_work_conservation
from tinymr.sizing import (
    KneepointReport, candidate_sizes, find_kneepoint, pack_tasks, partition_to_nodes
)
from tinymr.workload import ManifestEntry, make_rng

logger = logging.getLogger(__name__)

# Milliseconds per simulated cycle
CYCLE_SCALE = 1e-6
# Slowdown from per-task monitoring, when it's switched on
MONITOR_TAX = 0.21
# The offline profile traces this many repetitions of each task
PROFILE_TRACE_REPETITIONS = 2
FETCH_STREAM = 31
CONTENTION_STREAM = 32
CONFIGURATIONS = ('bts', 'blt', 'btt')


def default_cache():
    "Two levels of 8 KB and 40 KB, hitting in 1 and 10 cycles."
    return CacheConfig.from_bytes([8 * 1024, 40 * 1024], hit_cycles=[1., 10.])


@dataclass
class SimConfig:
    """
    The simulated platform. Per-task overhead has two parts: `dispatch_ms`
    for getting a task to its worker and `task_overhead_ms` for launching
    it there. `runtime_tax` slows every task by that fraction, on top of
    `monitor_tax` when monitoring is on.
    """
    n_workers: int = 4
    speeds: list = None
    startup_ms: float = 0.
    task_overhead_ms: float = 0.
    dispatch_ms: float = 0.
    runtime_tax: float = 0.
    cache: CacheConfig = field(default_factory=default_cache)
    cycle_scale: float = CYCLE_SCALE
    fetch_shift_ms: float = 0.
    fetch_mean_ms: float = 0.
    n_data_nodes: int = 2
    trace_repetitions: int = None
    profile_repeats: int = 1
    profile_trace_repetitions: int = PROFILE_TRACE_REPETITIONS
    monitoring: bool = False
    monitor_tax: float = MONITOR_TAX
    seed: int = 0
    name: str = 'custom'

    def __post_init__(self):
        if self.n_workers < 1:
            raise ValueError("A simulated cluster needs at least one worker")
        if self.speeds is None:
            self.speeds = [1.] * self.n_workers
        self.speeds = [float(speed) for speed in self.speeds]
        if len(self.speeds) != self.n_workers:
            raise ValueError("Got %d speeds for %d workers"
                             % (len(self.speeds), self.n_workers))
        if any(speed <= 0 for speed in self.speeds):
            raise ValueError("Node speeds must be positive")
        durations = [self.startup_ms, self.task_overhead_ms, self.dispatch_ms,
                     self.runtime_tax, self.fetch_shift_ms, self.fetch_mean_ms,
                     self.monitor_tax]
        if any(value < 0 for value in durations) or self.cycle_scale <= 0:
            raise ValueError("Simulated durations can't be negative")
        if self.n_data_nodes < 1:
            raise ValueError("Need at least one data node")

    @property
    def overhead_ms(self):
        return self.task_overhead_ms + self.dispatch_ms

    def with_workers(self, n_workers, speeds=None):
        "A copy of this config with a different cluster size."
        return dataclasses.replace(self, n_workers=n_workers, speeds=speeds)


@dataclass
class SimReport:
    makespan_ms: float
    throughput_bytes_per_s: float
    utilization: dict
    stalls: int
    cold_fetches: int
    event_log: EventLog = field(repr=False)
    tasks: int = 0
    startup_ms: float = 0.
    unit_work_ms: float = 0.
    offline_ms: float = 0.
    overlapped_tasks: int = 0
    interference: float = float('nan')

    def __post_init__(self):
        for node_id, value in self.utilization.items():
            if not 0. <= value <= 1. + 1e-9:
                raise ValueError("Utilization of node %r is %r" % (node_id, value))

    def to_row(self):
        "A flat summary, one row of a results table."
        utilization = list(self.utilization.values())
        return {
            'tasks': self.tasks,
            'makespan_ms': self.makespan_ms,
            'throughput_bytes_per_s': self.throughput_bytes_per_s,
            'mean_utilization': float(np.mean(utilization)) if utilization else 0.,
            'stalls': self.stalls,
            'cold_fetches': self.cold_fetches,
            'startup_ms': self.startup_ms,
            'offline_ms': self.offline_ms,
        }


class TaskCostModel(object):
    """
    Turns groups of samples into running times. The cache simulation behind
    each group is done once and remembered.
    """
    def __init__(self, dataset, subsample_spec, sim):
        self.dataset = dataset
        self.spec = subsample_spec
        self.sim = sim
        self.model = AmatModel.from_cache_config(sim.cache)
        self._cycles = {}

    def cycles(self, sample_ids, repetitions):
        "Simulated cycles to run `repetitions` repetitions over these samples."
        key = (tuple(sample_ids), repetitions)
        if key not in self._cycles:
            if repetitions == 0:
                self._cycles[key] = 0.
            else:
                traced = repetitions
                if self.sim.trace_repetitions is not None:
                    traced = min(repetitions, self.sim.trace_repetitions)
                samples = [self.dataset.sample(sid) for sid in sample_ids]
                trace = task_trace(samples, self.spec, self.sim.cache.block_bytes, traced)
                rates = level_miss_rates(trace, self.sim.cache)
                per_access = amat(self.model, rates)
                self._cycles[key] = len(trace) * per_access * repetitions / traced
        return self._cycles[key]

    def compute_ms(self, sample_ids, repetitions):
        return self.cycles(sample_ids, repetitions) * self.sim.cycle_scale

    def tax(self, monitoring=False):
        tax = 1. + self.sim.runtime_tax
        if monitoring:
            tax += self.sim.monitor_tax
        return tax

    def duration_ms(self, task, speed=1., monitoring=False):
        compute = self.compute_ms(task.sample_ids, len(task.repetitions))
        return (self.sim.overhead_ms + compute / speed) * self.tax(monitoring)


class Simulation(object):
    """
    One simulated job. Build it, call `run()`, get a SimReport.

    Events are (time, sequence, kind, node_id, task) tuples on a heap. A
    'request' event is a worker asking for its next task; a 'complete' event
    is a worker finishing one.
    """
    def __init__(self, spec, sim, tasks=None, cost_model=None):
        self.spec = spec
        self.sim = sim
        self.now = 0.
        self.events = []
        self.sequence = itertools.count()
        self.log = EventLog()
        if tasks is None:
            tasks = spec.tasks()
        self.tasks = list(tasks)
        self.cost = cost_model or TaskCostModel(spec.dataset, spec.subsample, sim)
        self.monitoring = bool(spec.monitor or sim.monitoring)
        self.node_ids = list(range(sim.n_workers))
        self.scheduler = Scheduler(self.tasks, self.node_ids, spec.schedule,
                                   clock=self._clock, event_log=self.log)
        self._setup_data_layer()
        self.ready_at = {node_id: {} for node_id in self.node_ids}
        self.fetching_until = {node_id: 0. for node_id in self.node_ids}
        self.overlapped_exec_ms = []
        self.isolated_exec_ms = []
        self.task_fetch_ms = {}
        self.busy_ms = {node_id: 0. for node_id in self.node_ids}
        self.unit_work_ms = 0.
        self.stalls = 0
        self.cold_fetches = 0

    def _clock(self):
        return self.now

    def _setup_data_layer(self):
        sim = self.sim
        dataset = self.spec.dataset
        self.data_nodes = {}
        for index in range(sim.n_data_nodes):
            rng = make_rng(sim.seed, FETCH_STREAM, index)
            node = DataNode('data%d' % index,
                            latency=shifted_exponential(sim.fetch_shift_ms,
                                                        sim.fetch_mean_ms, rng))
            # The simulator never reads records, only sizes
            for entry in dataset.manifest:
                node.put(entry.id, bytes(entry.size_bytes), entry.size_bytes)
            self.data_nodes[node.node_id] = node
        self.plan = None
        if len(dataset):
            self.plan = build_initial_plan(dataset.manifest, sorted(self.data_nodes),
                                           sim.seed)

    def push(self, time_ms, kind, node_id, task=None):
        heapq.heappush(self.events, (time_ms, next(self.sequence), kind, node_id, task))

    def prefetch(self, node_id, tasks):
        """
        Start fetching the data of `tasks` onto a node, skipping samples it
        already has or is already fetching. Fetches run concurrently, so a
        task's data is ready at its slowest sample.
        """
        ready = self.ready_at[node_id]
        for task in tasks:
            latencies = []
            for sample_id in task.sample_ids:
                if sample_id in ready:
                    continue
                result = fetch(sample_id, self.plan, self.data_nodes)
                ready[sample_id] = self.now + result.fetch_ms
                self.fetching_until[node_id] = max(self.fetching_until[node_id],
                                                   ready[sample_id])
                latencies.append(result.fetch_ms)
            if task.id not in self.task_fetch_ms:
                self.task_fetch_ms[task.id] = max(latencies, default=0.)

    def dispatch(self, node_id, task):
        """
        Start a dispatched task now if its data is on the node, or when the
        data arrives.
        """
        state = self.scheduler.nodes[node_id]
        self.prefetch(node_id, [task])
        data_ready = max((self.ready_at[node_id][sid] for sid in task.sample_ids),
                         default=self.now)
        if data_ready <= self.now:
            self.start_task(node_id, task)
            return
        # A probe task, or the first task after it, can't have been prefetched
        if state.completed_count <= 1:
            self.cold_fetches += 1
            self.log.record(self.now, 'cold_fetch', node_id, task.id)
        else:
            self.stalls += 1
            self.log.record(self.now, 'stall', node_id, task.id)
        self.push(data_ready, 'start', node_id, task)

    def start_task(self, node_id, task):
        self.log.record(self.now, 'start', node_id, task.id)
        speed = self.sim.speeds[node_id]
        duration = self.cost.duration_ms(task, speed, self.monitoring)
        self.unit_work_ms += self.cost.duration_ms(task, 1., self.monitoring)
        self.busy_ms[node_id] += duration
        upcoming = self.scheduler.upcoming(node_id, self.scheduler.prefetch_depth(node_id))
        self.prefetch(node_id, upcoming)
        # Runs alongside a fetch if any of this node's data is still arriving
        if self.fetching_until[node_id] > self.now:
            self.overlapped_exec_ms.append(duration)
        else:
            self.isolated_exec_ms.append(duration)
        self.push(self.now + duration, 'complete', node_id, (task, duration))

    def run(self):
        total_bytes = sum(task.size_bytes for task in self.tasks)
        self.now = float(self.sim.startup_ms)
        self.scheduler.start()
        for node_id in self.node_ids:
            self.push(self.now, 'request', node_id)

        last = self.now
        while self.events:
            time_ms, _seq, kind, node_id, payload = heapq.heappop(self.events)
            if time_ms < last:
                raise RuntimeError("Event at %.3f ms processed after %.3f ms"
                                   % (time_ms, last))
            self.now = last = time_ms
            if kind == 'request':
                task = self.scheduler.next_task(node_id)
                if task is not None:
                    self.dispatch(node_id, task)
            elif kind == 'start':
                self.start_task(node_id, payload)
            elif kind == 'complete':
                task, duration = payload
                self.scheduler.complete(node_id, task.id, duration,
                                        self.task_fetch_ms.get(task.id, 0.))
                self.push(self.now, 'request', node_id)

        makespan = self.now
        if makespan > 0:
            utilization = {node_id: min(1., busy / makespan)
                           for node_id, busy in self.busy_ms.items()}
            throughput = total_bytes / (makespan / 1000.)
        else:
            utilization = {node_id: 0. for node_id in self.node_ids}
            throughput = 0.
        interference = interference_ratio(self.overlapped_exec_ms, self.isolated_exec_ms)
        logger.info("Simulated %d tasks on %d workers: makespan %.1f ms, %d stalls",
                    len(self.tasks), self.sim.n_workers, makespan, self.stalls)
        logger.info("%d tasks ran during a fetch; prefetch interference %.3f",
                    len(self.overlapped_exec_ms), interference)
        return SimReport(
            makespan_ms=makespan, throughput_bytes_per_s=throughput,
            utilization=utilization, stalls=self.stalls,
            cold_fetches=self.cold_fetches, event_log=self.log,
            tasks=len(self.tasks), startup_ms=float(self.sim.startup_ms),
            unit_work_ms=self.unit_work_ms,
            overlapped_tasks=len(self.overlapped_exec_ms), interference=interference
        )


def profile_offline(spec, sim, noise=0.05, cost_model=None):
    """
    Find the kneepoint for a job the way the master does before launching
    it, and account for what that costs. Sizes are profiled smallest first,
    and profiling stops as soon as the search does.

    Returns (report, offline_ms), where offline_ms is the simulated time
    spent running the profiling tasks on one node.
    """
    dataset = spec.dataset
    cost = cost_model or TaskCostModel(dataset, spec.subsample, sim)
    sizes = candidate_sizes(dataset, sim.n_workers)
    if len(sizes) < 3:
        return KneepointReport.for_dataset(sizes[-1], dataset), 0.
    spent = [0.]

    def measure(size):
        rate, _flagged, tasks = measure_task_size(
            dataset, spec.subsample, size, sim.cache, sim.profile_repeats,
            sim.profile_trace_repetitions
        )
        for samples in tasks:
            spent[0] += cost.compute_ms([sample.id for sample in samples],
                                        sim.profile_trace_repetitions)
        return rate, size

    report = find_kneepoint(measure, sizes, dataset.avg_sample_size, noise)
    logger.info("Offline profiling found a kneepoint of %d bytes in %.1f simulated ms",
                report.kneepoint_bytes, spent[0])
    return report, spent[0]


def simulate_job(spec, sim, tasks=None, cost_model=None):
    """
    Simulate a job. If the JobSpec has no kneepoint report and no tasks are
    given, the offline profile is simulated first, and its cost is reported
    as `offline_ms`.
    """
    offline_ms = 0.
    cost = cost_model or TaskCostModel(spec.dataset, spec.subsample, sim)
    if tasks is None:
        if spec.is_empty():
            tasks = []
        else:
            if spec.report is None:
                report, offline_ms = profile_offline(spec, sim, cost_model=cost)
                spec = dataclasses.replace(spec, report=report)
            tasks = spec.tasks()
    report = Simulation(spec, sim, tasks, cost).run()
    report.offline_ms = offline_ms
    return report


def balanced_lower_bound(report, sim):
    """
    The makespan of a perfectly balanced schedule: startup, plus all the
    work (measured at speed 1) divided over the total speed of the cluster.
    """
    return report.startup_ms + report.unit_work_ms / sum(sim.speeds)


def configuration_tasks(spec, sim, configuration):
    """
    The tasks a job is split into under each of the compared configurations:

    - 'bts': tasks sized at the kneepoint
    - 'blt': one large task per worker, holding that worker's partition
    - 'btt': the tiniest tasks, one sample each
    """
    dataset = spec.dataset
    if configuration == 'bts':
        return spec.tasks()
    elif configuration == 'blt':
        partitions = partition_to_nodes(dataset, sim.n_workers)
        report = KneepointReport.for_dataset(dataset.total_bytes, dataset)
        return pack_tasks(dataset, report, spec.subsample, partitions, spec.repetition_range)
    elif configuration == 'btt':
        report = KneepointReport.for_dataset(max(1, int(dataset.avg_sample_size)), dataset)
        return pack_tasks(dataset, report, spec.subsample,
                          repetition_range=spec.repetition_range)
    raise ValueError("Unknown configuration %r" % configuration)


def compare_configurations(spec, sim, configurations=CONFIGURATIONS):
    """
    Simulate the same job under each configuration, with one seed. The
    `relative_throughput` column is each configuration's throughput over
    the first one's.
    """
    cost = TaskCostModel(spec.dataset, spec.subsample, sim)
    offline_ms = 0.
    if spec.report is None:
        report, offline_ms = profile_offline(spec, sim, cost_model=cost)
        spec = dataclasses.replace(spec, report=report)
    rows = []
    for configuration in configurations:
        tasks = configuration_tasks(spec, sim, configuration)
        report = Simulation(spec, sim, tasks, cost).run()
        row = {'configuration': configuration}
        row.update(report.to_row())
        if configuration == 'bts':
            row['offline_ms'] = offline_ms
        rows.append(row)
    frame = pd.DataFrame(rows)
    frame['relative_throughput'] = (frame.throughput_bytes_per_s
                                    / frame.throughput_bytes_per_s.iloc[0])
    return frame


def sweep_task_size(spec, sim, sizes):
    """
    Simulate the job once per task size, packing tasks as if each size were
    the kneepoint. Returns a table with one row per size.
    """
    sizes = [int(size) for size in sizes]
    if not sizes:
        raise ValueError("Need at least one task size to sweep")
    cost = TaskCostModel(spec.dataset, spec.subsample, sim)
    rows = []
    for size in sizes:
        report = KneepointReport.for_dataset(size, spec.dataset)
        tasks = pack_tasks(spec.dataset, report, spec.subsample,
                           repetition_range=spec.repetition_range)
        result = Simulation(spec, sim, tasks, cost).run()
        row = {'task_size_bytes': size, 'samples_per_task': report.samples_per_task}
        row.update(result.to_row())
        rows.append(row)
    return pd.DataFrame(rows)


def scale_out(spec, sim, worker_counts):
    """
    Simulate the same job on clusters of different sizes, keeping the task
    sizes found for the first one.
    """
    if spec.report is None:
        report, _offline = profile_offline(spec, sim.with_workers(worker_counts[0]))
        spec = dataclasses.replace(spec, report=report)
    tasks = spec.tasks()
    cost = TaskCostModel(spec.dataset, spec.subsample, sim)
    rows = []
    for count in worker_counts:
        result = Simulation(spec, sim.with_workers(count), tasks, cost).run()
        row = {'workers': count}
        row.update(result.to_row())
        rows.append(row)
    return pd.DataFrame(rows)


def monitoring_delta(spec, sim):
    """
    Simulate a job with monitoring off and on. Returns both reports and the
    difference in makespan.
    """
    off = simulate_job(dataclasses.replace(spec, monitor=False),
                       dataclasses.replace(sim, monitoring=False))
    on = simulate_job(dataclasses.replace(spec, monitor=True),
                      dataclasses.replace(sim, monitoring=False))
    return off, on, on.makespan_ms - off.makespan_ms


def work_conserving(report):
    "True if no node went idle while a task was still pending."
    return len(check_work_conservation(report.event_log.to_frame())) == 0


def simulate_contention(sim, windows=100, tasks_per_window=10, slo_budget_ms=10.,
                        load=8., max_data_nodes=8, exec_ms=5.):
    """
    Run the replication controller against data nodes that slow down under
    load: each fetch's exponential delay has mean `fetch_mean_ms * load /
    replication_factor`, so adding replicas spreads the load.

    Returns the replication factor after each window.
    """
    node_ids = ['data%d' % index for index in range(max_data_nodes)]
    initial = node_ids[:min(sim.n_data_nodes, max_data_nodes)]
    sizes = {sample_id: 64 for sample_id in range(tasks_per_window)}
    rng = make_rng(sim.seed, CONTENTION_STREAM)
    holder = {}

    def latency():
        factor = holder['controller'].plan.replication_factor
        return sim.fetch_shift_ms + rng.exponential(sim.fetch_mean_ms * load / factor)

    nodes = {node_id: DataNode(node_id, latency=latency) for node_id in node_ids}
    for node_id in initial:
        for sample_id, size in sizes.items():
            nodes[node_id].put(sample_id, bytes(size), size)
    plan = build_initial_plan(
        [ManifestEntry(sample_id, size, 'contention:%d' % sample_id)
         for sample_id, size in sizes.items()],
        initial, sim.seed
    )
    controller = ReplicationController(plan, node_ids[len(initial):], nodes,
                                       cooldown=tasks_per_window)
    holder['controller'] = controller
    factors = []
    for _window in range(windows):
        for sample_id in sizes:
            result = fetch(sample_id, controller.plan, nodes)
            controller.observe(result.fetch_ms, exec_ms)
        controller.maybe_adapt(slo_budget_ms)
        factors.append(controller.plan.replication_factor)
    return factors


def direction_changes(values):
    """
    How many times a sequence switches between going up and going down.

    >>> direction_changes([2, 3, 4, 4, 5])
    0
    >>> direction_changes([2, 3, 2, 3])
    2
    """
    signs = [np.sign(b - a) for a, b in zip(values, values[1:]) if b != a]
    return sum(1 for s1, s2 in zip(signs, signs[1:]) if s1 != s2)
