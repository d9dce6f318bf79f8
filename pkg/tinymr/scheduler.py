"""
The two-step dynamic scheduler.

First, each node is given one randomly chosen probe task. When a node
finishes its probe, the scheduler knows roughly how long its tasks take, and
from then on it hands the node tasks in batches sized to keep a few tasks of
runway in its queue. Nodes pull: a node whose queue runs dry takes the next
task straight from the pending pool, which is how fast nodes absorb the load
that slow ones can't.

The functions here operate on plain state objects; the `Scheduler` class
wraps them in a lock so that many worker connections can share one instance.
"""
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tinymr.datalayer import compute_prefetch_depth
from tinymr.workload import make_rng

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.5
MIN_BATCH = 2
MAX_BATCH = 16
# With no explicit target, keep this many tasks of runway in a node's queue
RUNWAY_TASKS = 4
PROBE_STREAM = 21

EVENT_COLUMNS = ['timestamp_ms', 'event', 'node_id', 'task_id']
# Events that take a task out of the pending pool
POOL_EXITS = ('assign', 'steal')


@dataclass
class NodeState:
    node_id: int
    queue: deque = field(default_factory=deque)
    inflight: int = None
    ewma_exec_ms: float = None
    ewma_fetch_ms: float = None
    completed_count: int = 0
    prefetch_depth: int = 1


@dataclass
class ScheduleConfig:
    """
    Tunables for batching and feedback. If `target_queue_ms` is None, the
    target is RUNWAY_TASKS times the node's own average task time.
    """
    ewma_alpha: float = DEFAULT_ALPHA
    target_queue_ms: float = None
    min_batch: int = MIN_BATCH
    max_batch: int = MAX_BATCH
    probe_seed: int = 0
    slo_ms: float = None
    prefetch_margin: int = 1

    def __post_init__(self):
        if not 0 < self.ewma_alpha <= 1:
            raise ValueError("ewma_alpha must be in (0, 1], got %r" % self.ewma_alpha)
        if not 1 <= self.min_batch <= self.max_batch:
            raise ValueError("Need 1 <= min_batch <= max_batch")

    def target_for(self, node):
        if self.target_queue_ms is not None:
            return self.target_queue_ms
        return RUNWAY_TASKS * node.ewma_exec_ms


class PendingPool(object):
    """
    Tasks that haven't been given to any node yet, handed out in order of
    task id.
    """
    def __init__(self, tasks):
        self.tasks = {task.id: task for task in tasks}
        if len(self.tasks) != len(tasks):
            raise ValueError("Task ids must be unique")
        self._order = deque(sorted(self.tasks))

    def __len__(self):
        return len(self._order)

    def __bool__(self):
        return bool(self._order)

    def task(self, task_id):
        return self.tasks[task_id]

    def pending_ids(self):
        return list(self._order)

    def take(self, n):
        taken = []
        while self._order and len(taken) < n:
            taken.append(self.tasks[self._order.popleft()])
        return taken

    def remove(self, task_ids):
        removing = set(task_ids)
        self._order = deque(tid for tid in self._order if tid not in removing)


def initial_assign(tasks, nodes, seed, pool=None):
    """
    Give each node one probe task, picked by a seeded random permutation.
    If there are fewer tasks than nodes, the nodes at the end get nothing.
    Returns a dict of node_id -> task, and the pool of remaining tasks.
    """
    if not nodes:
        raise ValueError("Can't assign tasks to no nodes")
    if pool is None:
        pool = PendingPool(tasks)
    order = make_rng(seed, PROBE_STREAM).permutation(len(tasks))
    assignments = {}
    for node, index in zip(nodes, order):
        task = tasks[index]
        node.queue.append(task.id)
        assignments[node.node_id] = task
    pool.remove(task.id for task in assignments.values())
    return assignments, pool


def batch_size(node, config):
    """
    >>> batch_size(NodeState(0, ewma_exec_ms=500.), ScheduleConfig(target_queue_ms=2000.))
    4
    >>> batch_size(NodeState(0, ewma_exec_ms=5000.), ScheduleConfig(target_queue_ms=2000.))
    2
    """
    if node.ewma_exec_ms is None:
        raise ValueError("Node %d hasn't finished its probe task" % node.node_id)
    if node.ewma_exec_ms <= 0:
        return config.max_batch
    wanted = math.ceil(config.target_for(node) / node.ewma_exec_ms)
    return min(config.max_batch, max(config.min_batch, wanted))


def feedback_batch(node, pool, config):
    """
    Move a batch of tasks from the pool to the end of the node's queue, and
    return them. The batch never makes the queue longer than max_batch + 1.
    """
    room = config.max_batch + 1 - len(node.queue)
    batch = pool.take(max(0, min(batch_size(node, config), room)))
    node.queue.extend(task.id for task in batch)
    return batch


def next_task(node, pool):
    """
    Give the node its next task: the head of its queue, or if the queue is
    empty, the next task from the pool. Returns (task, stolen), where task
    is None when there is nothing left at all.
    """
    if node.queue:
        task = pool.task(node.queue.popleft())
        stolen = False
    else:
        taken = pool.take(1)
        if not taken:
            node.inflight = None
            return None, False
        task = taken[0]
        stolen = True
    node.inflight = task.id
    return task, stolen


def ewma(old, new, alpha):
    """
    >>> ewma(100., 200., 0.5)
    150.0
    >>> ewma(None, 42., 0.5)
    42.0
    """
    if old is None:
        return float(new)
    return alpha * new + (1 - alpha) * old


def record_completion(node, exec_ms, fetch_ms, config):
    if exec_ms < 0 or (fetch_ms is not None and fetch_ms < 0):
        raise ValueError("Durations can't be negative: exec %r, fetch %r"
                         % (exec_ms, fetch_ms))
    node.ewma_exec_ms = ewma(node.ewma_exec_ms, exec_ms, config.ewma_alpha)
    if fetch_ms is not None:
        node.ewma_fetch_ms = ewma(node.ewma_fetch_ms, fetch_ms, config.ewma_alpha)
    node.prefetch_depth = compute_prefetch_depth(
        node.ewma_fetch_ms or 0., node.ewma_exec_ms, config.prefetch_margin
    )
    node.completed_count += 1
    node.inflight = None
    return node


@dataclass
class ThroughputProfile:
    """
    Measured throughput (bytes per ms) for each cluster configuration, keyed
    by core count, at several job sizes; and each configuration's startup
    time.
    """
    samples: dict
    startup_ms: dict

    def __post_init__(self):
        for cores, points in self.samples.items():
            if not points:
                raise ValueError("No measurements for %d cores" % cores)
            if any(throughput < 0 for _size, throughput in points):
                raise ValueError("Throughput can't be negative")
            if self.startup_ms.get(cores, 0) < 0:
                raise ValueError("Startup time can't be negative")

    @property
    def core_counts(self):
        return sorted(self.samples)

    def throughput(self, cores, job_size_bytes):
        "Interpolate throughput at this job size, flat beyond the ends."
        points = sorted(self.samples[cores])
        sizes = [size for size, _t in points]
        rates = [rate for _s, rate in points]
        return float(np.interp(job_size_bytes, sizes, rates))

    def running_time_ms(self, cores, job_size_bytes):
        throughput = self.throughput(cores, job_size_bytes)
        if throughput <= 0:
            return math.inf
        return self.startup_ms.get(cores, 0.) + job_size_bytes / throughput

    @classmethod
    def from_frame(cls, frame):
        """
        Build a profile from a table with columns cores, job_size_bytes,
        throughput and startup_ms.
        """
        samples = {}
        startup = {}
        for row in frame.itertuples(index=False):
            cores = int(row.cores)
            samples.setdefault(cores, []).append((row.job_size_bytes, row.throughput))
            startup[cores] = float(row.startup_ms)
        return cls(samples, startup)


def select_cluster_size_for_slo(profile, job_size_bytes, slo_ms):
    """
    Pick the configuration with the highest throughput among those that
    finish within `slo_ms`. If none can, pick the fastest-finishing one.
    """
    if not profile.samples:
        raise ValueError("The throughput profile is empty")
    qualifying = [
        cores for cores in profile.core_counts
        if profile.running_time_ms(cores, job_size_bytes) <= slo_ms
    ]
    if qualifying:
        return max(qualifying, key=lambda cores: profile.throughput(cores, job_size_bytes))
    return min(profile.core_counts,
               key=lambda cores: profile.running_time_ms(cores, job_size_bytes))


class EventLog(object):
    """
    A thread-safe log of scheduling events. Each row is
    (timestamp_ms, event, node_id, task_id); node_id and task_id are -1
    where they don't apply.
    """
    def __init__(self):
        self.rows = []
        self._lock = threading.Lock()

    def record(self, timestamp_ms, event, node_id=-1, task_id=-1):
        with self._lock:
            self.rows.append((float(timestamp_ms), event,
                              -1 if node_id is None else int(node_id),
                              -1 if task_id is None else int(task_id)))

    def __len__(self):
        return len(self.rows)

    def to_frame(self):
        with self._lock:
            return pd.DataFrame(list(self.rows), columns=EVENT_COLUMNS)

    def save_csv(self, filename):
        self.to_frame().to_csv(filename, index=False)

    def count(self, event):
        with self._lock:
            return sum(1 for row in self.rows if row[1] == event)

    def dispatch_order(self):
        with self._lock:
            return [(row[2], row[3]) for row in self.rows if row[1] == 'dispatch']


def _idle_gaps(events, job_start, job_end):
    "A node's (from, until) idle intervals, given its dispatch and complete rows."
    gaps = []
    idle_from = job_start
    for row in events.itertuples(index=False):
        if row.event == 'dispatch':
            if idle_from is not None:
                gaps.append((idle_from, row.timestamp_ms))
            idle_from = None
        else:
            idle_from = row.timestamp_ms
    if idle_from is not None:
        gaps.append((idle_from, job_end))
    return gaps


def check_work_conservation(frame, tolerance_ms=0.):
    """
    Find the times a node sat idle while there was work it could have
    taken: a task in its own queue, or a task still in the pending pool.

    A node is busy from each 'dispatch' until the next 'complete'. It is
    idle from the first assignment of the job until its first dispatch,
    between a completion and its next dispatch, and after its last
    completion until the log ends. Returns one row per idle gap in which
    work was available for more than `tolerance_ms`; an empty frame means
    the schedule was work-conserving. The log should cover one attempt of
    one job.
    """
    frame = frame.sort_values('timestamp_ms', kind='stable')
    columns = ['node_id', 'idle_from_ms', 'idle_until_ms', 'available_ms']
    assigns = frame[frame.event == 'assign']
    if assigns.empty:
        return pd.DataFrame(columns=columns)
    times = frame.timestamp_ms.to_numpy()
    job_start = assigns.timestamp_ms.min()
    job_end = times.max()
    n_submitted = int((frame.event == 'submit').sum())
    pool_exits = np.sort(frame[frame.event.isin(POOL_EXITS)].timestamp_ms.to_numpy())

    violations = []
    node_rows = frame[frame.event.isin(('assign', 'dispatch', 'complete', 'idle'))]
    for node_id in sorted(set(node_rows.node_id) - {-1}):
        own = frame[frame.node_id == node_id]
        stolen = set(own.task_id[own.event == 'steal'])
        dispatches = own[own.event == 'dispatch']
        queued_in = np.sort(own.timestamp_ms[own.event == 'assign'].to_numpy())
        queued_out = np.sort(
            dispatches.timestamp_ms[~dispatches.task_id.isin(stolen)].to_numpy()
        )

        def pending(at):
            pool = n_submitted - np.searchsorted(pool_exits, at, side='right')
            queue = (np.searchsorted(queued_in, at, side='right')
                     - np.searchsorted(queued_out, at, side='right'))
            return pool + queue

        busy_events = own[own.event.isin(('dispatch', 'complete'))]
        for idle_from, idle_until in _idle_gaps(busy_events, job_start, job_end):
            if idle_until <= idle_from:
                continue
            inside = times[(times > idle_from) & (times < idle_until)]
            points = np.unique(np.append(inside, idle_from))
            ends = np.append(points[1:], idle_until)
            available = float(((ends - points) * (pending(points) > 0)).sum())
            if available > tolerance_ms:
                violations.append((node_id, idle_from, idle_until, available))
    return pd.DataFrame(violations, columns=columns)


def _wall_clock_ms():
    return time.monotonic() * 1000.


class Scheduler(object):
    """
    The scheduler as a shared service. Every method takes the same lock, so
    calls from concurrent worker connections are linearizable.

    `clock` returns the current time in milliseconds; the simulator passes
    its virtual clock.
    """
    def __init__(self, tasks, node_ids, config=None, clock=None, event_log=None):
        self.config = config or ScheduleConfig()
        self.clock = clock or _wall_clock_ms
        self.log = event_log if event_log is not None else EventLog()
        self.pool = PendingPool(tasks)
        self._tasks = list(tasks)
        self.nodes = {node_id: NodeState(node_id) for node_id in node_ids}
        self.lock = threading.RLock()
        self.started = False
        now = self.clock()
        for task in self._tasks:
            self.log.record(now, 'submit', task_id=task.id)

    def task(self, task_id):
        return self.pool.task(task_id)

    def start(self):
        """
        Run the probe step. Returns node_id -> probe task.
        """
        with self.lock:
            if self.started:
                raise RuntimeError("The scheduler has already started")
            self.started = True
            nodes = [self.nodes[node_id] for node_id in sorted(self.nodes)]
            assignments, _pool = initial_assign(
                self._tasks, nodes, self.config.probe_seed, self.pool
            )
            now = self.clock()
            for node_id, task in sorted(assignments.items()):
                self.log.record(now, 'assign', node_id, task.id)
            logger.info("Probe tasks assigned to %d nodes; %d tasks pending",
                        len(assignments), len(self.pool))
            return assignments

    def next_task(self, node_id):
        with self.lock:
            node = self.nodes[node_id]
            task, stolen = next_task(node, self.pool)
            now = self.clock()
            if task is None:
                self.log.record(now, 'idle', node_id)
                return None
            if stolen:
                self.log.record(now, 'steal', node_id, task.id)
            self.log.record(now, 'dispatch', node_id, task.id)
            return task

    def complete(self, node_id, task_id, exec_ms, fetch_ms=None):
        """
        Record a finished task and top up the node's queue. The queue is
        refilled while it holds no more than K tasks (K being the node's
        prefetch depth), so that after its head is dispatched, K tasks are
        left to prefetch. Returns the tasks newly queued for the node.
        """
        with self.lock:
            node = self.nodes[node_id]
            record_completion(node, exec_ms, fetch_ms, self.config)
            now = self.clock()
            self.log.record(now, 'complete', node_id, task_id)
            batch = []
            while len(node.queue) <= node.prefetch_depth and self.pool:
                more = feedback_batch(node, self.pool, self.config)
                if not more:
                    break
                batch.extend(more)
            for task in batch:
                self.log.record(now, 'assign', node_id, task.id)
            return batch

    def upcoming(self, node_id, k):
        "The next `k` tasks in a node's queue, for prefetching."
        with self.lock:
            queue = self.nodes[node_id].queue
            return [self.pool.task(task_id) for task_id in list(queue)[:k]]

    def prefetch_depth(self, node_id):
        with self.lock:
            return self.nodes[node_id].prefetch_depth

    def finished(self):
        with self.lock:
            return not self.pool and all(
                not node.queue and node.inflight is None
                for node in self.nodes.values()
            )
