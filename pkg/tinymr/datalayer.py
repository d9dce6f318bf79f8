"""
The in-memory data layer: data nodes that hold sample payloads, the plan
that says which nodes hold which samples, fetches with failover, prefetching
for a worker's upcoming tasks, and the feedback rule that grows or shrinks
the number of data nodes.

Every sample is held by every data node in the plan; the replication factor
is the number of data nodes. What varies per sample is the order in which
replicas are tried, a seeded rotation that spreads first requests across
nodes.
"""
import hashlib
import logging
import math
import threading
import time
from collections import OrderedDict, deque
from concurrent.futures import Future
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

EPSILON_MS = 0.1
DEFAULT_MARGIN = 1
BETA_HIGH = 0.5
BETA_LOW = 0.1
MIN_REPLICATION = 2
COOLDOWN_TASKS = 10
FETCH_WINDOW = 100
DEFAULT_CACHE_BYTES = 256 * 1024 * 1024


class SampleUnavailable(Exception):
    """
    No replica could return a sample. The job can't finish without it, so
    this leads to job-level recovery.
    """
    pass


class CorruptPayload(Exception):
    pass


class FetchTimeout(Exception):
    pass


def rotation_offset(seed, sample_id, n):
    """
    Get a number from 0 to n-1 from the SHA1 hash of a sample id and a seed,
    so that replica order is spread evenly and reproducibly.
    """
    hashobj = hashlib.sha1(('%d:%d' % (seed, sample_id)).encode('ascii'))
    return int.from_bytes(hashobj.digest()[:4], 'big') % n


class DataNode(object):
    """
    One data node's store. Reads can run concurrently; writes are
    serialized.

    If `latency` is given, it's a function of no arguments that returns a
    response time in ms, and `get` reports that time instead of measuring
    wall time. The simulator and the failover tests use this.
    """
    def __init__(self, node_id, latency=None, window=FETCH_WINDOW):
        self.node_id = node_id
        self.store = {}
        self.served_count = 0
        self.recent_fetch_ms = deque(maxlen=window)
        self.latency = latency
        self.alive = True
        self._write_lock = threading.Lock()

    def put(self, sample_id, payload, size_bytes=None):
        if size_bytes is not None and len(payload) != size_bytes:
            raise CorruptPayload(
                "Sample %d: got %d bytes, expected %d" % (sample_id, len(payload), size_bytes)
            )
        with self._write_lock:
            self.store[sample_id] = bytes(payload)

    def load(self, dataset, sample_ids=None):
        "Store the payloads of a dataset's samples."
        if sample_ids is None:
            sample_ids = dataset.sample_ids
        for sample_id in sample_ids:
            sample = dataset.sample(sample_id)
            self.put(sample_id, sample.payload(), sample.size_bytes)

    def get(self, sample_id, deadline_ms=None):
        """
        Return (payload, response_ms). Raises FetchTimeout if the node is
        down or too slow, and KeyError if it doesn't hold the sample.
        """
        if not self.alive:
            raise FetchTimeout("Data node %s is not responding" % self.node_id)
        start = time.perf_counter()
        payload = self.store[sample_id]
        if self.latency is not None:
            response_ms = float(self.latency())
        else:
            response_ms = (time.perf_counter() - start) * 1000.
        if deadline_ms is not None and response_ms > deadline_ms:
            raise FetchTimeout("Data node %s took %.1f ms" % (self.node_id, response_ms))
        with self._write_lock:
            self.served_count += 1
            self.recent_fetch_ms.append(response_ms)
        return payload, response_ms

    def __repr__(self):
        return 'DataNode(%r, %d samples)' % (self.node_id, len(self.store))


def shifted_exponential(shift_ms, mean_extra_ms, rng):
    """
    A latency sampler: a fixed minimum response time, plus an exponential
    delay with the given mean.
    """
    def sample():
        return shift_ms + rng.exponential(mean_extra_ms)
    return sample


@dataclass
class ReplicaPlan:
    replication_factor: int
    data_node_ids: list
    assignment: dict
    sizes: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.replication_factor < 1:
            raise ValueError("replication_factor must be at least 1")
        if self.replication_factor > len(self.data_node_ids):
            raise ValueError("replication_factor exceeds the number of data nodes")
        for sample_id, nodes in self.assignment.items():
            if len(nodes) != self.replication_factor:
                raise ValueError("Sample %d has %d replicas, not %d"
                                 % (sample_id, len(nodes), self.replication_factor))

    def __contains__(self, sample_id):
        return sample_id in self.assignment

    def to_frame(self):
        rows = [
            (sample_id, node_id, rank)
            for sample_id, nodes in sorted(self.assignment.items())
            for rank, node_id in enumerate(nodes)
        ]
        return pd.DataFrame(rows, columns=['sample_id', 'node_id', 'rank'])

    def save_csv(self, filename):
        self.to_frame().to_csv(filename, index=False)

    def with_nodes(self, data_node_ids):
        return _plan_for(self.sizes, list(data_node_ids), self.seed)


def _plan_for(sizes, data_node_ids, seed):
    n = len(data_node_ids)
    assignment = {}
    for sample_id in sizes:
        offset = rotation_offset(seed, sample_id, n)
        assignment[sample_id] = data_node_ids[offset:] + data_node_ids[:offset]
    return ReplicaPlan(n, list(data_node_ids), assignment, dict(sizes), seed)


def build_initial_plan(manifest, data_node_ids, seed=0):
    """
    Replicate every sample in the manifest to every data node.
    """
    if not data_node_ids:
        raise ValueError("Need at least one data node")
    if not manifest:
        raise ValueError("Can't plan an empty manifest")
    sizes = {entry.id: entry.size_bytes for entry in manifest}
    return _plan_for(sizes, list(data_node_ids), seed)


@dataclass
class FetchResult:
    payload: bytes
    fetch_ms: float
    node_id: object
    failovers: int = 0


def fetch(sample_id, plan, nodes, deadline_ms=None):
    """
    Fetch a sample from the first replica in its plan order that answers
    within `deadline_ms`, and check its size against the manifest.

    `nodes` maps data node ids to objects with a `get(sample_id,
    deadline_ms)` method: local `DataNode`s, or clients for remote ones.
    The fetch time includes the time spent waiting on replicas that timed
    out.
    """
    if sample_id not in plan:
        raise KeyError("Sample %r is not in the replica plan" % sample_id)
    waited = 0.
    failovers = 0
    for node_id in plan.assignment[sample_id]:
        node = nodes.get(node_id)
        if node is None:
            failovers += 1
            continue
        try:
            payload, response_ms = node.get(sample_id, deadline_ms)
        except (FetchTimeout, KeyError, OSError) as err:
            logger.warning("Fetching sample %d from %s failed: %s", sample_id, node_id, err)
            waited += deadline_ms or 0.
            failovers += 1
            continue
        expected = plan.sizes.get(sample_id)
        if expected is not None and len(payload) != expected:
            raise CorruptPayload("Sample %d from %s has %d bytes, expected %d"
                                 % (sample_id, node_id, len(payload), expected))
        return FetchResult(payload, waited + response_ms, node_id, failovers)
    raise SampleUnavailable("No replica of sample %d responded" % sample_id)


def compute_prefetch_depth(avg_fetch_ms, avg_exec_ms, margin=DEFAULT_MARGIN):
    """
    How many queued tasks to prefetch data for, so data arrives before the
    task that needs it starts.

    >>> compute_prefetch_depth(2., 1., 1)
    3
    >>> compute_prefetch_depth(0., 1., 0)
    1
    >>> compute_prefetch_depth(10., 1., 1)
    11
    """
    if avg_fetch_ms < 0 or avg_exec_ms < 0:
        raise ValueError("Average times can't be negative")
    return max(1, math.ceil(avg_fetch_ms / max(avg_exec_ms, EPSILON_MS)) + margin)


@dataclass
class PrefetchController:
    depth: int = 1
    avg_fetch_ms: float = 0.
    avg_exec_ms: float = 0.
    margin: int = DEFAULT_MARGIN

    def update(self, avg_fetch_ms, avg_exec_ms):
        self.avg_fetch_ms = avg_fetch_ms
        self.avg_exec_ms = avg_exec_ms
        self.depth = compute_prefetch_depth(avg_fetch_ms, avg_exec_ms, self.margin)
        return self.depth


class SampleCache(object):
    """
    A worker's local cache of sample payloads, evicting the least recently
    used samples once it holds more than `capacity_bytes`.
    """
    def __init__(self, capacity_bytes=DEFAULT_CACHE_BYTES):
        self.capacity_bytes = capacity_bytes
        self.bytes_used = 0
        self._entries = OrderedDict()
        self._lock = threading.Lock()

    def __contains__(self, sample_id):
        with self._lock:
            return sample_id in self._entries

    def __len__(self):
        return len(self._entries)

    def get(self, sample_id):
        with self._lock:
            payload = self._entries.get(sample_id)
            if payload is not None:
                self._entries.move_to_end(sample_id)
            return payload

    def put(self, sample_id, payload):
        """
        Returns True if the sample is in the cache afterward. A payload
        larger than the whole cache is never kept.
        """
        if len(payload) > self.capacity_bytes:
            return False
        with self._lock:
            if sample_id in self._entries:
                self._entries.move_to_end(sample_id)
                return True
            self._entries[sample_id] = payload
            self.bytes_used += len(payload)
            while self.bytes_used > self.capacity_bytes:
                _evicted, old = self._entries.popitem(last=False)
                self.bytes_used -= len(old)
            return True

    def resident_ids(self):
        with self._lock:
            return set(self._entries)


class SampleLoader(object):
    """
    Gets sample payloads through a SampleCache, making sure that only one
    fetch of a sample is in flight at a time. A second thread that wants the
    same sample waits for the first one's payload.
    """
    def __init__(self, cache):
        self.cache = cache
        self.fetch_count = 0
        self._pending = {}
        self._lock = threading.Lock()

    def load(self, sample_id, fetcher):
        """
        Return the payload of `sample_id`, calling `fetcher(sample_id)` (which
        returns a FetchResult) if it's neither cached nor being fetched.
        """
        with self._lock:
            payload = self.cache.get(sample_id)
            if payload is not None:
                return payload
            future = self._pending.get(sample_id)
            owner = future is None
            if owner:
                future = self._pending[sample_id] = Future()
                self.fetch_count += 1
        if not owner:
            return future.result()
        try:
            payload = fetcher(sample_id).payload
            self.cache.put(sample_id, payload)
            future.set_result(payload)
            return payload
        except BaseException as err:
            future.set_exception(err)
            raise
        finally:
            with self._lock:
                del self._pending[sample_id]


def prefetch_for_queue(queued_tasks, k, plan, nodes, cache, deadline_ms=None, loader=None):
    """
    Fetch the samples of the next `k` queued tasks that aren't already in
    the cache. Returns the set of those tasks' sample ids that are now
    resident, which leaves out samples the cache couldn't keep.

    Pass the worker's `loader` so that a prefetch and a running task never
    fetch the same sample twice.
    """
    if loader is None:
        loader = SampleLoader(cache)
    wanted = []
    for task in list(queued_tasks)[:max(0, k)]:
        wanted.extend(task.sample_ids)
    resident = set()
    for sample_id in wanted:
        loader.load(sample_id, lambda sid: fetch(sid, plan, nodes, deadline_ms))
        if sample_id in loader.cache:
            resident.add(sample_id)
    return resident


def p95(values):
    return float(np.percentile(np.asarray(values, dtype='f8'), 95))


def adapt_replication(plan, fetch_stats, exec_stats, slo_budget_ms,
                      spare_node_ids=(), r_min=MIN_REPLICATION,
                      beta_high=BETA_HIGH, beta_low=BETA_LOW):
    """
    Apply one step of the replication rule. If the 95th percentile fetch
    time is over beta_high of the per-task budget, add the first spare data
    node; if it's under beta_low and there are more than r_min data nodes,
    retire the last one. Otherwise return the plan unchanged.
    """
    if len(fetch_stats) == 0 or len(exec_stats) == 0:
        raise ValueError("Need fetch and execution statistics to adapt replication")
    fetch_p95 = p95(fetch_stats)
    factor = plan.replication_factor
    floor = min(r_min, len(plan.data_node_ids))
    logger.debug("fetch p95 %.2f ms, median exec %.2f ms, budget %.2f ms",
                 fetch_p95, float(np.median(exec_stats)), slo_budget_ms)
    if fetch_p95 > beta_high * slo_budget_ms:
        spare = [node_id for node_id in spare_node_ids
                 if node_id not in plan.data_node_ids]
        if not spare:
            logger.warning("Fetch p95 %.1f ms is over budget, but no data node is spare",
                           fetch_p95)
            return plan
        logger.info("Adding data node %s: replication factor %d -> %d",
                    spare[0], factor, factor + 1)
        return plan.with_nodes(plan.data_node_ids + [spare[0]])
    if fetch_p95 < beta_low * slo_budget_ms and factor > floor:
        logger.info("Retiring data node %s: replication factor %d -> %d",
                    plan.data_node_ids[-1], factor, factor - 1)
        return plan.with_nodes(plan.data_node_ids[:-1])
    return plan


class ReplicationController(object):
    """
    Collects fetch and execution times as tasks complete, and applies
    `adapt_replication` at most once per `cooldown` completed tasks.

    If `nodes` is given, a data node being added is filled with a copy of
    the payloads from a data node already in the plan.
    """
    def __init__(self, plan, spare_node_ids=(), nodes=None, cooldown=COOLDOWN_TASKS,
                 r_min=MIN_REPLICATION, beta_high=BETA_HIGH, beta_low=BETA_LOW):
        self.plan = plan
        self.spare_node_ids = list(spare_node_ids)
        self.nodes = nodes
        self.cooldown = cooldown
        self.r_min = r_min
        self.beta_high = beta_high
        self.beta_low = beta_low
        self.fetch_ms = deque(maxlen=FETCH_WINDOW)
        self.exec_ms = deque(maxlen=FETCH_WINDOW)
        self.since_change = 0
        self.history = [plan.replication_factor]

    def observe(self, fetch_ms, exec_ms):
        self.fetch_ms.append(fetch_ms)
        self.exec_ms.append(exec_ms)
        self.since_change += 1

    def maybe_adapt(self, slo_budget_ms):
        """
        Returns the (possibly new) plan. Statistics are cleared after a
        change, so the next decision only sees the new configuration.
        """
        if self.since_change < self.cooldown or not self.fetch_ms:
            return self.plan
        new_plan = adapt_replication(
            self.plan, list(self.fetch_ms), list(self.exec_ms), slo_budget_ms,
            self.spare_node_ids, self.r_min, self.beta_high, self.beta_low
        )
        self.since_change = 0
        if new_plan is not self.plan:
            self._copy_to_new_nodes(new_plan)
            self.plan = new_plan
            self.fetch_ms.clear()
            self.exec_ms.clear()
        self.history.append(self.plan.replication_factor)
        return self.plan

    def _copy_to_new_nodes(self, new_plan):
        if self.nodes is None:
            return
        added = [node_id for node_id in new_plan.data_node_ids
                 if node_id not in self.plan.data_node_ids]
        if not added:
            return
        source = self.nodes[self.plan.data_node_ids[0]]
        for node_id in added:
            target = self.nodes[node_id]
            for sample_id, payload in list(source.store.items()):
                target.put(sample_id, payload)


def interference_ratio(overlapped_exec_ms, isolated_exec_ms):
    """
    How much slower tasks ran while a prefetch overlapped them, compared to
    tasks that ran alone. NaN when either side has no measurements.
    """
    if len(overlapped_exec_ms) == 0 or len(isolated_exec_ms) == 0:
        return math.nan
    isolated = float(np.mean(isolated_exec_ms))
    if isolated <= 0:
        return math.nan
    return float(np.mean(overlapped_exec_ms)) / isolated
