"""
A worker: registers with the master, runs the map tasks it's given, and
streams their intermediate results back.

The worker's threads:

- the reader takes frames from the master and keeps the local task queue
- the executor runs tasks from the head of the queue
- a prefetch pool fetches data for the next few queued tasks, so that
  tasks rarely wait for data
- the sender sends results, so that a slow network never holds up the
  executor
- a heartbeat thread (and, with monitoring on, a monitor thread) reports in
  at a fixed rate
"""
import logging
import queue
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from tinymr import config
from tinymr.datalayer import (
    DEFAULT_CACHE_BYTES, CorruptPayload, PrefetchController, SampleCache, SampleLoader,
    SampleUnavailable, build_initial_plan, fetch, interference_ratio, prefetch_for_queue
)
from tinymr.runtime.datanode import RemoteDataNode
from tinymr.runtime.jobs import map_task, results_to_wire
from tinymr.runtime.transport import (
    ABORT, DONE, HEARTBEAT, KNEEPOINT, MONITOR, REGISTER, REPLICAS, RESULT, TASK,
    FrameError, connect
)
from tinymr.scheduler import ewma
from tinymr.sizing import Task
from tinymr.workload import ManifestEntry, Sample

logger = logging.getLogger(__name__)

FETCH_DEADLINE_MS = 2000.


class Worker(object):
    """
    `crash_after`, if set, makes the worker drop its connection without
    warning once it has finished that many tasks. Tests use it to kill a
    worker in the middle of a job.
    """
    def __init__(self, master_addr, name=None, crash_after=None,
                 cache_bytes=DEFAULT_CACHE_BYTES, retries=None):
        self.master_addr = master_addr
        self.name = name
        self.crash_after = crash_after
        self.retries = retries
        self.cache = SampleCache(cache_bytes)
        self.loader = SampleLoader(self.cache)
        self.prefetch = PrefetchController()
        self.queue = deque()
        self.ready = threading.Condition()
        self.stopping = threading.Event()
        self.outbox = queue.Queue()
        self.prefetcher = ThreadPoolExecutor(max_workers=1)
        self.prefetch_future = None
        self.overlapped_exec_ms = []
        self.isolated_exec_ms = []
        self.plan = None
        self.manifest = []
        self.seed = 0
        self.nodes = {}
        self.monitor = False
        self.monitor_interval_ms = 1000.
        self.heartbeat_ms = config.HEARTBEAT_MS
        self.tasks_done = 0
        self.ewma_fetch_ms = None
        self.ewma_exec_ms = None
        self.conn = None

    def run(self):
        """
        Serve the master until it says the job is done or the connection
        ends. Returns the number of tasks this worker completed.
        """
        self.conn = connect(self.master_addr, self.retries)
        self.conn.send(REGISTER, {'name': self.name})
        threads = [
            threading.Thread(target=self._execute_loop, daemon=True),
            threading.Thread(target=self._send_loop, daemon=True),
            threading.Thread(target=self._heartbeat_loop, daemon=True),
        ]
        for thread in threads:
            thread.start()
        try:
            self._read_loop()
        finally:
            self.stop()
        return self.tasks_done

    def _read_loop(self):
        while not self.stopping.is_set():
            try:
                frame = self.conn.receive()
            except (OSError, FrameError) as err:
                if not self.stopping.is_set():
                    logger.warning("Lost the master: %s", err)
                return
            if frame is None:
                return
            frame_type, message = frame
            if frame_type == KNEEPOINT:
                self._configure(message)
            elif frame_type == TASK:
                with self.ready:
                    self.queue.append((message['attempt'], Task.from_dict(message['task'])))
                    self.ready.notify()
            elif frame_type == ABORT:
                with self.ready:
                    self.queue.clear()
                logger.info("Job aborted by the master at attempt %d", message['attempt'])
            elif frame_type == REPLICAS:
                self.use_data_nodes(message['data_nodes'])
            elif frame_type == DONE:
                logger.info("Job done after %d tasks; prefetch interference %.3f",
                            self.tasks_done, self.interference())
                return

    def _configure(self, message):
        self.heartbeat_ms = message.get('heartbeat_ms') or self.heartbeat_ms
        self.monitor = bool(message.get('monitor'))
        self.monitor_interval_ms = message.get('monitor_interval_ms') or 1000.
        self.manifest = [ManifestEntry(*entry) for entry in message['manifest']]
        self.seed = message['seed']
        self.use_data_nodes(message['data_nodes'])
        if self.monitor:
            threading.Thread(target=self._monitor_loop, daemon=True).start()

    def use_data_nodes(self, data_nodes):
        """
        Fetch from these data nodes from now on. Connections to data nodes
        that leave the plan stay open until the worker stops, since a fetch
        may still be using them.
        """
        for addr in data_nodes:
            if addr not in self.nodes:
                self.nodes[addr] = RemoteDataNode(addr)
        if data_nodes and self.manifest:
            self.plan = build_initial_plan(self.manifest, data_nodes, self.seed)
            logger.info("Fetching from %d data nodes", len(data_nodes))

    def interference(self):
        """
        How much slower tasks computed while a prefetch was running than
        while none was. NaN until both kinds of task have run.
        """
        return interference_ratio(self.overlapped_exec_ms, self.isolated_exec_ms)

    def _next(self):
        with self.ready:
            while not self.queue:
                if self.stopping.is_set():
                    return None, None, []
                self.ready.wait(0.1)
            attempt, task = self.queue.popleft()
            upcoming = [queued for _attempt, queued in self.queue]
        return attempt, task, upcoming

    def _execute_loop(self):
        while not self.stopping.is_set():
            if self.crash_after is not None and self.tasks_done >= self.crash_after:
                self._crash()
                return
            attempt, task, upcoming = self._next()
            if task is None:
                return
            if upcoming:
                future = self.prefetcher.submit(
                    prefetch_for_queue, upcoming, self.prefetch.depth, self.plan,
                    self.nodes, self.cache, FETCH_DEADLINE_MS, self.loader
                )
                future.add_done_callback(_log_prefetch_error)
                self.prefetch_future = future
            try:
                results, fetch_ms, exec_ms = self.execute(task)
            except (SampleUnavailable, CorruptPayload) as err:
                logger.error("Task %d failed: %s", task.id, err)
                self.outbox.put((ABORT, {'attempt': attempt, 'reason': str(err)}))
                continue
            self.outbox.put((RESULT, {
                'attempt': attempt, 'task_id': task.id, 'exec_ms': exec_ms,
                'fetch_ms': fetch_ms, 'results': results_to_wire(results)
            }))
            self.tasks_done += 1

    def _fetch(self, sample_id):
        return fetch(sample_id, self.plan, self.nodes, FETCH_DEADLINE_MS)

    def load_samples(self, task):
        return [
            Sample.from_payload(sample_id, self.loader.load(sample_id, self._fetch))
            for sample_id in task.sample_ids
        ]

    def prefetch_running(self):
        future = self.prefetch_future
        return future is not None and not future.done()

    def execute(self, task):
        """
        Run one task. Returns its results and how long (in ms) was spent
        getting data and computing.
        """
        start = time.perf_counter()
        samples = self.load_samples(task)
        fetched = time.perf_counter()
        overlapped = self.prefetch_running()
        results = map_task(task, samples)
        done = time.perf_counter()
        overlapped = overlapped or self.prefetch_running()
        fetch_ms = (fetched - start) * 1000.
        exec_ms = (done - fetched) * 1000.
        if overlapped:
            self.overlapped_exec_ms.append(exec_ms)
        else:
            self.isolated_exec_ms.append(exec_ms)
        self.ewma_fetch_ms = ewma(self.ewma_fetch_ms, fetch_ms, 0.5)
        self.ewma_exec_ms = ewma(self.ewma_exec_ms, exec_ms, 0.5)
        self.prefetch.update(self.ewma_fetch_ms, self.ewma_exec_ms)
        return results, fetch_ms, exec_ms

    def _send_loop(self):
        while True:
            item = self.outbox.get()
            if item is None:
                return
            try:
                self.conn.send(*item)
            except OSError:
                return

    def _heartbeat_loop(self):
        while not self.stopping.wait(self.heartbeat_ms / 1000.):
            try:
                self.conn.send(HEARTBEAT)
            except OSError:
                return

    def _monitor_loop(self):
        # Snapshots are due on a fixed schedule; a late one doesn't push back
        # the ones after it
        period = self.monitor_interval_ms / 1000.
        due = time.monotonic() + period
        while not self.stopping.wait(max(0., due - time.monotonic())):
            due += period
            fetch_times = [ms for node in list(self.nodes.values())
                           for ms in list(node.recent_fetch_ms)]
            snapshot = {
                'time_ms': time.time() * 1000.,
                'tasks_done': self.tasks_done,
                'queue_depth': len(self.queue),
                'fetch_p95_ms': float(np.percentile(fetch_times, 95)) if fetch_times else 0.,
            }
            try:
                self.conn.send(MONITOR, snapshot)
            except OSError:
                return

    def _crash(self):
        logger.warning("Worker %s crashing on purpose after %d tasks",
                       self.name, self.tasks_done)
        self.stopping.set()
        self.conn.close()

    def stop(self):
        self.stopping.set()
        with self.ready:
            self.ready.notify_all()
        self.outbox.put(None)
        self.prefetcher.shutdown(wait=False)
        for node in self.nodes.values():
            node.close()
        if self.conn is not None:
            self.conn.close()


def _log_prefetch_error(future):
    err = future.exception()
    if err is not None:
        logger.warning("Prefetch failed: %s", err)
