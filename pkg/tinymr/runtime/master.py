"""
The master: accepts worker registrations, decides task sizes, schedules map
tasks, collects intermediate results, and reduces them.

Each worker connection has a handler thread that only reads frames and puts
them in one inbox. A single command loop takes frames from the inbox and
makes every scheduling decision, so scheduler state is only ever touched
from one place at a time.
"""
import logging
import math
import queue
import socket
import threading
import time
from collections import Counter

from tinymr import config
from tinymr.datalayer import ReplicationController, build_initial_plan
from tinymr.runtime.jobs import JobResult, results_from_wire
from tinymr.runtime.recovery import JobFailed, NodeFailure
from tinymr.runtime.transport import (
    ABORT, DONE, FRAME_NAMES, KNEEPOINT, MONITOR, REGISTER, REPLICAS, RESULT,
    TASK, Connection, FrameError, RosterUnreachable, connect, format_addr, listen
)
from tinymr.scheduler import EventLog, Scheduler
from tinymr.workload import reduce_combine

logger = logging.getLogger(__name__)

# Inbox marker for a connection that closed or broke
CLOSED = 'closed'


class WorkerHandle(object):
    def __init__(self, worker_id, conn, name):
        self.worker_id = worker_id
        self.conn = conn
        self.name = name
        self.alive = True
        self.last_seen = time.monotonic()

    def __repr__(self):
        return 'WorkerHandle(%d, %r)' % (self.worker_id, self.name)


class Master(object):
    def __init__(self, spec, addr=('127.0.0.1', 0), heartbeat_ms=None,
                 heartbeat_misses=None, restart_cap=None, register_timeout_s=None):
        if not spec.data_nodes and not spec.is_empty():
            raise ValueError("A job needs at least one data node")
        self.spec = spec
        self.heartbeat_ms = heartbeat_ms or config.HEARTBEAT_MS
        self.heartbeat_misses = heartbeat_misses or config.HEARTBEAT_MISSES
        self.restart_cap = config.RESTART_CAP if restart_cap is None else restart_cap
        if register_timeout_s is None:
            register_timeout_s = max(config.CONNECT_RETRIES, 1)
        self.register_timeout_s = register_timeout_s
        self.server = listen(addr)
        self.address = format_addr(self.server.getsockname())
        self.inbox = queue.Queue()
        self.workers = {}
        self.frame_counts = Counter()
        self.log = EventLog()
        self.monitor_snapshots = []
        self.plan = None
        self.replication = None
        self.slo_budget_ms = None
        self.attempt = 0
        self._start = time.monotonic()

    def clock(self):
        return (time.monotonic() - self._start) * 1000.

    def live_workers(self):
        return sorted(wid for wid, handle in self.workers.items() if handle.alive)

    def accept_workers(self):
        """
        Wait for `n_workers` workers to register.
        """
        self.server.settimeout(0.2)
        deadline = time.monotonic() + self.register_timeout_s
        while len(self.workers) < self.spec.n_workers:
            if time.monotonic() > deadline:
                raise RosterUnreachable("Only %d of %d workers registered"
                                        % (len(self.workers), self.spec.n_workers))
            try:
                sock, peer = self.server.accept()
            except socket.timeout:
                continue
            sock.settimeout(None)
            conn = Connection(sock, format_addr(peer))
            try:
                frame = conn.receive()
            except (OSError, FrameError):
                frame = None
            if frame is None or frame[0] != REGISTER:
                logger.warning("Connection from %s didn't register; dropping it", conn.peer)
                conn.close()
                continue
            worker_id = len(self.workers)
            name = (frame[1] or {}).get('name') or conn.peer
            handle = WorkerHandle(worker_id, conn, name)
            self.workers[worker_id] = handle
            self.frame_counts['REGISTER'] += 1
            self.log.record(self.clock(), 'register', worker_id)
            threading.Thread(target=self._handle, args=(handle,), daemon=True,
                             name='master handler %d' % worker_id).start()
            logger.info("Worker %d (%s) registered", worker_id, name)

    def _handle(self, handle):
        "Read frames from one worker into the inbox until its connection ends."
        try:
            while True:
                frame = handle.conn.receive()
                if frame is None:
                    break
                handle.last_seen = time.monotonic()
                self.inbox.put((frame[0], handle.worker_id, frame[1]))
        except (OSError, FrameError) as err:
            logger.debug("Worker %d connection error: %s", handle.worker_id, err)
        self.inbox.put((CLOSED, handle.worker_id, None))

    def check_data_nodes(self):
        for addr in self.spec.data_nodes + self.spec.spare_data_nodes:
            conn = connect(addr, retries=0, what='data node')
            conn.close()

    def _job_config(self):
        report = None
        if not self.spec.is_empty():
            report = self.spec.kneepoint_report().to_dict()
        return {
            'report': report,
            'manifest': [list(entry) for entry in self.spec.dataset.manifest],
            'data_nodes': self._data_nodes(),
            'seed': self.spec.seed,
            'monitor': self.spec.monitor,
            'monitor_interval_ms': self.spec.monitor_interval_ms,
            'heartbeat_ms': self.heartbeat_ms,
        }

    def _data_nodes(self):
        if self.plan is None:
            return list(self.spec.data_nodes)
        return list(self.plan.data_node_ids)

    def _plan_replication(self, n_tasks):
        """
        Build the replica plan the workers start from. With an SLO, the
        replication controller gets each task's share of the deadline as
        its fetch budget.
        """
        if not self.spec.data_nodes or not self.spec.dataset.manifest:
            return
        self.plan = build_initial_plan(self.spec.dataset.manifest, self.spec.data_nodes,
                                       self.spec.seed)
        if self.spec.slo_ms and n_tasks:
            tasks_per_node = math.ceil(n_tasks / self.spec.n_workers)
            self.slo_budget_ms = float(self.spec.slo_ms) / tasks_per_node
            self.replication = ReplicationController(self.plan, self.spec.spare_data_nodes)
            logger.info("Fetch budget is %.3f ms per task", self.slo_budget_ms)

    def _adapt_replication(self, fetch_ms, exec_ms):
        if self.replication is None:
            return
        self.replication.observe(fetch_ms, exec_ms)
        plan = self.replication.maybe_adapt(self.slo_budget_ms)
        if plan is self.plan:
            return
        self.plan = plan
        logger.info("Replication factor is now %d", plan.replication_factor)
        for worker_id in self.live_workers():
            self._send(worker_id, REPLICAS, {'data_nodes': self._data_nodes()})

    def _send(self, worker_id, frame_type, message=None):
        handle = self.workers[worker_id]
        try:
            handle.conn.send(frame_type, message)
        except OSError as err:
            handle.alive = False
            raise NodeFailure("Couldn't send to worker %d: %s" % (worker_id, err), worker_id)

    def _send_task(self, worker_id, task):
        self._send(worker_id, TASK, {'attempt': self.attempt, 'task': task.to_dict()})

    def _check_heartbeats(self):
        limit = self.heartbeat_misses * self.heartbeat_ms / 1000.
        now = time.monotonic()
        for worker_id in self.live_workers():
            handle = self.workers[worker_id]
            if now - handle.last_seen > limit:
                handle.alive = False
                handle.conn.close()
                raise NodeFailure("Worker %d missed %d heartbeats"
                                  % (worker_id, self.heartbeat_misses), worker_id)

    def _attempt(self, tasks):
        """
        Run the map and shuffle phases once. Returns the intermediate results
        of every task, keyed by task id.
        """
        self.attempt += 1
        live = self.live_workers()
        results = {}
        if not tasks:
            return results
        if not live:
            raise JobFailed("No workers left to run the job")
        for worker_id in live:
            self.workers[worker_id].last_seen = time.monotonic()
        scheduler = Scheduler(tasks, live, self.spec.schedule, clock=self.clock,
                              event_log=self.log)
        sent = set()
        scheduler.start()
        for worker_id in live:
            task = scheduler.next_task(worker_id)
            if task is not None:
                self._send_task(worker_id, task)
                sent.add(task.id)

        while len(results) < len(tasks):
            try:
                frame_type, worker_id, message = self.inbox.get(
                    timeout=self.heartbeat_ms / 1000.
                )
            except queue.Empty:
                self._check_heartbeats()
                continue
            handle = self.workers[worker_id]
            if frame_type == CLOSED:
                if handle.alive:
                    handle.alive = False
                    raise NodeFailure("Lost the connection to worker %d" % worker_id, worker_id)
                continue
            self.frame_counts[FRAME_NAMES.get(frame_type, str(frame_type))] += 1
            if frame_type == MONITOR:
                message['worker_id'] = worker_id
                self.monitor_snapshots.append(message)
                self.log.record(self.clock(), 'monitor', worker_id)
                logger.info("monitor: worker %d done %d, queued %d, fetch p95 %.2f ms",
                            worker_id, message['tasks_done'], message['queue_depth'],
                            message['fetch_p95_ms'])
            elif frame_type == ABORT:
                if message.get('attempt') == self.attempt:
                    raise NodeFailure("Worker %d aborted: %s"
                                      % (worker_id, message.get('reason')))
            elif frame_type == RESULT:
                if message['attempt'] != self.attempt or message['task_id'] in results:
                    continue
                task_id = message['task_id']
                results[task_id] = results_from_wire(message['results'])
                self._adapt_replication(message['fetch_ms'], message['exec_ms'])
                batch = scheduler.complete(worker_id, task_id, message['exec_ms'],
                                           message['fetch_ms'])
                for task in batch:
                    self._send_task(worker_id, task)
                    sent.add(task.id)
                task = scheduler.next_task(worker_id)
                if task is not None and task.id not in sent:
                    self._send_task(worker_id, task)
                    sent.add(task.id)
            self._check_heartbeats()
        return results

    def _abort_all(self, failure):
        if failure.node_id is not None and failure.node_id in self.workers:
            failed = self.workers[failure.node_id]
            failed.alive = False
            failed.conn.close()
        for worker_id in self.live_workers():
            try:
                self.workers[worker_id].conn.send(ABORT, {'attempt': self.attempt})
            except OSError:
                self.workers[worker_id].alive = False

    def run_job(self):
        """
        Run the whole job: startup, map, shuffle and reduce, restarting the
        job from the beginning on any failure, up to the restart cap.
        """
        self._start = time.monotonic()
        self.accept_workers()
        self.check_data_nodes()
        tasks = self.spec.tasks()
        self._plan_replication(len(tasks))
        job_config = self._job_config()
        for worker_id in self.live_workers():
            try:
                self._send(worker_id, KNEEPOINT, job_config)
            except NodeFailure as failure:
                logger.warning("Dropping a worker before the job started: %s", failure)
        startup_ms = self.clock()
        logger.info("Startup took %.1f ms; %d tasks for %d workers",
                    startup_ms, len(tasks), len(self.workers))

        restarts = 0
        while True:
            try:
                results = self._attempt(tasks)
                break
            except NodeFailure as failure:
                restarts += 1
                self.log.record(self.clock(), 'restart', failure.node_id)
                logger.warning("Restarting the job (restart %d): %s", restarts, failure)
                self._abort_all(failure)
                if restarts > self.restart_cap:
                    raise JobFailed("Job failed after %d restarts: %s"
                                    % (self.restart_cap, failure))
                if not self.live_workers():
                    raise JobFailed("No workers left after: %s" % failure)

        for worker_id in self.live_workers():
            try:
                self.workers[worker_id].conn.send(DONE)
            except OSError:
                pass
        parts = [part for task_id in sorted(results) for part in results[task_id]]
        wall_ms = self.clock()
        result = JobResult(None, {}, wall_ms, startup_ms, self.log, restarts,
                           tasks_dispatched=self.log.count('dispatch'),
                           frame_counts=dict(self.frame_counts),
                           monitor_snapshots=self.monitor_snapshots)
        if self.replication is not None:
            result.replication_history = list(self.replication.history)
        if parts:
            statistic = reduce_combine(parts)
            result.aggregate = statistic.aggregate
            result.per_sample = statistic.per_sample
            result.count = statistic.count
        logger.info("Job finished in %.1f ms with %d restarts", wall_ms, restarts)
        return result

    def close(self):
        for handle in self.workers.values():
            handle.conn.close()
        try:
            self.server.close()
        except OSError:
            pass
