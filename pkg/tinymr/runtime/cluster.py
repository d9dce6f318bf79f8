"""
A whole cluster on the loopback interface: data nodes, a master and
workers, each on its own threads. The CLI's `--role local` and the
end-to-end tests run jobs this way.
"""
import dataclasses
import logging
import threading

from tinymr.datalayer import DataNode
from tinymr.runtime.datanode import DataNodeServer
from tinymr.runtime.master import Master
from tinymr.runtime.transport import RosterUnreachable
from tinymr.runtime.worker import Worker

logger = logging.getLogger(__name__)


class LocalCluster(object):
    """
    `crash_after` maps a worker index to the number of tasks after which
    that worker dies. `n_spare_data_nodes` more data nodes are loaded but
    left out of the initial replica plan, for the master to add if fetches
    get too slow.
    """
    def __init__(self, dataset, n_workers=4, n_data_nodes=2, crash_after=None,
                 heartbeat_ms=None, restart_cap=None, n_spare_data_nodes=0):
        self.dataset = dataset
        self.n_workers = n_workers
        self.crash_after = dict(crash_after or {})
        self.heartbeat_ms = heartbeat_ms
        self.restart_cap = restart_cap
        self.n_data_nodes = n_data_nodes
        self.data_nodes = [DataNode('data%d' % i)
                           for i in range(n_data_nodes + n_spare_data_nodes)]
        self.servers = []
        self.worker_threads = []

    def start(self):
        for node in self.data_nodes:
            node.load(self.dataset)
            self.servers.append(DataNodeServer(node).start())
        logger.info("Started %d data nodes", len(self.servers))
        return self

    @property
    def data_node_addrs(self):
        return [server.address for server in self.servers[:self.n_data_nodes]]

    @property
    def spare_data_node_addrs(self):
        return [server.address for server in self.servers[self.n_data_nodes:]]

    def kill_data_node(self, index):
        "Make a data node stop answering requests."
        self.data_nodes[index].alive = False

    def _run_worker(self, worker):
        try:
            worker.run()
        except RosterUnreachable as err:
            logger.error("Worker %s couldn't reach the master: %s", worker.name, err)

    def run(self, spec):
        """
        Run a job on this cluster and return its JobResult.
        """
        spec = dataclasses.replace(spec, n_workers=self.n_workers,
                                   data_nodes=self.data_node_addrs,
                                   spare_data_nodes=self.spare_data_node_addrs)
        master = Master(spec, heartbeat_ms=self.heartbeat_ms, restart_cap=self.restart_cap)
        workers = [
            Worker(master.address, name='worker%d' % index,
                   crash_after=self.crash_after.get(index), retries=5)
            for index in range(self.n_workers)
        ]
        threads = [
            threading.Thread(target=self._run_worker, args=(worker,), daemon=True)
            for worker in workers
        ]
        for thread in threads:
            thread.start()
        try:
            return master.run_job()
        finally:
            master.close()
            for worker in workers:
                worker.stop()
            for thread in threads:
                thread.join(timeout=5)

    def close(self):
        for server in self.servers:
            server.stop()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc_info):
        self.close()
