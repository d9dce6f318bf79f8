"""
Serving a DataNode's store over the framed transport, and the client that
workers use to fetch from it.

GET {sample_id} is answered with a GET frame holding the payload, or an
error; PUT {sample_id, payload} is answered with a PUT frame as an ack.
"""
import logging
import socket
import threading
import time
from collections import deque

from tinymr.datalayer import FETCH_WINDOW, FetchTimeout
from tinymr.runtime.transport import (
    GET, PUT, Connection, FrameError, connect, format_addr, listen
)

logger = logging.getLogger(__name__)


class DataNodeServer(object):
    def __init__(self, node, addr=('127.0.0.1', 0)):
        self.node = node
        self.server = listen(addr)
        self.address = format_addr(self.server.getsockname())
        self._connections = set()
        self._lock = threading.Lock()
        self._stopped = threading.Event()
        self._thread = None

    def start(self):
        self._thread = threading.Thread(target=self.serve_forever, daemon=True,
                                        name='datanode %s' % self.address)
        self._thread.start()
        return self

    def serve_forever(self):
        logger.info("Data node %s serving %d samples", self.address, len(self.node.store))
        while not self._stopped.is_set():
            try:
                sock, peer = self.server.accept()
            except OSError:
                break
            conn = Connection(sock, format_addr(peer))
            with self._lock:
                self._connections.add(conn)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn):
        try:
            while True:
                frame = conn.receive()
                if frame is None:
                    break
                frame_type, message = frame
                if frame_type == GET:
                    conn.send(GET, self._get(message['sample_id']))
                elif frame_type == PUT:
                    self.node.put(message['sample_id'], message['payload'])
                    conn.send(PUT, {'sample_id': message['sample_id'], 'ok': True})
                else:
                    logger.warning("Data node %s ignoring frame type %d", self.address, frame_type)
        except (OSError, FrameError) as err:
            if not self._stopped.is_set():
                logger.info("Data node %s lost a connection: %s", self.address, err)
        finally:
            with self._lock:
                self._connections.discard(conn)
            conn.close()

    def _get(self, sample_id):
        try:
            payload, _response_ms = self.node.get(sample_id)
        except KeyError:
            return {'sample_id': sample_id, 'error': 'missing'}
        except FetchTimeout as err:
            return {'sample_id': sample_id, 'error': str(err)}
        return {'sample_id': sample_id, 'payload': payload}

    def stop(self):
        "Stop serving and drop every open connection, as if the node died."
        self._stopped.set()
        try:
            self.server.close()
        except OSError:
            pass
        with self._lock:
            connections = list(self._connections)
        for conn in connections:
            conn.close()


class RemoteDataNode(object):
    """
    A client for one data node, with the same `get` interface as a local
    DataNode. It keeps one connection open, shared by the threads of a
    worker.
    """
    def __init__(self, addr):
        self.node_id = addr
        self.addr = addr
        self.recent_fetch_ms = deque(maxlen=FETCH_WINDOW)
        self.served_count = 0
        self._conn = None
        self._lock = threading.Lock()

    def _connection(self):
        if self._conn is None:
            self._conn = connect(self.addr, retries=0, what='data node')
        return self._conn

    def _drop(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None

    def _request(self, frame_type, message, deadline_ms):
        with self._lock:
            start = time.perf_counter()
            try:
                conn = self._connection()
                conn.settimeout(None if deadline_ms is None else deadline_ms / 1000.)
                conn.send(frame_type, message)
                reply = conn.receive()
            except socket.timeout:
                self._drop()
                raise FetchTimeout("Data node %s didn't answer within %s ms"
                                   % (self.addr, deadline_ms))
            except (OSError, FrameError) as err:
                self._drop()
                raise FetchTimeout("Data node %s is unreachable: %s" % (self.addr, err))
            if reply is None:
                self._drop()
                raise FetchTimeout("Data node %s closed the connection" % self.addr)
            return reply[1], (time.perf_counter() - start) * 1000.

    def get(self, sample_id, deadline_ms=None):
        reply, response_ms = self._request(GET, {'sample_id': sample_id}, deadline_ms)
        if 'error' in reply:
            raise KeyError("Data node %s: sample %d %s" % (self.addr, sample_id, reply['error']))
        self.served_count += 1
        self.recent_fetch_ms.append(response_ms)
        return reply['payload'], response_ms

    def put(self, sample_id, payload):
        self._request(PUT, {'sample_id': sample_id, 'payload': bytes(payload)}, None)

    def close(self):
        with self._lock:
            self._drop()
