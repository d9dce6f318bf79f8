"""
The framed byte-stream transport that masters, workers and data nodes talk
over.

Each frame is a 4-byte big-endian length, a 1-byte frame type, and a
payload; the length counts the type byte and the payload. Payloads are
msgpack-encoded values.
"""
import logging
import socket
import struct
import sys
import threading
import time

from tinymr import config
from tinymr.formats.msgpack_stream import pack, unpack
from tinymr.util import parse_addr

logger = logging.getLogger(__name__)

REGISTER = 1
KNEEPOINT = 2
TASK = 3
RESULT = 4
GET = 5
PUT = 6
MONITOR = 7
ABORT = 8
DONE = 9
HEARTBEAT = 10
REPLICAS = 11

FRAME_NAMES = {
    REGISTER: 'REGISTER', KNEEPOINT: 'KNEEPOINT', TASK: 'TASK', RESULT: 'RESULT',
    GET: 'GET', PUT: 'PUT', MONITOR: 'MONITOR', ABORT: 'ABORT', DONE: 'DONE',
    HEARTBEAT: 'HEARTBEAT', REPLICAS: 'REPLICAS'
}

HEADER = struct.Struct('!IB')
MAX_LENGTH = 2 ** 32 - 1


class FrameError(Exception):
    "The byte stream doesn't contain a well-formed frame."
    pass


class RosterUnreachable(IOError):
    pass


def encode_frame(frame_type, payload=b''):
    """
    >>> encode_frame(HEARTBEAT)
    b'\\x00\\x00\\x00\\x01\\n'
    >>> encode_frame(GET, b'ab')
    b'\\x00\\x00\\x00\\x03\\x05ab'
    """
    if frame_type not in FRAME_NAMES:
        raise FrameError("Unknown frame type %r" % frame_type)
    length = len(payload) + 1
    if length > MAX_LENGTH:
        raise FrameError("Payload of %d bytes is too long for one frame" % len(payload))
    return HEADER.pack(length, frame_type) + payload


def decode_frame(data):
    """
    Decode one frame from the start of `data`. Returns (frame_type, payload,
    rest), or None if `data` doesn't hold a whole frame yet.
    """
    if len(data) < HEADER.size:
        return None
    length, frame_type = HEADER.unpack_from(data)
    if length < 1:
        raise FrameError("Frame length must be at least 1")
    if frame_type not in FRAME_NAMES:
        raise FrameError("Unknown frame type %r" % frame_type)
    end = HEADER.size + length - 1
    if len(data) < end:
        return None
    return frame_type, bytes(data[HEADER.size:end]), bytes(data[end:])


def recvall(sock, length):
    """
    Read exactly `length` bytes. Returns b'' if the connection closed before
    anything arrived; raises FrameError if it closed partway through.
    """
    chunks = []
    received = 0
    while received < length:
        more = sock.recv(length - received)
        if not more:
            if received == 0:
                return b''
            raise FrameError("Connection closed in the middle of a frame")
        chunks.append(more)
        received += len(more)
    return b''.join(chunks)


class Connection(object):
    """
    One end of a framed connection. Sends are serialized with a lock, so
    several threads can send on the same connection.
    """
    def __init__(self, sock, peer=None):
        self.sock = sock
        self.peer = peer
        self._send_lock = threading.Lock()
        self.closed = False

    def send(self, frame_type, message=None):
        payload = b'' if message is None else pack(message)
        data = encode_frame(frame_type, payload)
        with self._send_lock:
            self.sock.sendall(data)

    def receive(self):
        """
        Read the next frame as (frame_type, message). Returns None when the
        other end closes the connection cleanly.
        """
        header = recvall(self.sock, HEADER.size)
        if not header:
            return None
        length, frame_type = HEADER.unpack(header)
        if length < 1:
            raise FrameError("Frame length must be at least 1")
        if frame_type not in FRAME_NAMES:
            raise FrameError("Unknown frame type %r" % frame_type)
        payload = b''
        if length > 1:
            payload = recvall(self.sock, length - 1)
            if not payload:
                raise FrameError("Connection closed in the middle of a frame")
        message = unpack(payload) if payload else None
        return frame_type, message

    def settimeout(self, seconds):
        self.sock.settimeout(seconds)

    def close(self):
        if self.closed:
            return
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def listen(addr=('127.0.0.1', 0), backlog=64):
    if isinstance(addr, str):
        addr = parse_addr(addr)
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind(addr)
    server.listen(backlog)
    return server


def format_addr(addr):
    return '%s:%d' % tuple(addr)


def connect(addr, retries=None, what='master'):
    """
    Open a framed connection to `addr`, retrying once a second for up to
    `retries` seconds (TINYMR_CONNECT_RETRIES by default).
    """
    if isinstance(addr, str):
        addr = parse_addr(addr)
    if retries is None:
        retries = config.CONNECT_RETRIES
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection(addr)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Connection(sock, format_addr(addr))
        except OSError:
            if attempt == retries:
                break
            if attempt == 0:
                print(
                    "The %s at %s is not available, retrying for %d seconds"
                    % (what, format_addr(addr), retries),
                    file=sys.stderr
                )
            time.sleep(1)
    raise RosterUnreachable("Couldn't connect to the %s at %s" % (what, format_addr(addr)))
