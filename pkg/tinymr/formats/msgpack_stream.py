"""
msgpack is used in two places: frame payloads on the wire, packed one value
at a time with `pack` and `unpack`, and per-sample result dumps, which are a
plain concatenation of msgpack values.
"""
import msgpack


def pack(obj):
    """
    Encode one value as msgpack bytes. Byte strings stay binary and text
    stays text.
    """
    return msgpack.packb(obj, use_bin_type=True)


def unpack(data):
    return msgpack.unpackb(data, raw=False, strict_map_key=False)


class MsgpackStreamWriter(object):
    """
    Writes values back to back to a filename or an open binary stream. A
    stream that was passed in is left open.
    """
    def __init__(self, filename_or_stream):
        self.owned = not hasattr(filename_or_stream, 'write')
        if self.owned:
            self.stream = open(filename_or_stream, 'wb')
        else:
            self.stream = filename_or_stream
        self.packer = msgpack.Packer(use_bin_type=True)

    def write(self, obj):
        self.stream.write(self.packer.pack(obj))

    def close(self):
        if self.owned:
            self.stream.close()
        else:
            self.stream.flush()


def read_msgpack_stream(filename_or_stream):
    "Yield each value in a msgpack stream, in the order it was written."
    if hasattr(filename_or_stream, 'read'):
        stream = filename_or_stream
    else:
        stream = open(filename_or_stream, 'rb')
    try:
        yield from msgpack.Unpacker(stream, raw=False, strict_map_key=False)
    finally:
        if stream is not filename_or_stream:
            stream.close()
