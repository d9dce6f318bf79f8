"""
Job reports are kept in "JSON stream" format: one JSON object per line, so
the reports of many runs can be appended to one file and read back one at a
time.
"""
import json
import sys


class JSONStreamWriter(object):
    """
    Writes one JSON object per line to a filename or an open stream. Line
    breaks can't appear inside an object, which is stricter than JSON.

    Keys are sorted, so two runs that produce the same report produce the
    same line. `sys.stdout` is never closed.
    """
    def __init__(self, filename_or_stream, append=False):
        if hasattr(filename_or_stream, 'write'):
            self.stream = filename_or_stream
        else:
            self.stream = open(filename_or_stream, 'a' if append else 'w', encoding='utf-8')

    def write(self, obj):
        if not isinstance(obj, (dict, list)):
            raise ValueError("Only objects and lists go in a JSON stream, not %r" % (obj,))
        print(json.dumps(obj, ensure_ascii=False, sort_keys=True), file=self.stream)
        self.stream.flush()

    def close(self):
        if self.stream is not sys.stdout:
            self.stream.close()


def append_job_report(result, filename, **extra):
    """
    Append a JobResult's summary to a report file, with any `extra` fields
    (such as the job's config file) added alongside it.
    """
    record = result.to_dict()
    record.update(extra)
    writer = JSONStreamWriter(filename, append=True)
    try:
        writer.write(record)
    finally:
        writer.close()
    return record


def read_json_stream(filename_or_stream):
    """
    Yield each object in a JSON stream. Blank lines are skipped.
    """
    if hasattr(filename_or_stream, 'read'):
        lines = filename_or_stream
    else:
        lines = open(filename_or_stream, encoding='utf-8')
    try:
        for line in lines:
            if isinstance(line, bytes):
                line = line.decode('utf-8')
            line = line.strip()
            if line:
                yield json.loads(line)
    finally:
        if lines is not filename_or_stream:
            lines.close()
