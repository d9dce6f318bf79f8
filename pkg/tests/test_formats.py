import io

import pytest

from tinymr.formats.json_stream import JSONStreamWriter, append_job_report, read_json_stream
from tinymr.formats.msgpack_stream import (
    MsgpackStreamWriter, pack, read_msgpack_stream, unpack
)
from tinymr.runtime.jobs import JobResult


def test_json_stream_lines():
    stream = io.StringIO()
    writer = JSONStreamWriter(stream)
    writer.write({'b': 1, 'a': [1, 2]})
    writer.write(['x'])
    assert stream.getvalue() == '{"a": [1, 2], "b": 1}\n["x"]\n'
    with pytest.raises(ValueError):
        writer.write('already a string')
    stream.seek(0)
    assert list(read_json_stream(stream)) == [{'a': [1, 2], 'b': 1}, ['x']]


def test_job_reports_accumulate(tmp_path):
    path = str(tmp_path / 'reports.jsons')
    first = JobResult(0.5, {0: 0.5}, wall_ms=12., startup_ms=2.)
    second = JobResult(0.25, {0: 0.25}, wall_ms=10., startup_ms=2., restarts=1)
    append_job_report(first, path, role='local')
    append_job_report(second, path, role='local')
    reports = list(read_json_stream(path))
    assert [report['aggregate'] for report in reports] == [0.5, 0.25]
    assert reports[1]['restarts'] == 1
    assert reports[0]['role'] == 'local'
    assert reports[0]['per_sample'] == {'0': 0.5}


def test_msgpack_keeps_bytes_and_text():
    value = {'sample_id': 3, 'payload': b'\x00\x01', 'name': 'worker0'}
    assert unpack(pack(value)) == value
    assert unpack(pack({1: 'a'})) == {1: 'a'}


def test_msgpack_stream(tmp_path):
    path = str(tmp_path / 'values.msgpack')
    writer = MsgpackStreamWriter(path)
    for pair in [[0, 0.5], [1, 0.75]]:
        writer.write(pair)
    writer.close()
    assert list(read_msgpack_stream(path)) == [[0, 0.5], [1, 0.75]]


def test_msgpack_stream_leaves_passed_stream_open():
    stream = io.BytesIO()
    writer = MsgpackStreamWriter(stream)
    writer.write({'sample_id': 2})
    writer.close()
    assert not stream.closed
    stream.seek(0)
    assert list(read_msgpack_stream(stream)) == [{'sample_id': 2}]
