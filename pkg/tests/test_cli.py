import os

import pandas as pd
import pytest
from click.testing import CliRunner

from tinymr import config
from tinymr.cli import cli
from tinymr.config import read_config_file, write_config_file
from tinymr.formats.json_stream import read_json_stream
from tinymr.runtime.jobs import job_spec_from_config, read_per_sample, run_in_process
from tinymr.runtime.transport import listen

UNIFORM_JOB = {
    'workload': 'uniform', 'n_samples': 16, 'sample_bytes': 2048,
    'fraction': 0.5, 'repetitions': 4, 'seed': 2
}


@pytest.fixture
def job_file(tmp_path):
    path = str(tmp_path / 'job.txt')
    write_config_file(UNIFORM_JOB, path)
    return path


def invoke(*args):
    return CliRunner().invoke(cli, [str(arg) for arg in args])


def test_profile_finds_the_cache_sized_kneepoint(job_file, tmp_path):
    out = str(tmp_path / 'profile')
    args = ['profile', '--config', job_file, '--cache-kb', '8',
            '--sizes', '2048,4096,8192,16384', '--out', out]
    result = invoke(*args)
    assert result.exit_code == 0, result.output
    assert result.output.strip().splitlines()[-1] == '8192'
    report = read_config_file(os.path.join(out, 'kneepoint.txt'))
    assert report['kneepoint_bytes'] == 8192
    assert report['samples_per_task'] == 4
    curve = open(os.path.join(out, 'curve.csv')).read()

    again = invoke(*args)
    assert again.output.strip().splitlines()[-1] == '8192'
    assert open(os.path.join(out, 'curve.csv')).read() == curve


def test_profile_needs_three_sizes(job_file):
    result = invoke('profile', '--config', job_file, '--sizes', '2048,4096')
    assert result.exit_code == 2


def test_profile_bad_config(tmp_path):
    path = str(tmp_path / 'bad.txt')
    with open(path, 'w') as out:
        out.write('workload = uniform\nthis is not a setting\n')
    result = invoke('profile', '--config', path)
    assert result.exit_code == 2
    assert 'line 2' in result.output


def test_local_run_matches_reference(job_file, tmp_path):
    report_path = str(tmp_path / 'reports.jsons')
    dump_path = str(tmp_path / 'per-sample.msgpack')
    result = invoke('run', '--config', job_file, '--role', 'local', '--nodes', 2,
                    '--out', report_path, '--dump', dump_path)
    assert result.exit_code == 0, result.output

    values = dict(UNIFORM_JOB, workers=2)
    expected = run_in_process(job_spec_from_config(values))
    assert 'aggregate: %r' % expected.aggregate in result.output
    assert 'restarts: 0' in result.output
    reports = list(read_json_stream(report_path))
    assert reports[0]['aggregate'] == expected.aggregate
    assert read_per_sample(dump_path) == expected.per_sample


def test_worker_without_master(monkeypatch):
    monkeypatch.setattr(config, 'CONNECT_RETRIES', 0)
    server = listen(('127.0.0.1', 0))
    host, port = server.getsockname()
    server.close()
    result = invoke('run', '--role', 'worker', '--addr', '%s:%d' % (host, port))
    assert result.exit_code == 3


def test_generate(job_file, tmp_path):
    out = str(tmp_path / 'data')
    result = invoke('generate', '--config', job_file, '--out', out)
    assert result.exit_code == 0, result.output
    assert result.output.strip() == '16 samples, 32768 bytes'
    manifest = pd.read_csv(os.path.join(out, 'manifest.csv'), header=None)
    assert len(manifest) == 16
    assert os.path.getsize(os.path.join(out, 'samples', '3.bin')) == 2048


def test_recovery():
    result = invoke('recovery')
    assert result.exit_code == 0
    assert 'recommended recovery: job-level' in result.output
    result = invoke('recovery', '--mttf-months', 0.001, '--slo-minutes', 60)
    assert 'recommended recovery: task-level' in result.output


def test_bench_unknown_preset():
    result = invoke('bench', 'wordcount')
    assert result.exit_code == 2
    assert 'unknown preset' in result.output


def test_bench_eaglet(tmp_path):
    out = str(tmp_path / 'bench')
    result = invoke('bench', 'eaglet', '--out', out)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(os.path.join(out, 'bench-eaglet.csv'))
    assert list(table.configuration) == ['bts', 'blt', 'btt']
    assert table.relative_throughput[0] == 1.


def test_simulate_malformed_scenario(tmp_path):
    path = str(tmp_path / 'broken.txt')
    with open(path, 'w') as out:
        out.write('kind = sweep\npreset eaglet\n')
    result = invoke('simulate', path)
    assert result.exit_code == 2
    assert 'line 2' in result.output


def test_simulate_unknown_kind(tmp_path):
    path = str(tmp_path / 'odd.txt')
    write_config_file({'kind': 'teleport'}, path)
    assert invoke('simulate', path).exit_code == 2


def test_simulate_sweep(tmp_path):
    path = str(tmp_path / 'sweep.txt')
    write_config_file({'kind': 'sweep', 'preset': 'eaglet', 'sizes': '2048,8192,32768'}, path)
    out = str(tmp_path / 'sim')
    result = invoke('simulate', path, '--out', out)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(os.path.join(out, 'sweep.csv'))
    assert list(table.task_size_bytes) == [2048, 8192, 32768]


def test_simulate_reduce(tmp_path):
    path = str(tmp_path / 'reducers.txt')
    write_config_file({
        'kind': 'reduce', 'avg_map_ms': 10., 'avg_reduce_ms': 500.,
        'avg_shuffle_ms': 20., 'map_tasks': 100, 'slots': 12
    }, path)
    out = str(tmp_path / 'sim')
    result = invoke('simulate', path, '--out', out)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(os.path.join(out, 'reducers.csv'))
    assert len(table) == 64
    assert int(table.reducers[table.makespan_ms.idxmin()]) == 32


@pytest.mark.parametrize('setting', [
    {'startup_ms': -5},
    {'startup_ms': 'fast'},
    {'n_data_nodes': 0},
    {'worker_counts': '12,0'},
])
def test_simulate_bad_override_is_a_usage_error(tmp_path, setting):
    path = str(tmp_path / 'bad.txt')
    values = {'kind': 'elasticity', 'preset': 'eaglet'}
    values.update(setting)
    write_config_file(values, path)
    result = invoke('simulate', path, '--out', str(tmp_path / 'sim'))
    assert result.exit_code == 2, result.output
    assert 'Error:' in result.output


def test_simulate_bad_reduce_setting(tmp_path):
    path = str(tmp_path / 'reducers.txt')
    write_config_file({
        'kind': 'reduce', 'avg_map_ms': -10., 'avg_reduce_ms': 500.,
        'avg_shuffle_ms': 20.
    }, path)
    assert invoke('simulate', path).exit_code == 2


def test_run_that_keeps_failing_exits_4(tmp_path):
    path = str(tmp_path / 'crashy.txt')
    write_config_file(dict(UNIFORM_JOB, kneepoint_bytes=2048, crash_after='0:1,1:1'), path)
    result = invoke('run', '--config', path, '--nodes', 2)
    assert result.exit_code == 4, result.output
    assert 'Error:' in result.output


def test_run_bad_crash_setting(tmp_path):
    path = str(tmp_path / 'crashy.txt')
    write_config_file(dict(UNIFORM_JOB, crash_after='soon'), path)
    assert invoke('run', '--config', path).exit_code == 2
