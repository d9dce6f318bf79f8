"""
The `tinymr` command.

Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a
master, worker or data node can't be reached, and 4 when a job fails even
after restarting.
"""
import dataclasses
import os
import sys

import click

from tinymr.cache_model import profile_curve
from tinymr.config import ConfigError, configure_logging, merge_overrides, read_config_file
from tinymr.datalayer import DataNode
from tinymr.formats.json_stream import append_job_report
from tinymr.runtime.cluster import LocalCluster
from tinymr.runtime.datanode import DataNodeServer
from tinymr.runtime.jobs import (
    JOB_KEYS, cache_from_kb, crash_plan_from_config, dataset_from_config,
    dump_per_sample, job_spec_from_config
)
from tinymr.runtime.master import Master
from tinymr.runtime.recovery import (
    MINUTES_PER_MONTH, FailureModel, JobFailed, justify_job_level_recovery
)
from tinymr.runtime.transport import RosterUnreachable
from tinymr.runtime.worker import Worker
from tinymr.sim.harness import compare_configurations
from tinymr.sim.presets import ScenarioError, get_preset
from tinymr.sim.scenario import number_list, read_scenario, run_scenario, write_tables
from tinymr.sizing import candidate_sizes, find_kneepoint
from tinymr.util import ensure_dir, get_data_filename, parse_addr
from tinymr.workload import SubsampleSpec, save_dataset

EXIT_USAGE = 2
EXIT_UNREACHABLE = 3
EXIT_JOB_FAILED = 4

KNEEPOINT_NOISE = 0.05
DEFAULT_CACHE_KB = 256


def fail(message, code):
    click.echo('Error: %s' % message, err=True)
    sys.exit(code)


def load_values(config_file, **overrides):
    values = read_config_file(config_file) if config_file else {}
    return merge_overrides(values, overrides, JOB_KEYS)


@click.group()
def cli():
    configure_logging()


@cli.command(name='profile')
@click.option('--config', 'config_file', type=click.Path(dir_okay=False),
              help='Job file describing the dataset and subsampling')
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None,
              help='Directory for curve.csv and kneepoint.txt')
@click.option('--cache-kb', default=None, help='Cache level sizes in KB, like 8,40')
@click.option('--sizes', default=None, help='Task sizes to profile, in bytes')
@click.option('--nodes', type=int, default=1, help='Nodes the data will be spread over')
def run_profile(config_file, seed, out, cache_kb, sizes, nodes):
    """
    Profile a dataset's miss rate against task size, and find its kneepoint.
    """
    try:
        values = load_values(config_file, seed=seed, cache_kb=cache_kb)
        base_dir = os.path.dirname(config_file) if config_file else '.'
        dataset = dataset_from_config(values, base_dir)
        spec = SubsampleSpec(
            fraction=float(values.get('fraction', 0.1)),
            repetitions=int(values.get('repetitions', 30)),
            seed=int(values.get('seed', 0))
        )
        cache = cache_from_kb(values.get('cache_kb', DEFAULT_CACHE_KB))
        if sizes is not None:
            size_list = number_list(sizes)
        else:
            size_list = candidate_sizes(dataset, nodes)
    except (ConfigError, ScenarioError, IOError) as err:
        fail(err, EXIT_USAGE)
    if len(size_list) < 3:
        raise click.UsageError("Profiling needs at least 3 task sizes, got %d" % len(size_list))
    if any(b <= a for a, b in zip(size_list, size_list[1:])):
        raise click.UsageError("Task sizes must be increasing")

    curve = profile_curve(dataset, spec, size_list, cache)
    report = find_kneepoint(curve.measure, curve.sizes, dataset.avg_sample_size,
                            KNEEPOINT_NOISE)
    report = dataclasses.replace(report, curve=curve)
    out = ensure_dir(out or get_data_filename('profile'))
    report.save(os.path.join(out, 'kneepoint.txt'), os.path.join(out, 'curve.csv'))
    click.echo(report.kneepoint_bytes)


@cli.command(name='run')
@click.option('--config', 'config_file', type=click.Path(dir_okay=False))
@click.option('--role', type=click.Choice(['master', 'worker', 'datanode', 'local']),
              default='local')
@click.option('--addr', default=None,
              help="Address to listen on (master, datanode) or the master's (worker)")
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(dir_okay=False), default=None,
              help='Append the job report to this JSON stream file')
@click.option('--cache-kb', default=None)
@click.option('--nodes', type=int, default=None, help='Number of workers')
@click.option('--dump', type=click.Path(dir_okay=False), default=None,
              help='Write per-sample statistics to this msgpack file')
def run_job(config_file, role, addr, seed, out, cache_kb, nodes, dump):
    """
    Run a job, or one part of a distributed job.
    """
    try:
        values = load_values(config_file, seed=seed, cache_kb=cache_kb, workers=nodes)
        addr = addr or values.get('addr')
        if role == 'worker':
            return _run_worker(addr)
        base_dir = os.path.dirname(config_file) if config_file else '.'
        if role == 'datanode':
            return _run_datanode(dataset_from_config(values, base_dir), addr)
        spec = job_spec_from_config(values, base_dir)
        crash_after = crash_plan_from_config(values.get('crash_after'))
    except (ConfigError, ScenarioError, IOError, ValueError) as err:
        if isinstance(err, RosterUnreachable):
            fail(err, EXIT_UNREACHABLE)
        fail(err, EXIT_USAGE)

    try:
        if role == 'master':
            result = _run_master(spec, addr)
        else:
            with LocalCluster(spec.dataset, n_workers=spec.n_workers,
                              crash_after=crash_after) as cluster:
                result = cluster.run(spec)
    except RosterUnreachable as err:
        fail(err, EXIT_UNREACHABLE)
    except JobFailed as err:
        fail(err, EXIT_JOB_FAILED)
    except ValueError as err:
        fail(err, EXIT_USAGE)
    if out is not None:
        append_job_report(result, out, role=role, config=config_file)
    if dump is not None:
        dump_per_sample(result, dump)
    click.echo('aggregate: %r' % result.aggregate)
    click.echo('restarts: %d' % result.restarts)


def _run_master(spec, addr):
    master = Master(spec, parse_addr(addr or '127.0.0.1:7070'))
    click.echo('master listening on %s' % master.address, err=True)
    try:
        return master.run_job()
    finally:
        master.close()


def _run_worker(addr):
    if addr is None:
        raise click.UsageError("A worker needs --addr, the master's address")
    try:
        done = Worker(addr).run()
    except RosterUnreachable as err:
        fail(err, EXIT_UNREACHABLE)
    click.echo('tasks done: %d' % done)


def _run_datanode(dataset, addr):
    addr = parse_addr(addr or '127.0.0.1:7071')
    node = DataNode('%s:%d' % addr)
    node.load(dataset)
    server = DataNodeServer(node, addr)
    click.echo('data node listening on %s' % server.address, err=True)
    try:
        server.serve_forever()
    finally:
        server.stop()


@cli.command(name='generate')
@click.option('--config', 'config_file', type=click.Path(dir_okay=False),
              help='Job file describing the synthetic workload')
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), required=True)
def run_generate(config_file, seed, out):
    """
    Write a synthetic dataset to a directory, as a manifest plus one payload
    file per sample.
    """
    try:
        values = load_values(config_file, seed=seed)
        values.pop('dataset', None)
        dataset = dataset_from_config(values)
    except (ConfigError, IOError) as err:
        fail(err, EXIT_USAGE)
    save_dataset(dataset, out)
    click.echo('%d samples, %d bytes' % (len(dataset), dataset.total_bytes))


@cli.command(name='simulate')
@click.argument('scenario', type=click.Path(dir_okay=False))
@click.option('--seed', type=int, default=None)
@click.option('--out', type=click.Path(file_okay=False), default=None)
def run_simulate(scenario, seed, out):
    """
    Run a simulation scenario and write its tables as CSV.
    """
    try:
        values = read_scenario(scenario)
        if seed is not None:
            values['seed'] = seed
        tables = run_scenario(values)
    except (ConfigError, ScenarioError, IOError) as err:
        fail(err, EXIT_USAGE)
    name = os.path.splitext(os.path.basename(scenario))[0]
    for path in write_tables(tables, out or get_data_filename('sim'), name):
        click.echo(path)


@cli.command(name='bench')
@click.argument('preset')
@click.option('--seed', type=int, default=0)
@click.option('--out', type=click.Path(file_okay=False), default=None)
@click.option('--scale', type=int, default=1, help='Repeat the dataset this many times')
@click.option('--nodes', type=int, default=4)
@click.option('--outliers/--no-outliers', default=True)
def run_bench(preset, seed, out, scale, nodes, outliers):
    """
    Compare kneepoint-sized tasks (bts) with large (blt) and tiny (btt)
    tasks on a workload preset.
    """
    kwargs = {'scale': scale, 'seed': seed, 'n_workers': nodes}
    if preset == 'eaglet':
        kwargs['with_outliers'] = outliers
    try:
        chosen = get_preset(preset, **kwargs)
    except ScenarioError as err:
        fail(err, EXIT_USAGE)
    table = compare_configurations(chosen.spec, chosen.sim)
    out = ensure_dir(out or get_data_filename('bench'))
    path = os.path.join(out, 'bench-%s.csv' % preset)
    table.to_csv(path, index=False)
    click.echo(table[['configuration', 'tasks', 'makespan_ms',
                      'relative_throughput']].to_string(index=False))


@cli.command(name='recovery')
@click.option('--mttf-months', type=float, default=4.3)
@click.option('--slo-minutes', type=float, default=10.)
@click.option('--w', 'w', type=float, default=1.5, help='Safety multiplier on the SLO')
@click.option('--nodes', type=int, default=100)
@click.option('--cost-tl', type=float, default=0.21,
              help='Slowdown task-level recovery would add')
def run_recovery(mttf_months, slo_minutes, w, nodes, cost_tl):
    """
    Decide between job-level and task-level recovery for a cluster.
    """
    try:
        model = FailureModel(mttf_months * MINUTES_PER_MONTH, slo_minutes, w, nodes, cost_tl)
        decision = justify_job_level_recovery(model)
    except ValueError as err:
        fail(err, EXIT_USAGE)
    click.echo(decision.report())


if __name__ == '__main__':
    cli()
