"""
Scenario files: flat `key = value` text naming an experiment `kind`, a
workload `preset`, and overrides. For example:

    kind = elasticity
    preset = eaglet
    scale = 16
    worker_counts = 12,36,72

`run_scenario` returns the scenario's result tables by name, and
`write_tables` saves them as CSV files named after the scenario.
"""
import dataclasses
import logging
import os
from collections import OrderedDict

import pandas as pd

from tinymr.config import read_config_file
from tinymr.sim.harness import (
    balanced_lower_bound, scale_out, simulate_job, sweep_task_size
)
from tinymr.sim.presets import ScenarioError, compare_platforms, get_preset
from tinymr.sim.reduce_model import ReduceModel, best_reducer_count, reduce_stage_model
from tinymr.sizing import candidate_sizes
from tinymr.util import ensure_dir

logger = logging.getLogger(__name__)

KINDS = ('job', 'sweep', 'elasticity', 'reduce', 'platforms', 'heterogeneity')
SIM_OVERRIDES = ('startup_ms', 'task_overhead_ms', 'dispatch_ms', 'runtime_tax',
                 'fetch_shift_ms', 'fetch_mean_ms', 'cycle_scale', 'n_data_nodes',
                 'trace_repetitions')
REDUCE_KEYS = ('avg_map_ms', 'avg_reduce_ms', 'avg_shuffle_ms', 'map_tasks', 'slots',
               'max_reducers', 'reduce_work')
SCENARIO_KEYS = set(
    ('kind', 'preset', 'scale', 'seed', 'workers', 'with_outliers', 'sizes',
     'worker_counts', 'speeds', 'job_scales', 'monitor')
    + SIM_OVERRIDES + REDUCE_KEYS
)


def read_scenario(filename):
    "Read a scenario file. Syntax errors raise ConfigError with a line number."
    values = read_config_file(filename)
    check_scenario(values)
    return values


def check_scenario(values):
    unknown = sorted(set(values) - SCENARIO_KEYS)
    if unknown:
        raise ScenarioError("unknown scenario setting(s): %s" % ', '.join(unknown))
    kind = values.get('kind')
    if kind not in KINDS:
        raise ScenarioError("scenario kind must be one of %s, got %r"
                            % (', '.join(KINDS), kind))


def number_list(value, convert=int):
    """
    Read a comma-separated list of numbers from a config value.

    >>> number_list('12, 36,72')
    [12, 36, 72]
    >>> number_list(0.85, float)
    [0.85]
    """
    if isinstance(value, (int, float)):
        return [convert(value)]
    try:
        return [convert(item) for item in str(value).split(',') if item.strip()]
    except ValueError:
        raise ScenarioError("expected a comma-separated list of numbers, got %r" % value)


def build_preset(values):
    """
    Make the scenario's JobSpec and SimConfig from its preset and
    overrides. Overrides the simulator can't accept raise ScenarioError.
    """
    try:
        return _build_preset(values)
    except ScenarioError:
        raise
    except (TypeError, ValueError) as err:
        raise ScenarioError("bad scenario setting: %s" % err)


def _build_preset(values):
    name = values.get('preset', 'eaglet')
    kwargs = {
        'scale': int(values.get('scale', 1)),
        'seed': int(values.get('seed', 0)),
        'n_workers': int(values.get('workers', 4)),
    }
    if name == 'eaglet' and 'with_outliers' in values:
        kwargs['with_outliers'] = bool(values['with_outliers'])
    preset = get_preset(name, **kwargs)
    overrides = {key: values[key] for key in SIM_OVERRIDES if key in values}
    if 'speeds' in values:
        speeds = number_list(values['speeds'], float)
        overrides['speeds'] = speeds
        overrides['n_workers'] = len(speeds)
    sim = dataclasses.replace(preset.sim, **overrides)
    spec = preset.spec
    if values.get('monitor'):
        spec = dataclasses.replace(spec, monitor=True)
    return spec, sim


def run_scenario(values):
    """
    Run a scenario. Returns an ordered dict of table name -> DataFrame.
    """
    check_scenario(values)
    kind = values['kind']
    logger.info("Running a %s scenario", kind)
    if kind == 'reduce':
        return _run_reduce(values)
    spec, sim = build_preset(values)
    tables = OrderedDict()
    if kind == 'job':
        report = simulate_job(spec, sim)
        tables['summary'] = pd.DataFrame([dict(report.to_row(), preset=sim.name)])
        tables['events'] = report.event_log.to_frame()
    elif kind == 'sweep':
        if 'sizes' in values:
            sizes = number_list(values['sizes'])
        else:
            sizes = candidate_sizes(spec.dataset, sim.n_workers)
        tables['sweep'] = sweep_task_size(spec, sim, sizes)
    elif kind == 'elasticity':
        counts = number_list(values.get('worker_counts', '12,36,72'))
        if not counts or min(counts) < 1:
            raise ScenarioError("worker_counts must all be at least 1")
        tables['elasticity'] = scale_out(spec, sim, counts)
    elif kind == 'platforms':
        scales = number_list(values.get('job_scales', '1,8,64'))
        tables['platforms'] = compare_platforms(spec, sim, scales)
    elif kind == 'heterogeneity':
        report = simulate_job(spec, sim)
        bound = balanced_lower_bound(report, sim)
        row = dict(report.to_row(), lower_bound_ms=bound,
                   bound_ratio=report.makespan_ms / bound)
        tables['heterogeneity'] = pd.DataFrame([row])
    return tables


def _run_reduce(values):
    try:
        model = ReduceModel(
            avg_map_ms=float(values['avg_map_ms']),
            avg_reduce_ms=float(values['avg_reduce_ms']),
            avg_shuffle_ms=float(values['avg_shuffle_ms']),
            startup_ms=float(values.get('startup_ms', 0.)),
            reduce_work=int(values.get('reduce_work', 64)),
        )
        curve = reduce_stage_model(model, int(values.get('map_tasks', 64)),
                                   int(values.get('slots', 12)),
                                   int(values.get('max_reducers', 64)))
    except KeyError as err:
        raise ScenarioError("a reduce scenario needs %s" % err)
    except (TypeError, ValueError) as err:
        raise ScenarioError("bad reduce setting: %s" % err)
    logger.info("Fewest-makespan reducer count: %d", best_reducer_count(curve))
    return OrderedDict([('reduce', curve)])


def write_tables(tables, out_dir, name):
    """
    Write each table as `<name>.csv` if there is only one, or as
    `<name>-<table>.csv` otherwise. Returns the paths written.
    """
    ensure_dir(out_dir)
    paths = []
    for table_name, frame in tables.items():
        if len(tables) == 1:
            filename = '%s.csv' % name
        else:
            filename = '%s-%s.csv' % (name, table_name)
        path = os.path.join(out_dir, filename)
        frame.to_csv(path, index=False)
        paths.append(path)
    return paths
