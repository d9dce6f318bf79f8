"""
Named simulator setups: workload-shaped presets, and platform overhead
profiles that stand in for heavier map-reduce platforms.
"""
import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass

import pandas as pd

from tinymr.runtime.jobs import JobSpec
from tinymr.sim.harness import Simulation, SimConfig, TaskCostModel, default_cache, profile_offline
from tinymr.workload import (
    OUTLIER_FACTORS, Dataset, SubsampleSpec, generate_ratings_dataset, scale_dataset
)

logger = logging.getLogger(__name__)

# name -> (startup relative to the baseline, per-task runtime tax)
PLATFORM_OVERHEADS = OrderedDict([
    ('bts', (1.0, 0.0)),
    ('jlh', (3.0, 0.0)),
    ('vh', (4.0, 0.20)),
])

EAGLET_SAMPLE_BYTES = 2048
EAGLET_SAMPLES = 64
RATINGS_MOVIE_BYTES = 5120
RATINGS_MOVIES = 48
# The low-confidence ratings workload draws this many times fewer ratings
LOW_CONFIDENCE_SHRINK = 100
# Calibrated so a cache-resident sample costs a few ms per repetition set
PRESET_CYCLE_SCALE = 1e-3


class ScenarioError(ValueError):
    "A scenario or preset couldn't be understood."
    pass


@dataclass
class Preset:
    name: str
    spec: JobSpec
    sim: SimConfig


def preset_sim(name, n_workers=4, seed=0):
    return SimConfig(
        n_workers=n_workers, startup_ms=20., task_overhead_ms=2.5, dispatch_ms=0.5,
        cache=default_cache(), cycle_scale=PRESET_CYCLE_SCALE,
        fetch_shift_ms=0.05, fetch_mean_ms=0.05, seed=seed, name=name
    )


def eaglet_preset(scale=1, seed=0, with_outliers=True, n_workers=4):
    """
    A workload shaped like genetic linkage analysis: many equal samples
    that each fit in the smallest cache level, subsampled heavily and
    repeatedly. With outliers, two samples of 15x and 7x the usual size are
    appended.
    """
    sizes = [EAGLET_SAMPLE_BYTES] * (EAGLET_SAMPLES * scale)
    if with_outliers:
        sizes += [factor * EAGLET_SAMPLE_BYTES for factor in OUTLIER_FACTORS]
    dataset = Dataset.from_sizes(sizes, seed)
    subsample = SubsampleSpec(fraction=0.5, repetitions=10, seed=seed)
    spec = JobSpec(dataset, subsample, n_workers=n_workers, seed=seed)
    return Preset('eaglet', spec, preset_sim('eaglet', n_workers, seed))


def ratings_preset(scale=1, seed=0, n_workers=4, low_confidence=False):
    """
    A workload shaped like the movie-ratings analysis: one sample per movie,
    each a little too big to share the smallest cache level with another.

    The high-confidence workload aims for a 98% confidence interval. The
    low-confidence one subsamples the same movies with a hundred times fewer
    ratings, so each movie leaves a much smaller footprint in the cache.
    """
    name = 'ratings'
    fraction, confidence = 0.25, 0.98
    if low_confidence:
        name = 'ratings-low'
        fraction, confidence = fraction / LOW_CONFIDENCE_SHRINK, 0.8
    dataset = generate_ratings_dataset(RATINGS_MOVIES * scale, RATINGS_MOVIE_BYTES, seed)
    subsample = SubsampleSpec(fraction=fraction, repetitions=10, confidence=confidence,
                              seed=seed)
    spec = JobSpec(dataset, subsample, n_workers=n_workers, seed=seed)
    sim = dataclasses.replace(preset_sim(name, n_workers, seed), task_overhead_ms=1.)
    return Preset(name, spec, sim)


def low_confidence_ratings_preset(scale=1, seed=0, n_workers=4):
    return ratings_preset(scale, seed, n_workers, low_confidence=True)


PRESETS = {
    'eaglet': eaglet_preset,
    'ratings': ratings_preset,
    'ratings-low': low_confidence_ratings_preset,
}


def get_preset(name, **kwargs):
    if name not in PRESETS:
        raise ScenarioError("unknown preset %r (choose from %s)"
                            % (name, ', '.join(sorted(PRESETS))))
    return PRESETS[name](**kwargs)


def platform_overhead_profiles(base=None):
    """
    SimConfigs for each platform in PLATFORM_OVERHEADS, derived from a
    baseline config by scaling its startup time and adding the runtime tax.
    """
    if base is None:
        base = preset_sim('bts')
    profiles = OrderedDict()
    for name, (startup_ratio, tax) in PLATFORM_OVERHEADS.items():
        profiles[name] = dataclasses.replace(
            base, startup_ms=base.startup_ms * startup_ratio,
            runtime_tax=base.runtime_tax + tax, name=name
        )
    return profiles


def platform_table():
    return pd.DataFrame(
        [(name, ratio, tax) for name, (ratio, tax) in PLATFORM_OVERHEADS.items()],
        columns=['platform', 'startup_ratio', 'runtime_tax']
    )


def compare_platforms(spec, sim, scales=(1, 8, 64)):
    """
    Simulate growing versions of a job on every platform profile. Each job
    size is profiled once and the same tasks run on every platform.
    """
    profiles = platform_overhead_profiles(sim)
    rows = []
    for scale in scales:
        dataset = scale_dataset(spec.dataset, scale) if scale > 1 else spec.dataset
        scaled = dataclasses.replace(spec, dataset=dataset, report=None)
        scaled.report, _offline = profile_offline(scaled, sim)
        tasks = scaled.tasks()
        cost = TaskCostModel(dataset, scaled.subsample, sim)
        baseline = None
        for name, profile in profiles.items():
            # Cached cycle counts carry over; overheads come from the profile
            cost.sim = profile
            result = Simulation(scaled, profile, tasks, cost).run()
            if baseline is None:
                baseline = result.makespan_ms
            row = {'platform': name, 'scale': scale, 'job_bytes': dataset.total_bytes}
            row.update(result.to_row())
            row['relative_makespan'] = result.makespan_ms / baseline
            rows.append(row)
    logger.info("Compared %d platforms over %d job sizes", len(profiles), len(scales))
    return pd.DataFrame(rows)
