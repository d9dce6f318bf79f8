"""
Slow checks of the cache model and of task sizing at benchmark scale. Run
them with `pytest tests/acceptance`.
"""
import numpy as np

from tinymr.cache_model import (
    AccessTrace, CacheConfig, lru_misses, misses_from_distances, misses_per_instruction,
    stack_distances, task_trace
)
from tinymr.sim.harness import compare_configurations, profile_offline, simulate_job
from tinymr.sim.presets import get_preset
from tinymr.sizing import candidate_sizes, find_kneepoint
from tinymr.workload import Dataset, SubsampleSpec, make_rng


def test_stack_distances_agree_with_lru_lists():
    rng = make_rng(2024, 1)
    for _ in range(200):
        length = int(10 ** rng.uniform(1, 4))
        alphabet = int(rng.integers(1, 513))
        trace = AccessTrace(rng.integers(0, alphabet, length))
        distances = stack_distances(trace)
        for capacity in rng.integers(1, 257, 4):
            capacity = int(capacity)
            assert np.array_equal(misses_from_distances(distances, capacity),
                                  lru_misses(trace, capacity))


def scan_oracle(sizes, rates):
    "The size before the first growth rate larger than the first one."
    growths = [max(0., rates[i] - rates[i - 1]) / (sizes[i] - sizes[i - 1])
               for i in range(1, len(sizes))]
    for i in range(1, len(growths)):
        if growths[i] > growths[0]:
            return sizes[i]
    return sizes[-1]


def random_curve(rng):
    while True:
        sizes = sorted(set(int(x) for x in rng.integers(1, 10 ** 7, int(rng.integers(3, 20)))))
        if len(sizes) >= 3:
            break
    steps = rng.choice([0., 0.0005, 0.003, 0.02, -0.001], size=len(sizes))
    return sizes, [float(x) for x in 0.2 + steps.cumsum()]


def test_kneepoint_search_matches_scan():
    rng = make_rng(2024, 2)
    for _ in range(100):
        sizes, rates = random_curve(rng)
        lookup = dict(zip(sizes, rates))
        report = find_kneepoint(lambda size: (lookup[size], size), sizes)
        assert report.kneepoint_bytes == scan_oracle(sizes, rates)


def test_eaglet_knee_is_where_the_cache_overflows():
    preset = get_preset('eaglet', with_outliers=False)
    report, _offline_ms = profile_offline(preset.spec, preset.sim)
    cache = preset.sim.cache
    sizes = candidate_sizes(preset.spec.dataset, preset.sim.n_workers)
    first_over = next(step for step, size in enumerate(sizes)
                      if size > cache.capacity_blocks * cache.block_bytes)
    assert abs(sizes.index(report.kneepoint_bytes) - first_over) <= 1


def throughput_margins(table):
    throughput = table.set_index('configuration').throughput_bytes_per_s
    return throughput['bts'] / throughput['blt'] - 1, throughput['bts'] / throughput['btt'] - 1


def test_kneepoint_tasks_beat_large_and_tiny_tasks():
    for seed in range(3):
        plain = get_preset('eaglet', seed=seed, with_outliers=False)
        over_large, over_tiny = throughput_margins(compare_configurations(plain.spec, plain.sim))
        assert over_large >= 0.10
        assert over_tiny >= 0.

        skewed = get_preset('eaglet', seed=seed, with_outliers=True)
        skewed_over_large, skewed_over_tiny = throughput_margins(
            compare_configurations(skewed.spec, skewed.sim)
        )
        assert skewed_over_tiny >= 0.
        assert skewed_over_large > over_large


def test_ratings_knee_is_one_movie_per_task():
    preset = get_preset('ratings')
    table = compare_configurations(preset.spec, preset.sim).set_index('configuration')
    assert table.tasks['bts'] == table.tasks['btt'] == len(preset.spec.dataset)
    assert table.makespan_ms['bts'] == table.makespan_ms['btt']
    assert table.relative_throughput['blt'] < 1.


def test_low_confidence_ratings_have_their_own_knee():
    high = get_preset('ratings')
    low = get_preset('ratings-low')
    assert low.spec.dataset.sizes() == high.spec.dataset.sizes()
    assert low.spec.subsample.fraction == high.spec.subsample.fraction / 100
    high_report, _offline = profile_offline(high.spec, high.sim)
    low_report, _offline = profile_offline(low.spec, low.sim)
    assert high_report.samples_per_task == 1
    # Fewer ratings per movie leave room for more movies in the cache
    assert low_report.kneepoint_bytes > high_report.kneepoint_bytes


def test_misses_grow_past_the_smallest_cache():
    config = CacheConfig.from_bytes([8 * 1024, 40 * 1024])
    dataset = Dataset.from_sizes([2048] * 40)
    spec = SubsampleSpec(fraction=0.5, repetitions=20)
    fitting = misses_per_instruction(task_trace(dataset.samples[:1], spec), config)
    ten_times = misses_per_instruction(task_trace(dataset.samples, spec), config)
    assert ten_times >= 10 * fitting


def test_offline_profiling_is_cheap():
    preset = get_preset('eaglet', scale=8, with_outliers=False)
    report = simulate_job(preset.spec, preset.sim)
    assert report.offline_ms > 0
    assert report.offline_ms <= 0.10 * report.makespan_ms
