import random

import numpy as np
import pytest

from tinymr.workload import (
    RECORD_BYTES, RECORD_DTYPE, Dataset, IntermediateResult, Sample, SubsampleSpec,
    analytic_interval, confidence_interval, coverage_trial,
    generate_heavy_tailed_dataset, generate_ratings_dataset, load_dataset,
    merge_statistics, reduce_combine, save_dataset, scale_dataset, subsample,
    subsample_count
)


def small_dataset(n=8, size=1024, seed=0):
    return Dataset.from_sizes([size] * n, seed)


def test_full_subsample_is_exhaustive_mean():
    sample = small_dataset().sample(3)
    spec = SubsampleSpec(fraction=1.0, repetitions=2, seed=12345)
    result = subsample(sample, spec, 1)
    assert result.statistic == float(sample.records['value'].mean())
    assert result.count == sample.n_records


def test_subsample_deterministic():
    sample = small_dataset().sample(0)
    spec = SubsampleSpec(fraction=0.3, repetitions=5, seed=4)
    assert subsample(sample, spec, 2) == subsample(sample, spec, 2)
    assert subsample(sample, spec, 2) != subsample(sample, spec, 3)


def test_subsample_count_bound():
    sample = small_dataset(size=16 * 1000).sample(0)
    spec = SubsampleSpec(fraction=0.1, repetitions=1)
    assert subsample(sample, spec, 0).count == subsample_count(1000, 0.1) == 100


def test_empty_sample():
    sample = Sample(5, records=np.empty(0, dtype=RECORD_DTYPE))
    with pytest.raises(ValueError, match='empty sample'):
        subsample(sample, SubsampleSpec(), 0)


def test_repetition_out_of_range():
    sample = small_dataset().sample(0)
    with pytest.raises(ValueError):
        subsample(sample, SubsampleSpec(repetitions=3), 3)


def test_spec_validation():
    for kwargs in [{'fraction': 0.}, {'fraction': 1.5}, {'repetitions': 0},
                   {'confidence': 1.}]:
        with pytest.raises(ValueError):
            SubsampleSpec(**kwargs)


def test_reduce_single_part():
    part = IntermediateResult(3, 0, 2.5, 10)
    assert reduce_combine([part]).aggregate == 2.5


def test_reduce_empty():
    with pytest.raises(ValueError, match='nothing to reduce'):
        reduce_combine([])


def make_parts(dataset, spec):
    return [subsample(sample, spec, rep)
            for sample in dataset for rep in range(spec.repetitions)]


def test_reduce_order_insensitive():
    spec = SubsampleSpec(fraction=0.2, repetitions=4, seed=1)
    parts = make_parts(small_dataset(), spec)
    shuffled = list(parts)
    random.Random(0).shuffle(shuffled)
    first = reduce_combine(parts)
    second = reduce_combine(shuffled)
    assert first.aggregate == second.aggregate
    assert first.per_sample == second.per_sample


def test_reduce_matches_sequential_fold():
    dataset = small_dataset(n=100, size=512)
    spec = SubsampleSpec(fraction=0.5, repetitions=4, seed=2)
    parts = make_parts(dataset, spec)
    assert len(parts) == 400
    total = sum(part.statistic * part.count for part in parts)
    count = sum(part.count for part in parts)
    assert reduce_combine(parts).aggregate == pytest.approx(total / count, rel=1e-12)


def test_merge_equals_direct():
    spec = SubsampleSpec(fraction=0.2, repetitions=3, seed=5)
    parts = make_parts(small_dataset(), spec)
    groups = [parts[:5], parts[5:11], parts[11:]]
    merged = merge_statistics([reduce_combine(group) for group in groups])
    assert merged.aggregate == reduce_combine(parts).aggregate


def test_heavy_tailed_outliers_only():
    dataset = generate_heavy_tailed_dataset(2, 4096, seed=3)
    assert [sample.size_bytes for sample in dataset] == [15 * 4096, 7 * 4096]


def test_heavy_tailed_too_small():
    with pytest.raises(ValueError):
        generate_heavy_tailed_dataset(1, 4096, seed=0)


def test_heavy_tailed_shape():
    mean = 230 * 1024 * 1024 // 400
    dataset = generate_heavy_tailed_dataset(400, mean, seed=0)
    mean_records = mean // RECORD_BYTES
    assert len(dataset) == 400
    assert dataset.max_sample_size == 15 * mean_records * RECORD_BYTES
    assert 0.8 * 230 * 2 ** 20 <= dataset.total_bytes <= 1.2 * 230 * 2 ** 20


def test_heavy_tailed_deterministic():
    first = generate_heavy_tailed_dataset(50, 2048, seed=9)
    second = generate_heavy_tailed_dataset(50, 2048, seed=9)
    assert first.manifest == second.manifest
    assert first.sample(17).payload() == second.sample(17).payload()


def test_without_outliers():
    dataset = generate_heavy_tailed_dataset(50, 2048, seed=9, with_outliers=False)
    assert dataset.max_sample_size < 15 * 2048


def test_ratings_dataset():
    dataset = generate_ratings_dataset(20, 4096, seed=1)
    assert len(dataset) == 20
    for sample in dataset:
        assert 0.9 * 4096 - RECORD_BYTES <= sample.size_bytes <= 1.1 * 4096 + RECORD_BYTES
    ratings = dataset.sample(4).records['value']
    assert set(np.unique(ratings)) <= {1., 2., 3., 4., 5.}
    assert len(generate_ratings_dataset(1, 4096, seed=1)) == 1
    assert dataset.manifest == generate_ratings_dataset(20, 4096, seed=1).manifest


def test_save_and_load(tmp_path):
    dataset = generate_ratings_dataset(5, 1024, seed=2)
    save_dataset(dataset, str(tmp_path))
    lines = (tmp_path / 'manifest.csv').read_text('ascii').splitlines()
    assert lines[0] == '0,%d,samples/0.bin' % dataset.sample(0).size_bytes
    loaded = load_dataset(str(tmp_path))
    assert loaded.sample_ids == dataset.sample_ids
    assert loaded.sample(3).payload() == dataset.sample(3).payload()


def test_bad_manifest(tmp_path):
    (tmp_path / 'manifest.csv').write_text('0,12\n', 'ascii')
    with pytest.raises(IOError):
        load_dataset(str(tmp_path))


def test_scale_dataset():
    dataset = small_dataset(n=3)
    bigger = scale_dataset(dataset, 4)
    assert len(bigger) == 12
    assert bigger.total_bytes == 4 * dataset.total_bytes
    assert len(set(bigger.sample_ids)) == 12


def test_intervals():
    sample = generate_ratings_dataset(1, 16 * 2000, seed=4).sample(0)
    spec = SubsampleSpec(fraction=1.0, repetitions=1)
    low, high = analytic_interval(sample, spec)
    assert low == high
    low, high = confidence_interval([1., 2., 3., 4.], 0.95)
    assert low < 2.5 < high


def test_coverage():
    sample = small_dataset(n=1, size=16 * 10000, seed=6).sample(0)
    spec = SubsampleSpec(fraction=0.1, repetitions=1, confidence=0.98, seed=11)
    assert coverage_trial(sample, spec, 400) >= 0.95
