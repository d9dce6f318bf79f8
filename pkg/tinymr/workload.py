"""
Samples, datasets, and the subsampling map and reduce functions.

A sample is every record that shares one key -- one family's genotypes, or
one movie's ratings. Records have a fixed 16-byte layout (an 8-byte key and
an 8-byte value, little-endian), so a sample's size in bytes and its record
count determine each other exactly.

Randomness is always drawn from a generator derived from integers that
identify the work being done, so that re-running a map task anywhere
produces the same answer. Job-level recovery depends on this.
"""
import itertools
import logging
import math
import os
from collections import namedtuple
from dataclasses import dataclass, field
from functools import partial
from operator import attrgetter

import numpy as np
from scipy import stats

logger = logging.getLogger(__name__)

RECORD_DTYPE = np.dtype([('key', '<u8'), ('value', '<f8')])
RECORD_BYTES = RECORD_DTYPE.itemsize
MASK64 = (1 << 64) - 1

# With this log-normal sigma, about 1% of samples are more than 5x the mean.
HEAVY_TAIL_SIGMA = 0.846
# Regular samples are clipped here so the injected outliers stay the largest.
HEAVY_TAIL_CLIP = 6.0
OUTLIER_FACTORS = (15, 7)

# Stream tags keep generators for different purposes independent.
SIZES_STREAM = 1
RECORDS_STREAM = 2
PLACEMENT_STREAM = 3

ManifestEntry = namedtuple('ManifestEntry', ['id', 'size_bytes', 'locator'])


def make_rng(*keys):
    """
    Get a NumPy PCG64 generator whose state is derived from a tuple of
    integers, such as (seed, sample id, repetition). Each key is reduced to
    64 bits and hashed together by NumPy's SeedSequence, so nearby keys give
    unrelated streams.
    """
    entropy = [int(key) & MASK64 for key in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class Sample(object):
    """
    One sample: an id and an ordered array of records.

    The records can be given directly, or produced on demand by a `loader`
    function -- synthetic datasets regenerate their records from a seed, and
    datasets on disk read them from a payload file. Either way,
    `size_bytes` is the length of the serialized records.
    """
    __slots__ = ('id', 'size_bytes', '_records', '_loader')

    def __init__(self, id, records=None, size_bytes=None, loader=None):
        if records is None and loader is None:
            raise ValueError("A sample needs either records or a loader")
        self.id = int(id)
        self._records = None
        self._loader = loader
        if records is not None:
            records = np.asarray(records, dtype=RECORD_DTYPE)
            self._records = records
            size_bytes = records.nbytes
        if size_bytes is None:
            raise ValueError("A lazily loaded sample needs its size_bytes")
        self.size_bytes = int(size_bytes)

    @property
    def n_records(self):
        return self.size_bytes // RECORD_BYTES

    @property
    def records(self):
        if self._records is not None:
            return self._records
        records = self._loader()
        if records.nbytes != self.size_bytes:
            raise ValueError(
                "Sample %d loaded %d bytes, but its manifest says %d"
                % (self.id, records.nbytes, self.size_bytes)
            )
        return records

    def payload(self):
        return self.records.tobytes()

    @classmethod
    def from_payload(cls, sample_id, payload):
        records = np.frombuffer(payload, dtype=RECORD_DTYPE)
        return cls(sample_id, records=records)

    def __repr__(self):
        return 'Sample(id=%d, size_bytes=%d)' % (self.id, self.size_bytes)


class Dataset(object):
    """
    An ordered list of samples and its manifest.

    Manifest entries are (id, size_bytes, locator) triples. The locator says
    where a sample's payload lives; for synthetic datasets it's a
    `synthetic:` pseudo-path that names the generator.
    """

    def __init__(self, samples, locators=None):
        self.samples = list(samples)
        if locators is None:
            locators = ['synthetic:%d' % sample.id for sample in self.samples]
        if len(locators) != len(self.samples):
            raise ValueError("Need one locator per sample")
        self._by_id = {}
        for sample in self.samples:
            if sample.id in self._by_id:
                raise ValueError("Duplicate sample id %d" % sample.id)
            self._by_id[sample.id] = sample
        self.manifest = [
            ManifestEntry(sample.id, sample.size_bytes, locator)
            for sample, locator in zip(self.samples, locators)
        ]
        self.total_bytes = sum(sample.size_bytes for sample in self.samples)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __contains__(self, sample_id):
        return sample_id in self._by_id

    def sample(self, sample_id):
        return self._by_id[sample_id]

    @property
    def sample_ids(self):
        return [sample.id for sample in self.samples]

    @property
    def avg_sample_size(self):
        """
        The average sample size from the manifest, AVG_SAMPLE_SIZE in the
        task sizing rule.
        """
        if not self.samples:
            return 0.
        return self.total_bytes / len(self.samples)

    @property
    def max_sample_size(self):
        return max(sample.size_bytes for sample in self.samples)

    def subset(self, sample_ids):
        sample_ids = list(sample_ids)
        locators = {entry.id: entry.locator for entry in self.manifest}
        return Dataset(
            [self._by_id[sid] for sid in sample_ids],
            [locators[sid] for sid in sample_ids]
        )

    def sizes(self):
        return {sample.id: sample.size_bytes for sample in self.samples}

    @classmethod
    def from_sizes(cls, sizes, seed=0, first_id=0):
        """
        Build a synthetic dataset whose samples have exactly the given sizes
        (rounded down to whole records, minimum one record).
        """
        samples = []
        for offset, size in enumerate(sizes):
            sample_id = first_id + offset
            n_records = max(1, int(size) // RECORD_BYTES)
            loader = partial(_normal_records, seed, sample_id, n_records)
            samples.append(Sample(sample_id, size_bytes=n_records * RECORD_BYTES,
                                  loader=loader))
        return cls(samples)


@dataclass(frozen=True)
class SubsampleSpec:
    """
    How each sample is subsampled: `fraction` of its records are drawn,
    `repetitions` times, for a target `confidence` level, all derived from
    the root `seed`.
    """
    fraction: float = 0.1
    repetitions: int = 30
    confidence: float = 0.98
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1], got %r" % self.fraction)
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1, got %r" % self.repetitions)
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must be in (0, 1), got %r" % self.confidence)

    def to_dict(self):
        return {
            'fraction': self.fraction, 'repetitions': self.repetitions,
            'confidence': self.confidence, 'seed': self.seed
        }

    @classmethod
    def from_dict(cls, values):
        return cls(
            fraction=float(values.get('fraction', 0.1)),
            repetitions=int(values.get('repetitions', 30)),
            confidence=float(values.get('confidence', 0.98)),
            seed=int(values.get('seed', 0))
        )


@dataclass(frozen=True)
class IntermediateResult:
    sample_id: int
    repetition_index: int
    statistic: float
    count: int

    def to_list(self):
        return [self.sample_id, self.repetition_index, self.statistic, self.count]

    @classmethod
    def from_list(cls, values):
        sample_id, repetition_index, statistic, count = values
        return cls(int(sample_id), int(repetition_index), float(statistic), int(count))


@dataclass(frozen=True)
class JobStatistic:
    """
    The combined output of a job: the count-weighted mean statistic for each
    sample, and the count-weighted mean over everything.
    """
    aggregate: float
    per_sample: dict
    count: int
    parts: tuple = field(repr=False)


def subsample_count(n_records, fraction):
    """
    How many records a subsample draws: ceil(fraction * n), rounded first
    so that floating-point noise doesn't add a record.

    >>> subsample_count(10000, 0.1)
    1000
    >>> subsample_count(3, 0.5)
    2
    >>> subsample_count(7, 1.0)
    7
    """
    return min(n_records, max(1, math.ceil(round(fraction * n_records, 9))))


def select_indices(n_records, fraction, rng):
    """
    Choose which record indices a subsample uses: `subsample_count` of them,
    uniformly without replacement, in the order they are drawn. Taking every
    record keeps them in storage order.
    """
    k = subsample_count(n_records, fraction)
    if k == n_records:
        return np.arange(n_records)
    return rng.choice(n_records, size=k, replace=False)


def subsample_rng(spec, sample_id, repetition):
    return make_rng(spec.seed, sample_id, repetition)


def subsample_values(sample, spec, repetition):
    """
    Return the values of the records that one repetition of a subsample
    selects.
    """
    if not 0 <= repetition < spec.repetitions:
        raise ValueError(
            "repetition %r is outside 0..%d" % (repetition, spec.repetitions - 1)
        )
    records = sample.records
    if len(records) == 0:
        raise ValueError("empty sample")
    rng = subsample_rng(spec, sample.id, repetition)
    indices = select_indices(len(records), spec.fraction, rng)
    return records['value'][indices]


def subsample(sample, spec, repetition):
    """
    The map function: draw one subsample of a sample and compute its mean.
    """
    values = subsample_values(sample, spec, repetition)
    return IntermediateResult(
        sample_id=sample.id,
        repetition_index=repetition,
        statistic=float(values.mean()),
        count=len(values)
    )


def _weighted_mean(parts):
    if len(parts) == 1:
        return parts[0].statistic
    total = sum(part.count for part in parts)
    return math.fsum(part.statistic * part.count for part in parts) / total


def reduce_combine(parts):
    """
    The reduce function. Parts are put in a canonical order, by sample id
    and then repetition, before anything is added up, so the result doesn't
    depend on the order they arrived in.
    """
    if not parts:
        raise ValueError("nothing to reduce")
    ordered = tuple(sorted(parts, key=attrgetter('sample_id', 'repetition_index')))
    per_sample = {}
    for sample_id, group in itertools.groupby(ordered, key=attrgetter('sample_id')):
        per_sample[sample_id] = _weighted_mean(list(group))
    return JobStatistic(
        aggregate=_weighted_mean(ordered),
        per_sample=per_sample,
        count=sum(part.count for part in ordered),
        parts=ordered
    )


def merge_statistics(statistics):
    """
    Combine the results of reducing separate groups of parts. This is the
    same as reducing all the parts at once.
    """
    parts = list(itertools.chain.from_iterable(stat.parts for stat in statistics))
    return reduce_combine(parts)


def analytic_interval(sample, spec):
    """
    The interval that a subsample mean falls in with probability
    `spec.confidence`, computed from the whole sample: the exhaustive mean,
    plus or minus a normal quantile times the standard error of a mean drawn
    without replacement.
    """
    values = sample.records['value']
    n = len(values)
    if n == 0:
        raise ValueError("empty sample")
    k = subsample_count(n, spec.fraction)
    mean = float(values.mean())
    if k == n or n == 1:
        return (mean, mean)
    sigma = float(values.std())
    fpc = math.sqrt((n - k) / (n - 1))
    z = stats.norm.ppf(0.5 + spec.confidence / 2)
    half_width = z * sigma / math.sqrt(k) * fpc
    return (mean - half_width, mean + half_width)


def confidence_interval(values, confidence, population_size=None):
    """
    A Student-t confidence interval for the mean of one subsample, with a
    finite-population correction when the population size is known.
    """
    values = np.asarray(values, dtype='f8')
    k = len(values)
    mean = float(values.mean())
    if k < 2:
        return (mean, mean)
    stderr = float(values.std(ddof=1)) / math.sqrt(k)
    if population_size is not None and population_size > 1:
        stderr *= math.sqrt(max(0, population_size - k) / (population_size - 1))
    t = stats.t.ppf(0.5 + confidence / 2, k - 1)
    return (mean - t * stderr, mean + t * stderr)


def coverage_trial(sample, spec, trials):
    """
    Run `trials` repetitions of subsampling on one sample and return the
    fraction of subsample means that land inside the analytic interval.
    """
    if trials > spec.repetitions:
        spec = SubsampleSpec(spec.fraction, trials, spec.confidence, spec.seed)
    low, high = analytic_interval(sample, spec)
    hits = 0
    for repetition in range(trials):
        statistic = subsample(sample, spec, repetition).statistic
        if low <= statistic <= high:
            hits += 1
    return hits / trials


def _normal_records(seed, sample_id, n_records):
    rng = make_rng(seed, RECORDS_STREAM, sample_id)
    center = rng.normal(0.0, 10.0)
    records = np.empty(n_records, dtype=RECORD_DTYPE)
    records['key'] = np.arange(n_records, dtype='<u8')
    records['value'] = rng.normal(center, 1.0 + abs(center) / 10, n_records)
    return records


def _rating_records(seed, sample_id, n_records):
    rng = make_rng(seed, RECORDS_STREAM, sample_id)
    # Each movie has its own rating tendencies
    weights = rng.dirichlet(np.ones(5) * 2)
    days = np.sort(rng.integers(0, 2243, n_records)).astype('<u8')
    users = rng.integers(1, 2649430, n_records).astype('<u8')
    records = np.empty(n_records, dtype=RECORD_DTYPE)
    records['key'] = (days << np.uint64(32)) | users
    records['value'] = rng.choice(5, size=n_records, p=weights) + 1.0
    return records


def generate_heavy_tailed_dataset(n_samples, mean_size_bytes, seed, with_outliers=True):
    """
    Generate a dataset shaped like the genetic linkage workload: log-normal
    sample sizes around `mean_size_bytes`, plus two outlier samples of
    exactly 15x and 7x the mean.

    With `with_outliers=False`, the outliers are left out and every sample
    follows the log-normal law. Regular sizes come from the same stream
    either way.
    """
    if n_samples < 2:
        raise ValueError("A heavy-tailed dataset needs at least 2 samples, "
                         "to place both outliers")
    mean_records = max(1, int(mean_size_bytes) // RECORD_BYTES)
    n_outliers = len(OUTLIER_FACTORS) if with_outliers else 0
    n_regular = n_samples - n_outliers

    rng = make_rng(seed, SIZES_STREAM)
    mu = math.log(mean_records) - HEAVY_TAIL_SIGMA ** 2 / 2
    drawn = rng.lognormal(mu, HEAVY_TAIL_SIGMA, n_samples)
    drawn = np.clip(np.round(drawn), 1, HEAVY_TAIL_CLIP * mean_records)
    record_counts = [int(count) for count in drawn[:n_regular]]

    if with_outliers:
        placement = make_rng(seed, PLACEMENT_STREAM)
        positions = sorted(placement.choice(n_samples, size=n_outliers, replace=False))
        for position, factor in zip(positions, OUTLIER_FACTORS):
            record_counts.insert(position, factor * mean_records)

    samples = []
    for sample_id, n_records in enumerate(record_counts):
        loader = partial(_normal_records, seed, sample_id, n_records)
        samples.append(Sample(sample_id, size_bytes=n_records * RECORD_BYTES,
                              loader=loader))
    dataset = Dataset(samples)
    logger.info("Generated %d heavy-tailed samples, %d bytes total",
                len(dataset), dataset.total_bytes)
    return dataset


def generate_ratings_dataset(n_movies, bytes_per_movie, seed):
    """
    Generate a dataset shaped like the movie-ratings workload: one sample per
    movie, each holding (date, user id, rating) tuples and roughly
    `bytes_per_movie` bytes (within 10%).

    Each record's key packs the day number into its high 32 bits and the
    user id into its low 32 bits; the value is the rating, 1 to 5.
    """
    if n_movies < 1:
        raise ValueError("Need at least one movie, got %r" % n_movies)
    if bytes_per_movie < RECORD_BYTES:
        raise ValueError("bytes_per_movie must hold at least one record")
    rng = make_rng(seed, SIZES_STREAM)
    base = bytes_per_movie / RECORD_BYTES
    jitter = rng.uniform(0.9, 1.1, n_movies)
    samples = []
    for sample_id in range(n_movies):
        n_records = max(1, int(round(base * jitter[sample_id])))
        loader = partial(_rating_records, seed, sample_id, n_records)
        samples.append(Sample(sample_id, size_bytes=n_records * RECORD_BYTES,
                              loader=loader))
    return Dataset(samples)


def scale_dataset(dataset, factor):
    """
    Grow a dataset by repeating its samples `factor` times under fresh ids.
    Each copy reads the same records as the sample it copies.
    """
    stride = max(dataset.sample_ids) + 1
    samples = []
    for copy in range(factor):
        for sample in dataset:
            samples.append(Sample(
                sample.id + copy * stride, size_bytes=sample.size_bytes,
                loader=partial(_records_of, sample)
            ))
    return Dataset(samples)


def _records_of(sample):
    return sample.records


MANIFEST_NAME = 'manifest.csv'


def save_dataset(dataset, directory):
    """
    Write a dataset to a directory: a manifest with one `id,size_bytes,locator`
    line per sample, and a flat binary payload file for each sample.
    """
    os.makedirs(os.path.join(directory, 'samples'), exist_ok=True)
    with open(os.path.join(directory, MANIFEST_NAME), 'w', encoding='ascii',
              newline='\n') as manifest:
        for sample in dataset:
            locator = 'samples/%d.bin' % sample.id
            with open(os.path.join(directory, locator), 'wb') as out:
                out.write(sample.payload())
            manifest.write('%d,%d,%s\n' % (sample.id, sample.size_bytes, locator))


def read_manifest(filename):
    entries = []
    with open(filename, encoding='ascii') as file:
        for lineno, line in enumerate(file, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                sample_id, size_bytes, locator = line.split(',', 2)
                entries.append(ManifestEntry(int(sample_id), int(size_bytes), locator))
            except ValueError:
                raise IOError("%s line %d: malformed manifest entry %r"
                              % (filename, lineno, line))
    return entries


def _read_payload(path):
    with open(path, 'rb') as file:
        return np.frombuffer(file.read(), dtype=RECORD_DTYPE)


def load_dataset(directory):
    """
    Read a dataset written by `save_dataset`. Payloads aren't read until a
    sample's records are needed.
    """
    manifest_path = directory
    if os.path.isdir(directory):
        manifest_path = os.path.join(directory, MANIFEST_NAME)
    base = os.path.dirname(manifest_path)
    entries = read_manifest(manifest_path)
    samples = [
        Sample(entry.id, size_bytes=entry.size_bytes,
               loader=partial(_read_payload, os.path.join(base, entry.locator)))
        for entry in entries
    ]
    return Dataset(samples, [entry.locator for entry in entries])
