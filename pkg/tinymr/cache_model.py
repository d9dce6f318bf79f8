"""
A cache model for subsampling tasks, standing in for hardware counters.

Tasks are turned into block-access traces (`task_trace`), traces are run
through an LRU cache (`simulate_lru`), and miss rates are turned into an
average memory access time with the AMAT model. `profile_curve` puts these
together to measure misses per instruction as task size grows, which is what
the offline kneepoint search reads.

"Instructions" here are trace accesses: each access stands for one
instruction window, which is all that a per-instruction normalization needs.
"""
import bisect
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from tinymr.workload import (
    RECORD_BYTES, make_rng, select_indices, subsample_count, subsample_rng
)

logger = logging.getLogger(__name__)

DEFAULT_BLOCK_BYTES = 64
# A memory fetch costs 63 more cycles than a hit in the fastest cache.
MEMORY_PENALTY = 63.
PROFILE_REPEATS = 3
PROFILE_STREAM = 11
INFINITE = math.inf


@dataclass
class AccessTrace:
    accesses: np.ndarray
    block_bytes: int = DEFAULT_BLOCK_BYTES

    def __post_init__(self):
        self.accesses = np.asarray(self.accesses, dtype=np.int64)
        if self.block_bytes <= 0:
            raise ValueError("block_bytes must be positive")

    def __len__(self):
        return len(self.accesses)

    def footprint(self):
        "The number of distinct blocks the trace touches."
        return len(np.unique(self.accesses))


@dataclass
class CacheConfig:
    """
    A cache hierarchy, measured in blocks. `capacity_blocks` is the smallest
    (fastest) level. `levels`, if given, lists every level as
    (capacity_blocks, hit_cycles), fastest first.
    """
    capacity_blocks: int
    levels: list = None
    block_bytes: int = DEFAULT_BLOCK_BYTES
    memory_penalty: float = MEMORY_PENALTY

    def __post_init__(self):
        if self.capacity_blocks < 1:
            raise ValueError("capacity_blocks must be at least 1")
        if self.levels is not None:
            self.levels = [(int(cap), float(hit)) for cap, hit in self.levels]
            if not self.levels or self.levels[0][0] != self.capacity_blocks:
                raise ValueError("The first level must have capacity_blocks")
            for (cap1, hit1), (cap2, hit2) in zip(self.levels, self.levels[1:]):
                if cap2 <= cap1 or hit2 <= hit1:
                    raise ValueError(
                        "Cache levels must grow strictly in capacity and hit time"
                    )

    def all_levels(self):
        if self.levels is None:
            return [(self.capacity_blocks, 1.)]
        return list(self.levels)

    @classmethod
    def from_bytes(cls, level_bytes, block_bytes=DEFAULT_BLOCK_BYTES,
                   hit_cycles=None, memory_penalty=MEMORY_PENALTY):
        """
        Make a config from cache sizes in bytes, smallest first.
        """
        capacities = [max(1, int(size) // block_bytes) for size in level_bytes]
        if len(capacities) == 1:
            return cls(capacities[0], None, block_bytes, memory_penalty)
        if hit_cycles is None:
            hit_cycles = [1. + 9. * i for i in range(len(capacities))]
        return cls(capacities[0], list(zip(capacities, hit_cycles)),
                   block_bytes, memory_penalty)


@dataclass
class AmatModel:
    fastest_hit_cycles: float = 1.
    level_miss_penalties: list = field(default_factory=lambda: [MEMORY_PENALTY])

    def __post_init__(self):
        if any(penalty <= 0 for penalty in self.level_miss_penalties):
            raise ValueError("Miss penalties must be positive")

    @classmethod
    def from_cache_config(cls, config):
        """
        Normalize the fastest hit to 1 cycle. A miss at one level costs the
        next level's hit time; a miss at the last level costs a memory fetch.
        """
        levels = config.all_levels()
        base = levels[0][1]
        penalties = [hit / base for _cap, hit in levels[1:]]
        penalties.append(config.memory_penalty)
        return cls(1., penalties)


@dataclass
class MissRateCurve:
    """
    Measured (task_size_bytes, misses_per_instruction) points, in order of
    increasing size. `flagged` holds the sizes that were smaller than any
    sample, and so were measured with a single sample.
    """
    points: list
    flagged: set = field(default_factory=set)

    def __post_init__(self):
        self.points = [(int(size), float(rate)) for size, rate in self.points]
        sizes = self.sizes
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("Curve sizes must be strictly increasing")
        if any(rate < 0 for _size, rate in self.points):
            raise ValueError("Miss rates can't be negative")

    @property
    def sizes(self):
        return [size for size, _rate in self.points]

    @property
    def rates(self):
        return [rate for _size, rate in self.points]

    def measure(self, size):
        """
        Look up a measured point, in the form `find_kneepoint` wants:
        (miss_rate, actual_size).
        """
        index = bisect.bisect_left(self.sizes, size)
        if index == len(self.points) or self.points[index][0] != size:
            raise KeyError("No measurement at task size %r" % size)
        found_size, rate = self.points[index]
        return (rate, found_size)

    def to_frame(self):
        return pd.DataFrame(self.points,
                            columns=['task_size_bytes', 'misses_per_instruction'])

    def save_csv(self, filename):
        self.to_frame().to_csv(filename, index=False, float_format='%.10g')

    @classmethod
    def load_csv(cls, filename):
        frame = pd.read_csv(filename)
        return cls(list(zip(frame['task_size_bytes'], frame['misses_per_instruction'])))


class _Fenwick(object):
    """
    A binary indexed tree of counts, for prefix sums in O(log n).
    """
    def __init__(self, size):
        self.tree = [0] * (size + 1)

    def add(self, index, delta):
        index += 1
        tree = self.tree
        while index < len(tree):
            tree[index] += delta
            index += index & -index

    def prefix(self, index):
        "Sum of entries 0 through index - 1."
        total = 0
        tree = self.tree
        while index > 0:
            total += tree[index]
            index -= index & -index
        return total


def stack_distances(trace):
    """
    For each access, count the distinct blocks touched since the previous
    access to the same block. The first access to a block has infinite
    distance. Position i of the result belongs to access i.

    >>> stack_distances(AccessTrace([1, 2, 1])).tolist()
    [inf, inf, 1.0]
    >>> stack_distances(AccessTrace([5, 5, 5])).tolist()
    [inf, 0.0, 0.0]
    """
    accesses = trace.accesses.tolist()
    distances = np.full(len(accesses), INFINITE)
    # A 1 at position j means access j is the latest access to its block.
    latest = _Fenwick(len(accesses))
    last_seen = {}
    for i, block in enumerate(accesses):
        previous = last_seen.get(block)
        if previous is not None:
            distances[i] = latest.prefix(i) - latest.prefix(previous + 1)
            latest.add(previous, -1)
        latest.add(i, 1)
        last_seen[block] = i
    return distances


def misses_from_distances(distances, capacity_blocks):
    "An access misses an LRU cache iff its stack distance is at least its capacity."
    return np.asarray(distances) >= capacity_blocks


def lru_misses(trace, capacity_blocks):
    """
    Run the trace through an explicit LRU list of `capacity_blocks` entries,
    and return a boolean array marking the accesses that missed.
    """
    if capacity_blocks < 1:
        raise ValueError("capacity_blocks must be at least 1")
    cache = OrderedDict()
    accesses = trace.accesses.tolist()
    missed = np.zeros(len(accesses), dtype=bool)
    for i, block in enumerate(accesses):
        if block in cache:
            cache.move_to_end(block)
        else:
            missed[i] = True
            cache[block] = None
            if len(cache) > capacity_blocks:
                cache.popitem(last=False)
    return missed


def simulate_lru(trace, config):
    """
    The fraction of the trace's accesses that miss the smallest cache level
    in `config` (or a plain capacity, given as an int).
    """
    capacity = config if isinstance(config, int) else config.capacity_blocks
    if len(trace) == 0:
        raise ValueError("Can't simulate an empty trace")
    return float(lru_misses(trace, capacity).mean())


def miss_ratio_curve(trace, capacities):
    """
    Miss rates for many capacities at once, from one pass of stack distances.
    By the inclusion property of LRU, these never increase with capacity.
    """
    if len(trace) == 0:
        raise ValueError("Can't simulate an empty trace")
    distances = stack_distances(trace)
    return [float((distances >= capacity).mean()) for capacity in capacities]


def level_global_miss_rates(trace, config):
    """
    The fraction of all accesses that miss each level of the hierarchy.
    """
    if len(trace) == 0:
        raise ValueError("Can't simulate an empty trace")
    return [float(lru_misses(trace, capacity).mean())
            for capacity, _hit in config.all_levels()]


def level_miss_rates(trace, config):
    """
    Local miss rates: of the accesses that reach a level, the fraction that
    miss it. These are what `amat` compounds.
    """
    global_rates = level_global_miss_rates(trace, config)
    local = []
    reaching = 1.
    for rate in global_rates:
        local.append(rate / reaching if reaching > 0 else 0.)
        reaching = rate
    return local


def amat(model, miss_rates_per_level):
    """
    Average memory access time, in cycles: the fastest hit time, plus each
    level's miss penalty weighted by the fraction of accesses that miss
    every level down to it.

    >>> amat(AmatModel(1., [63.]), [1.])
    64.0
    >>> amat(AmatModel(1., [10., 63.]), [0.5, 0.5])
    21.75
    """
    if len(miss_rates_per_level) != len(model.level_miss_penalties):
        raise ValueError(
            "Got %d miss rates for %d cache levels"
            % (len(miss_rates_per_level), len(model.level_miss_penalties))
        )
    total = model.fastest_hit_cycles
    reaching = 1.
    for rate, penalty in zip(miss_rates_per_level, model.level_miss_penalties):
        reaching *= rate
        total += reaching * penalty
    return total


def _block_of(record_indices, block_bytes):
    return (record_indices * RECORD_BYTES) // block_bytes


def task_trace(task_samples, spec, block_bytes=DEFAULT_BLOCK_BYTES, repetitions=None):
    """
    Synthesize the block accesses a subsampling map task makes.

    The task's samples are laid out one after another in memory. For each
    repetition, each sample is walked in order: every record the subsample
    uses costs one sequential access (a cursor moving through the sample)
    followed by one random access to the selected record. Record selection
    uses the same generator as `workload.subsample`. When the subsample takes
    every record, the two accesses coincide, and the trace is a plain
    sequential walk.

    `repetitions` limits how many of the subsample's repetitions are traced.
    """
    if not task_samples:
        raise ValueError("A task needs at least one sample")
    if repetitions is None:
        repetitions = spec.repetitions
    pieces = []
    bases = []
    base = 0
    for sample in task_samples:
        bases.append(base)
        base += -(-sample.size_bytes // block_bytes)

    for repetition in range(repetitions):
        for sample, base in zip(task_samples, bases):
            n = sample.n_records
            k = subsample_count(n, spec.fraction)
            if k == n:
                pieces.append(base + _block_of(np.arange(n), block_bytes))
                continue
            rng = subsample_rng(spec, sample.id, repetition)
            selected = select_indices(n, spec.fraction, rng)
            cursor = (np.arange(k) * n) // k
            interleaved = np.empty(2 * k, dtype=np.int64)
            interleaved[0::2] = base + _block_of(cursor, block_bytes)
            interleaved[1::2] = base + _block_of(selected, block_bytes)
            pieces.append(interleaved)
    return AccessTrace(np.concatenate(pieces), block_bytes)


def misses_per_instruction(trace, config, level=0):
    capacity = config.all_levels()[level][0]
    return float(lru_misses(trace, capacity).sum()) / len(trace)


def build_profile_task(dataset, size, rng):
    """
    Pick samples in a random order, keeping each one that still fits in
    `size` bytes. If no sample fits, the task is the first sample picked,
    and the second return value is True to flag it.
    """
    order = rng.permutation(len(dataset))
    chosen = []
    total = 0
    for index in order:
        sample = dataset.samples[index]
        if total + sample.size_bytes <= size:
            chosen.append(sample)
            total += sample.size_bytes
    if not chosen:
        return [dataset.samples[order[0]]], True
    return chosen, False


def measure_task_size(dataset, spec, size, config, repeats=PROFILE_REPEATS,
                      trace_repetitions=None, level=0):
    """
    Measure misses per instruction for tasks of about `size` bytes: the
    median over `repeats` tasks of randomly chosen samples, run through
    cache level `level` (the smallest by default).

    Returns (rate, flagged, tasks), where `flagged` says a task had to be a
    single sample larger than `size`, and `tasks` are the sample lists that
    were measured.
    """
    measurements = []
    tasks = []
    flagged = False
    for repeat in range(repeats):
        rng = make_rng(spec.seed, PROFILE_STREAM, size, repeat)
        task, single = build_profile_task(dataset, size, rng)
        flagged = flagged or single
        trace = task_trace(task, spec, config.block_bytes, trace_repetitions)
        measurements.append(misses_per_instruction(trace, config, level))
        tasks.append(task)
    rate = float(np.median(measurements))
    logger.info("task size %d: %.6f misses per instruction", size, rate)
    return rate, flagged, tasks


def profile_curve(dataset, spec, sizes, config, repeats=PROFILE_REPEATS,
                  trace_repetitions=None, level=0):
    """
    Measure the whole miss-rate curve, one `measure_task_size` per size.
    """
    sizes = [int(size) for size in sizes]
    if len(sizes) < 2:
        raise ValueError("A curve needs at least 2 sizes")
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("Task sizes must be increasing")
    points = []
    flagged = set()
    for size in sizes:
        rate, single, _tasks = measure_task_size(dataset, spec, size, config, repeats,
                                                 trace_repetitions, level)
        if single:
            flagged.add(size)
        points.append((size, rate))
    return MissRateCurve(points, flagged)
