"""
Task sizing: find the kneepoint of the task-size to miss-rate curve offline,
then pack samples into kneepoint-sized tasks when a job starts.

The kneepoint is the largest task size before the first increase in the
cache-miss growth rate. Tasks of that size keep their working set in cache
while still spreading per-task overhead over several samples.
"""
import logging
import math
import os
from dataclasses import dataclass, field

from tinymr.cache_model import MissRateCurve
from tinymr.config import parse_config_lines
from tinymr.workload import SubsampleSpec

logger = logging.getLogger(__name__)

SWEEP_FACTOR = 1.5


@dataclass
class KneepointSearchState:
    """
    The two-slot window of the search: the last measurement, and the
    baseline growth rate (None until the first growth rate is known).
    """
    last_miss_rate: float
    last_task_size: int
    max_rate: float = None

    def growth_rate(self, miss_rate, task_size, noise=0.):
        """
        The growth rate from the last measurement to this one. Decreases
        count as zero growth, and so do increases within `noise` (a fraction
        of the last miss rate).
        """
        delta = miss_rate - self.last_miss_rate
        if delta <= noise * self.last_miss_rate:
            delta = 0.
        return delta / (task_size - self.last_task_size)

    def advance(self, miss_rate, task_size):
        self.last_miss_rate = miss_rate
        self.last_task_size = task_size


@dataclass
class KneepointReport:
    kneepoint_bytes: int
    curve: MissRateCurve
    samples_per_task: int
    avg_sample_size_bytes: float

    def __post_init__(self):
        if self.samples_per_task < 1:
            raise ValueError("samples_per_task must be at least 1")

    @classmethod
    def for_dataset(cls, kneepoint_bytes, dataset, curve=None):
        """
        Make a report that sizes tasks for `dataset` at `kneepoint_bytes`.
        """
        avg = dataset.avg_sample_size
        if curve is None:
            curve = MissRateCurve([(kneepoint_bytes, 0.)])
        return cls(kneepoint_bytes, curve, samples_per_task_for(kneepoint_bytes, avg), avg)

    def to_dict(self):
        return {
            'kneepoint_bytes': self.kneepoint_bytes,
            'samples_per_task': self.samples_per_task,
            'avg_sample_size_bytes': self.avg_sample_size_bytes,
            'curve': [list(point) for point in self.curve.points],
        }

    @classmethod
    def from_dict(cls, values):
        curve = MissRateCurve([tuple(point) for point in values.get('curve', [])])
        return cls(int(values['kneepoint_bytes']), curve,
                   int(values['samples_per_task']),
                   float(values['avg_sample_size_bytes']))

    def save(self, filename, curve_filename=None):
        """
        Write the report as `key=value` lines. The curve, if wanted, goes in
        a separate CSV file.
        """
        here = os.path.dirname(os.path.abspath(filename))
        with open(filename, 'w', encoding='utf-8') as out:
            print('kneepoint_bytes=%d' % self.kneepoint_bytes, file=out)
            print('samples_per_task=%d' % self.samples_per_task, file=out)
            print('avg_sample_size_bytes=%r' % float(self.avg_sample_size_bytes), file=out)
            if curve_filename is not None:
                print('curve=%s' % os.path.relpath(curve_filename, here), file=out)
        if curve_filename is not None:
            self.curve.save_csv(curve_filename)

    @classmethod
    def load(cls, filename):
        with open(filename, encoding='utf-8') as file:
            values = parse_config_lines(file)
        curve = MissRateCurve([])
        if 'curve' in values:
            here = os.path.dirname(os.path.abspath(filename))
            curve = MissRateCurve.load_csv(os.path.join(here, str(values['curve'])))
        return cls(int(values['kneepoint_bytes']), curve,
                   int(values['samples_per_task']),
                   float(values['avg_sample_size_bytes']))


@dataclass
class Task:
    id: int
    sample_ids: list
    size_bytes: int
    spec: SubsampleSpec
    repetition_range: tuple
    outlier: bool = False

    def __post_init__(self):
        if not self.sample_ids:
            raise ValueError("A task needs at least one sample")

    @property
    def repetitions(self):
        return range(*self.repetition_range)

    def to_dict(self):
        return {
            'id': self.id, 'sample_ids': list(self.sample_ids),
            'size_bytes': self.size_bytes, 'spec': self.spec.to_dict(),
            'repetition_range': list(self.repetition_range),
            'outlier': self.outlier
        }

    @classmethod
    def from_dict(cls, values):
        return cls(
            id=int(values['id']), sample_ids=[int(s) for s in values['sample_ids']],
            size_bytes=int(values['size_bytes']),
            spec=SubsampleSpec.from_dict(values['spec']),
            repetition_range=tuple(values['repetition_range']),
            outlier=bool(values.get('outlier', False))
        )


@dataclass
class NodePartition:
    node_id: int
    samples_count: int
    sample_ids: list = field(default_factory=list)


def samples_per_task_for(kneepoint_bytes, avg_sample_size):
    """
    >>> samples_per_task_for(2560 * 1024, 230 * 1024 * 1024 / 400)
    4
    >>> samples_per_task_for(1, 600000)
    1
    """
    if avg_sample_size <= 0:
        return 1
    return max(1, int(math.floor(kneepoint_bytes / avg_sample_size)))


def find_kneepoint(measure, candidate_sizes, avg_sample_size_bytes=None, noise=0.):
    """
    Search for the kneepoint. `measure(size)` runs a task of about `size`
    bytes and returns (miss_rate, actual_size).

    The smallest size is measured first, then each larger size in turn. The
    first growth rate between consecutive measurements becomes the baseline;
    the search stops at the first size whose growth rate exceeds it, and
    returns the size measured just before. If nothing exceeds the baseline,
    the largest size measured is returned.

    Steps where the task size didn't change are skipped. `noise` is the
    relative change in miss rate treated as no change at all.
    """
    sizes = list(candidate_sizes)
    if len(sizes) < 3:
        raise ValueError("Need at least 3 candidate sizes, got %d" % len(sizes))
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("Candidate sizes must be strictly increasing")

    miss_rate, actual = measure(sizes[0])
    state = KneepointSearchState(miss_rate, actual)
    points = [(actual, miss_rate)]
    for size in sizes[1:]:
        miss_rate, actual = measure(size)
        if actual <= state.last_task_size:
            logger.debug("skipping size %d: task didn't grow", size)
            continue
        growth = state.growth_rate(miss_rate, actual, noise)
        points.append((actual, miss_rate))
        if state.max_rate is None:
            state.max_rate = growth
        elif growth > state.max_rate:
            logger.info("growth rate %.3g at %d bytes exceeds baseline %.3g",
                        growth, actual, state.max_rate)
            break
        state.advance(miss_rate, actual)

    kneepoint = state.last_task_size
    if avg_sample_size_bytes is None:
        avg_sample_size_bytes = float(points[0][0])
    return KneepointReport(
        kneepoint_bytes=int(kneepoint),
        curve=MissRateCurve(points),
        samples_per_task=samples_per_task_for(kneepoint, avg_sample_size_bytes),
        avg_sample_size_bytes=avg_sample_size_bytes
    )


def candidate_sizes(dataset, n_nodes=1, factor=SWEEP_FACTOR):
    """
    The sizes to profile: a geometric sweep from one average sample up to
    the data partitioned to one node.
    """
    if factor <= 1:
        raise ValueError("The sweep factor must be greater than 1")
    size = dataset.avg_sample_size
    limit = dataset.total_bytes / max(1, n_nodes)
    sizes = []
    while True:
        rounded = int(round(size))
        if not sizes or rounded > sizes[-1]:
            sizes.append(rounded)
        if size >= limit:
            break
        size = min(size * factor, limit)
    return sizes


def partition_to_nodes(dataset, n_nodes):
    """
    Deal samples out to nodes round-robin, in manifest order.
    """
    if n_nodes < 1:
        raise ValueError("Need at least one node")
    partitions = [NodePartition(node_id, 0, []) for node_id in range(n_nodes)]
    for index, sample_id in enumerate(dataset.sample_ids):
        partitions[index % n_nodes].sample_ids.append(sample_id)
    for partition in partitions:
        partition.samples_count = len(partition.sample_ids)
    return partitions


def pack_tasks(dataset, report, spec=None, partitions=None, repetition_range=None):
    """
    Group samples into tasks of `samples_per_task` consecutive samples, where
    samples_per_task = max(1, floor(kneepoint / average sample size)).

    Samples larger than the kneepoint on their own are split off into
    singleton tasks marked as outliers. If `partitions` are given, tasks are
    packed within each partition, so no task mixes samples from two nodes.
    """
    if len(dataset) == 0:
        raise ValueError("Can't pack tasks from an empty dataset")
    if report.kneepoint_bytes < 1:
        raise ValueError("kneepoint_bytes must be at least 1")
    if spec is None:
        spec = SubsampleSpec()
    if repetition_range is None:
        repetition_range = (0, spec.repetitions)
    per_task = samples_per_task_for(report.kneepoint_bytes, dataset.avg_sample_size)
    if partitions is None:
        groups = [dataset.sample_ids]
    else:
        groups = [partition.sample_ids for partition in partitions]

    sizes = dataset.sizes()
    tasks = []

    def emit(sample_ids, outlier=False):
        tasks.append(Task(
            id=len(tasks), sample_ids=list(sample_ids),
            size_bytes=sum(sizes[sid] for sid in sample_ids),
            spec=spec, repetition_range=tuple(repetition_range), outlier=outlier
        ))

    for group in groups:
        current = []
        for sample_id in group:
            if sizes[sample_id] > report.kneepoint_bytes:
                emit([sample_id], outlier=True)
                continue
            current.append(sample_id)
            if len(current) == per_task:
                emit(current)
                current = []
        if current:
            emit(current)
    logger.info("Packed %d samples into %d tasks of up to %d samples",
                len(dataset), len(tasks), per_task)
    return tasks
