import math
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy import optimize, stats

from tinymr.datalayer import (
    CorruptPayload, DataNode, FetchResult, FetchTimeout, ReplicationController,
    SampleCache, SampleLoader, SampleUnavailable, adapt_replication, build_initial_plan,
    compute_prefetch_depth, fetch, interference_ratio, p95, prefetch_for_queue,
    rotation_offset, shifted_exponential
)
from tinymr.sizing import Task
from tinymr.workload import Dataset, SubsampleSpec, make_rng


def make_cluster(n_nodes, n_samples=30, latency_ms=1.):
    dataset = Dataset.from_sizes([64] * n_samples)
    nodes = {}
    for node_id in range(n_nodes):
        node = DataNode(node_id, latency=lambda: latency_ms)
        node.load(dataset)
        nodes[node_id] = node
    plan = build_initial_plan(dataset.manifest, list(nodes), seed=5)
    return dataset, nodes, plan


def test_initial_plan_replicates_everywhere():
    dataset, _nodes, plan = make_cluster(3)
    assert plan.replication_factor == 3
    for sample_id in dataset.sample_ids:
        assert sorted(plan.assignment[sample_id]) == [0, 1, 2]
    firsts = Counter(nodes[0] for nodes in plan.assignment.values())
    assert set(firsts) == {0, 1, 2}
    frame = plan.to_frame()
    assert list(frame.columns) == ['sample_id', 'node_id', 'rank']
    assert len(frame) == 90


def test_initial_plan_edge_cases():
    dataset = Dataset.from_sizes([64] * 5)
    plan = build_initial_plan(dataset.manifest, ['only'])
    assert plan.replication_factor == 1
    assert plan.assignment[3] == ['only']
    with pytest.raises(ValueError):
        build_initial_plan([], [0, 1])
    with pytest.raises(ValueError):
        build_initial_plan(dataset.manifest, [])


def test_rotation_offset():
    offsets = [rotation_offset(0, sample_id, 4) for sample_id in range(400)]
    assert offsets == [rotation_offset(0, sample_id, 4) for sample_id in range(400)]
    assert set(offsets) == {0, 1, 2, 3}


def test_fetch_healthy():
    dataset, nodes, plan = make_cluster(3)
    result = fetch(7, plan, nodes, deadline_ms=50.)
    assert result.payload == dataset.sample(7).payload()
    assert result.node_id == plan.assignment[7][0]
    assert result.failovers == 0
    assert result.fetch_ms == 1.


def test_fetch_fails_over():
    dataset, nodes, plan = make_cluster(3)
    first, second = plan.assignment[7][:2]
    nodes[first].alive = False
    result = fetch(7, plan, nodes, deadline_ms=50.)
    assert result.node_id == second
    assert result.failovers == 1
    assert result.fetch_ms == 51.
    assert result.payload == dataset.sample(7).payload()


def test_fetch_slow_replica_times_out():
    _dataset, nodes, plan = make_cluster(2, latency_ms=5.)
    with pytest.raises(FetchTimeout):
        nodes[0].get(3, deadline_ms=2.)
    with pytest.raises(SampleUnavailable):
        fetch(3, plan, nodes, deadline_ms=2.)


def test_fetch_all_dead():
    _dataset, nodes, plan = make_cluster(3)
    for node in nodes.values():
        node.alive = False
    with pytest.raises(SampleUnavailable):
        fetch(0, plan, nodes, deadline_ms=10.)


def test_fetch_corrupt_payload():
    _dataset, nodes, plan = make_cluster(2)
    first = plan.assignment[4][0]
    nodes[first].store[4] = b'short'
    with pytest.raises(CorruptPayload):
        fetch(4, plan, nodes)
    with pytest.raises(CorruptPayload):
        nodes[first].put(4, b'short', 64)


def test_fetch_unknown_sample():
    _dataset, nodes, plan = make_cluster(1)
    with pytest.raises(KeyError):
        fetch(999, plan, nodes)


def make_tasks(groups):
    spec = SubsampleSpec(repetitions=1)
    return [Task(i, list(ids), 64 * len(ids), spec, (0, 1)) for i, ids in enumerate(groups)]


def test_prefetch_whole_queue():
    _dataset, nodes, plan = make_cluster(2)
    tasks = make_tasks([[0, 1], [2]])
    cache = SampleCache()
    resident = prefetch_for_queue(tasks, 5, plan, nodes, cache)
    assert resident == {0, 1, 2}
    assert cache.resident_ids() == {0, 1, 2}


def test_prefetch_is_idempotent():
    _dataset, nodes, plan = make_cluster(2)
    tasks = make_tasks([[0, 1], [2, 3]])
    cache = SampleCache()
    prefetch_for_queue(tasks, 2, plan, nodes, cache)
    served = sum(node.served_count for node in nodes.values())
    assert served == 4
    prefetch_for_queue(tasks, 2, plan, nodes, cache)
    assert sum(node.served_count for node in nodes.values()) == served


def test_prefetch_stops_at_k():
    _dataset, nodes, plan = make_cluster(2)
    tasks = make_tasks([[0], [1], [2]])
    cache = SampleCache()
    assert prefetch_for_queue(tasks, 1, plan, nodes, cache) == {0}
    assert cache.resident_ids() == {0}
    assert prefetch_for_queue(tasks, 0, plan, nodes, cache) == set()


def test_prefetch_skips_samples_too_big_to_cache():
    _dataset, nodes, plan = make_cluster(2)
    tasks = make_tasks([[0, 1]])
    cache = SampleCache(capacity_bytes=32)
    assert prefetch_for_queue(tasks, 1, plan, nodes, cache) == set()
    assert cache.resident_ids() == set()
    assert not cache.put(0, b'x' * 64)
    assert cache.put(0, b'x' * 16)


def test_loader_shares_a_fetch_in_flight():
    loader = SampleLoader(SampleCache(capacity_bytes=2))
    started = threading.Event()
    release = threading.Event()
    calls = []

    def slow_fetch(sample_id):
        calls.append(sample_id)
        started.set()
        release.wait(5)
        return FetchResult(b'abcd', 1., 'data0')

    with ThreadPoolExecutor(max_workers=2) as pool:
        first = pool.submit(loader.load, 7, slow_fetch)
        assert started.wait(5)
        second = pool.submit(loader.load, 7, slow_fetch)
        time.sleep(0.1)
        release.set()
        assert first.result(5) == b'abcd'
        assert second.result(5) == b'abcd'
    # The payload is too big to cache, so only sharing avoids a second fetch
    assert calls == [7]
    assert loader.fetch_count == 1


def test_loader_after_a_failed_fetch():
    loader = SampleLoader(SampleCache())

    def broken(sample_id):
        raise SampleUnavailable("no replica answered for sample %d" % sample_id)

    with pytest.raises(SampleUnavailable):
        loader.load(3, broken)
    assert loader.load(3, lambda sid: FetchResult(b'ok', 1., 'data0')) == b'ok'
    assert loader.load(3, broken) == b'ok'


def test_prefetch_and_task_share_fetches():
    _dataset, nodes, plan = make_cluster(2)
    tasks = make_tasks([[0, 1], [2, 3]])
    loader = SampleLoader(SampleCache())
    prefetch_for_queue(tasks, 2, plan, nodes, loader.cache, loader=loader)
    for sample_id in range(4):
        loader.load(sample_id, lambda sid: fetch(sid, plan, nodes))
    assert loader.fetch_count == 4
    assert sum(node.served_count for node in nodes.values()) == 4


def test_prefetch_depth():
    assert compute_prefetch_depth(2., 1., 1) == 3
    assert compute_prefetch_depth(0., 0., 0) == 1
    with pytest.raises(ValueError):
        compute_prefetch_depth(-1., 1.)


def test_sample_cache_evicts_least_recent():
    cache = SampleCache(capacity_bytes=10)
    cache.put(1, b'aaaa')
    cache.put(2, b'bbbb')
    cache.put(3, b'cccc')
    assert cache.resident_ids() == {2, 3}
    assert cache.get(2) == b'bbbb'
    cache.put(4, b'dddd')
    assert cache.resident_ids() == {2, 4}
    cache.put(5, b'x' * 11)
    assert 5 not in cache
    assert cache.bytes_used == 8


def test_adapt_adds_a_spare_node():
    _dataset, _nodes, plan = make_cluster(3)
    new_plan = adapt_replication(plan, [10.] * 20, [5.] * 20, 10., spare_node_ids=[3])
    assert new_plan.replication_factor == 4
    assert new_plan.data_node_ids == [0, 1, 2, 3]
    assert sorted(new_plan.assignment[0]) == [0, 1, 2, 3]


def test_adapt_retires_a_node():
    _dataset, _nodes, plan = make_cluster(3)
    new_plan = adapt_replication(plan, [0.5] * 20, [5.] * 20, 10.)
    assert new_plan.replication_factor == 2
    assert new_plan.data_node_ids == [0, 1]


def test_adapt_respects_the_floor():
    _dataset, _nodes, plan = make_cluster(2)
    assert adapt_replication(plan, [0.1] * 20, [5.] * 20, 10.) is plan
    _dataset, _nodes, single = make_cluster(1)
    assert adapt_replication(single, [0.1] * 20, [5.] * 20, 10.) is single


def test_adapt_without_spares_or_stats():
    _dataset, _nodes, plan = make_cluster(3)
    assert adapt_replication(plan, [10.] * 20, [5.] * 20, 10.) is plan
    assert adapt_replication(plan, [3.] * 20, [5.] * 20, 10.) is plan
    with pytest.raises(ValueError):
        adapt_replication(plan, [], [5.], 10.)


def test_replication_controller_cooldown_and_copy():
    dataset, nodes, plan = make_cluster(3)
    spare = DataNode(3, latency=lambda: 1.)
    nodes[3] = spare
    controller = ReplicationController(plan, spare_node_ids=[3], nodes=nodes, cooldown=10)
    for _ in range(9):
        controller.observe(10., 5.)
    assert controller.maybe_adapt(10.) is plan
    assert controller.history == [3]
    controller.observe(10., 5.)
    new_plan = controller.maybe_adapt(10.)
    assert new_plan.replication_factor == 4
    assert controller.history == [3, 4]
    assert spare.store[5] == dataset.sample(5).payload()
    # statistics restart after a change
    assert len(controller.fetch_ms) == 0


def test_p95_of_shifted_exponential():
    rng = make_rng(4, 4)
    sampler = shifted_exponential(1., 2., rng)
    values = [sampler() for _ in range(20000)]
    expected = 1. + stats.expon.ppf(0.95, scale=2.)
    assert p95(values) == pytest.approx(expected, rel=0.05)


def test_p95_of_fetches_from_slow_replicas():
    # 95th percentile of shift + Exp(mean) is shift + mean * ln(20)
    shift_ms, mean_ms = 0.5, 2.
    rng = make_rng(4, 6)
    dataset = Dataset.from_sizes([16] * 500)
    nodes = {}
    for node_id in range(3):
        nodes[node_id] = DataNode(node_id, latency=shifted_exponential(shift_ms, mean_ms, rng))
        nodes[node_id].load(dataset)
    plan = build_initial_plan(dataset.manifest, list(nodes), seed=2)
    fetch_ms = [fetch(sample_id, plan, nodes).fetch_ms
                for _round in range(20) for sample_id in dataset.sample_ids]
    assert p95(fetch_ms) == pytest.approx(shift_ms + mean_ms * math.log(20), rel=0.10)
    served = [node.served_count for node in nodes.values()]
    assert min(served) > 0.2 * len(fetch_ms)


def test_p95_of_mixed_latencies():
    # 80% fast replicas, 20% slow ones
    rng = make_rng(4, 5)
    fast = 0.5 + rng.exponential(1., 16000)
    slow = 2. + rng.exponential(10., 4000)
    values = np.concatenate([fast, slow])

    def mixture_cdf(x):
        return (0.8 * stats.expon.cdf(x, loc=0.5, scale=1.)
                + 0.2 * stats.expon.cdf(x, loc=2., scale=10.))

    expected = optimize.brentq(lambda x: mixture_cdf(x) - 0.95, 0.5, 200.)
    assert p95(values) == pytest.approx(expected, rel=0.10)


def test_interference_ratio():
    assert interference_ratio([12., 12.], [10., 10.]) == pytest.approx(1.2)
    assert math.isnan(interference_ratio([], [10.]))
