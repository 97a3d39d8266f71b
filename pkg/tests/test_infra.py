"""Aggregation, seeding and chunked-parallelism building blocks."""
import numpy as np
import pytest

from neumc import estimates, parallel
from neumc.seeding import RngStream


def test_kahan_compensates_small_terms():
    # naive left-to-right summation drops every single +1 against 1e16;
    # the compensation carries them and restores the total at the end
    s = estimates.KahanSum()
    s.add(1e16)
    for _ in range(1000):
        s.add(1.0)
    s.add(-1e16)
    assert s.value() == 1000.0


def test_kahan_total_matches_fsum():
    import math
    rng = np.random.default_rng(0)
    parts = rng.standard_normal(500) * 10.0 ** rng.integers(-8, 8, 500)
    total = estimates.kahan_total(parts)
    assert total == pytest.approx(math.fsum(parts), rel=1e-12)


def test_accumulator_matches_direct_moments():
    rng = np.random.default_rng(1)
    samples = rng.standard_normal(4096) + 0.7
    acc = estimates.MomentAccumulator()
    for chunk in np.split(samples, 8):
        acc.add_chunk(chunk)
    est = acc.estimate(horizon=2.0)
    assert est.value == pytest.approx(samples.mean(), rel=1e-13)
    assert est.stderr == pytest.approx(samples.std(ddof=0) / 64.0, rel=1e-6)
    assert est.n_paths == 4096
    assert est.horizon == 2.0


def test_partial_aggregation_is_chunk_order_invariant():
    rng = np.random.default_rng(2)
    samples = rng.standard_normal(1000)
    a = estimates.MomentAccumulator()
    for chunk in np.split(samples, 10):
        a.add_chunk(chunk)
    b = estimates.MomentAccumulator()
    for chunk in np.split(samples, 10):
        b.add_partial(chunk.sum(), np.sum(chunk * chunk), chunk.size)
    ea, eb = a.estimate(), b.estimate()
    assert ea.value == eb.value and ea.stderr == eb.stderr


def test_estimate_helpers():
    e1 = estimates.Estimate(1.0, 0.3, 100)
    e2 = estimates.Estimate(1.5, 0.4, 100)
    assert e1.combined_se(e2) == pytest.approx(0.5)
    assert e1.within(1.5, n_se=3)
    assert not e1.within(2.5, n_se=3)
    assert e1.within(2.5, n_se=3, extra=1.0)


def test_constant_samples_have_zero_stderr():
    est = estimates.mean_estimate(np.full(50, 3.25))
    assert est.value == 3.25
    assert est.stderr == 0.0


def test_stream_children_are_stable():
    s = RngStream(7)
    a = s.child(1, 2).generator().standard_normal(4)
    b = RngStream(7).child(1, 2).generator().standard_normal(4)
    np.testing.assert_array_equal(a, b)


def test_stream_children_differ_by_tag():
    s = RngStream(7)
    a = s.child(1, 2).generator().standard_normal(4)
    b = s.child(1, 3).generator().standard_normal(4)
    c = s.child(2, 2).generator().standard_normal(4)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_stream_nested_tags_independent_of_call_order():
    a = RngStream(0).child(3).child(4, 5)
    b = RngStream(0).child(3, 4, 5)
    np.testing.assert_array_equal(a.generator().standard_normal(3),
                                  b.generator().standard_normal(3))


def test_chunk_sizes():
    assert list(parallel.chunk_sizes(10, 4)) == [4, 4, 2]
    assert list(parallel.chunk_sizes(8, 8)) == [8]
    assert list(parallel.chunk_sizes(3, 100)) == [3]


@pytest.mark.parametrize("workers", [1, 3])
def test_map_chunks_order_and_worker_invariance(workers):
    def task(index, size):
        return index, float(size) * (index + 1)

    out = list(parallel.map_chunks(task, 25, 10, workers=workers))
    assert [o[0] for o in out] == [0, 1, 2]
    assert [o[1] for o in out] == [10.0, 20.0, 15.0]


def test_map_chunks_propagates_errors():
    def task(index, size):
        if index == 1:
            raise ValueError("boom")
        return index

    with pytest.raises(ValueError, match="boom"):
        list(parallel.map_chunks(task, 20, 10, workers=2))
